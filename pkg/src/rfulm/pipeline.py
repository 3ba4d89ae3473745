"""End-to-end localisation pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .beamform import BModeGrid, das_beamform
from .evaluate import dbscan_fuse
from .geometry import PointSet, Space, apply_affine, fit_affine
from .localize import default_window, detect_and_refine, roc_threshold
from .training import localize_frame


def calibrate(geom, acq, waves, region, n=1000, seed=0) -> dict:
    """Affine channel-to-B-mode map per wave index."""
    return {w.index: fit_affine(geom, w, acq, n=n, seed=seed, region=region) for w in waves}


def network_points(net, frames, affines: dict, threshold: float, wavelength: float,
                   window: Optional[int] = None, eps: float = 0.6, fuse: bool = True) -> PointSet:
    """Localise every ``(frame_id, wave_index, data)`` and map to B-mode.

    Points from all waves of a frame are fused with DBSCAN unless ``fuse`` is off.
    """
    sets = []
    for fid, widx, data in frames:
        if widx not in affines:
            raise KeyError(f"no affine calibration for wave {widx}; run calibrate first")
        ch = localize_frame(net, data, threshold, window, fid, widx)
        sets.append(apply_affine(affines[widx], ch))
    pts = PointSet.concat(sets, Space.BMODE)
    return dbscan_fuse(pts, wavelength, eps) if fuse else pts


def compound(frames, geom, acq, waves_by_index, grid: BModeGrid, f_number=1.0):
    """Envelope of the coherent sum of DAS images of ``(wave_index, data)`` pairs."""
    acc = None
    for widx, data in frames:
        img = das_beamform(data, geom, waves_by_index[widx], acq, grid, f_number)
        acc = img if acc is None else acc + img
    return np.hypot(acc[0], acc[1])


def bmode_points(envelope, grid: BModeGrid, threshold, method="lanczos", frame_id=0,
                 window=3, patch=7) -> PointSet:
    """Classical detection on one envelope image, returned in metres."""
    px = detect_and_refine(envelope, threshold, method, window, patch)
    pts = grid.to_metres(px.points)
    return PointSet(pts, Space.BMODE, px.confidence, np.full(len(pts), -1),
                    np.full(len(pts), frame_id))


def bmode_threshold(envelopes, gt_points, grid: BModeGrid, tolerance_px=1.0, window=3):
    """ROC threshold for classical detection from envelopes and metric GT positions."""
    labels = [grid.to_pixels(g) for g in gt_points]
    return roc_threshold(envelopes, labels, tolerance_px, window)


__all__ = ["calibrate", "network_points", "compound", "bmode_points", "bmode_threshold",
           "default_window"]
