"""Point extraction: NMS on network heatmaps and classical sub-pixel refiners."""

from __future__ import annotations

import csv
from typing import NamedTuple, Optional

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter
from scipy.spatial import cKDTree

from .geometry import PointSet, Space
from .numerics import ConvergenceError, lm_solve


class LocalizationError(ValueError):
    pass


def default_window(R: int) -> int:
    """Largest odd value <= R-1, but at least 3."""
    w = R - 1 if (R - 1) % 2 else R - 2
    return max(3, w)


def _local_maxima(heatmap, window):
    hm = np.asarray(heatmap, dtype=float)
    mx = maximum_filter(hm, size=window, mode="constant", cval=-np.inf)
    return hm == mx


def nms_extract(heatmap, window: int = 3, threshold: float = 0.0,
                space: Space = Space.CHANNEL) -> PointSet:
    """Local maxima over a ``window x window`` neighbourhood with value >= ``threshold``.

    Points are ``(row, col)`` of the heatmap. Plateaus are resolved in
    lexicographic (row, col) order: a maximum is dropped when an earlier
    kept maximum lies within its window.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    hm = np.asarray(heatmap, dtype=float)
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    cand = _local_maxima(hm, window) & (hm >= threshold)
    rc = np.argwhere(cand)  # already lexicographic
    if len(rc) > 1:
        half = window // 2
        pairs = cKDTree(rc).query_pairs(half, p=np.inf, output_type="ndarray")
        if len(pairs):
            keep = np.ones(len(rc), bool)
            conflicts = {}
            for a, b in pairs:
                lo, hi = min(a, b), max(a, b)
                conflicts.setdefault(hi, []).append(lo)
            for i in sorted(conflicts):
                if any(keep[j] for j in conflicts[i]):
                    keep[i] = False
            rc = rc[keep]
    conf = hm[rc[:, 0], rc[:, 1]] if len(rc) else np.zeros(0)
    return PointSet(rc.astype(float), space, conf)


def rescale_points(pts: PointSet, R: int) -> PointSet:
    """Heatmap-scale coordinates back to input resolution."""
    return PointSet(pts.points / R, pts.space, pts.confidence, pts.wave_index, pts.frame_id)


# --------------------------------------------------------------------------
# ROC threshold
# --------------------------------------------------------------------------

def _label_points(label, shape):
    """Binary map of the heatmap's shape, or an ``N x 2`` array of (row, col)."""
    a = np.asarray(label)
    if a.shape == tuple(shape):
        return np.argwhere(a > 0).astype(float)
    return a.reshape(-1, 2).astype(float)


def match_ranked(peaks, values, targets, tolerance):
    """Walk peaks by descending value; each claims the nearest free target within ``tolerance``.

    Because the walk is in score order, the matches among peaks above any
    threshold are exactly what the same walk would give on that subset.
    Returns a boolean "matched" flag per peak.
    """
    matched = np.zeros(len(peaks), bool)
    if len(peaks) == 0 or len(targets) == 0:
        return matched
    tree = cKDTree(targets)
    free = np.ones(len(targets), bool)
    for i in np.argsort(-values, kind="stable"):
        idx = tree.query_ball_point(peaks[i], tolerance)
        idx = [j for j in idx if free[j]]
        if idx:
            d = np.linalg.norm(targets[idx] - peaks[i], axis=1)
            j = idx[int(np.argmin(d))]
            free[j] = False
            matched[i] = True
    return matched


def roc_scores(heatmaps, labels, tolerance_px, window=3):
    """Per-candidate (value, matched) over all frames plus the number of positives."""
    values, hits, n_pos = [], [], 0
    for hm, lab in zip(heatmaps, labels):
        targets = _label_points(lab, np.shape(hm))
        n_pos += len(targets)
        peaks = nms_extract(hm, window, -np.inf)
        values.append(peaks.confidence)
        hits.append(match_ranked(peaks.points, peaks.confidence, targets, tolerance_px))
    return np.concatenate(values), np.concatenate(hits), n_pos


def gmean_curve(values, hits, n_pos, thresholds):
    """sqrt(TPR * (1 - FPR)) at each threshold; FPR is over all unmatched candidates."""
    n_neg = int(np.sum(~hits))
    order = np.argsort(values)
    v = values[order]
    tp_cum = np.cumsum(hits[order][::-1])[::-1]
    fp_cum = np.cumsum(~hits[order][::-1])[::-1]
    idx = np.searchsorted(v, thresholds, side="left")
    tp = np.where(idx < len(v), tp_cum[np.minimum(idx, len(v) - 1)], 0)
    fp = np.where(idx < len(v), fp_cum[np.minimum(idx, len(v) - 1)], 0)
    tpr = tp / n_pos
    fpr = fp / n_neg if n_neg else np.zeros_like(tpr, dtype=float)
    return np.sqrt(tpr * (1 - fpr))


def roc_threshold(heatmaps, labels, tolerance_px=1.0, window=3, n_quantiles=256) -> float:
    """Detection threshold maximising the ROC geometric mean.

    ``labels`` are binary maps or ``N x 2`` arrays of target (row, col).
    Candidates are every NMS peak; thresholds are quantiles of their values.
    Ties go to the higher threshold.
    """
    values, hits, n_pos = roc_scores(heatmaps, labels, tolerance_px, window)
    if n_pos == 0:
        raise LocalizationError("labels contain no positives; threshold undefined")
    if len(values) == 0:
        raise LocalizationError("heatmaps have no candidate peaks")
    thresholds = np.unique(np.quantile(values, np.linspace(0, 1, n_quantiles)))
    g = gmean_curve(values, hits, n_pos, thresholds)
    best = np.flatnonzero(g == g.max())[-1]
    return float(thresholds[best])


# --------------------------------------------------------------------------
# classical sub-pixel refiners on B-mode images
# --------------------------------------------------------------------------

class Refined(NamedTuple):
    point: np.ndarray  # (row, col)
    ok: bool


def _patch(img, seed, patch):
    if patch < 3 or patch % 2 == 0:
        raise ValueError("patch must be odd and >= 3")
    img = np.asarray(img, dtype=float)
    r, c = int(seed[0]), int(seed[1])
    h = patch // 2
    if r - h < 0 or c - h < 0 or r + h >= img.shape[0] or c + h >= img.shape[1]:
        raise ValueError(f"seed {(r, c)} closer than {h} px to the border")
    return img[r - h:r + h + 1, c - h:c + h + 1], np.array([r, c], float), h


def radial_symmetry(img, seed_px, patch: int = 7) -> Refined:
    """Point of maximal radial symmetry in the patch around ``seed_px``.

    Gradients are taken on the half-pixel lattice between samples, lightly
    smoothed, and the point closest (weighted least squares) to all gradient
    lines is found by a 2x2 solve. Weights are the squared gradient
    magnitude over the square root of the distance to the gradient-weighted
    centroid.
    """
    P, seed, h = _patch(img, seed_px, patch)
    gr = 0.5 * ((P[1:, :-1] + P[1:, 1:]) - (P[:-1, :-1] + P[:-1, 1:]))
    gc = 0.5 * ((P[:-1, 1:] + P[1:, 1:]) - (P[:-1, :-1] + P[1:, :-1]))
    if patch > 3:
        gr = uniform_filter(gr, 3, mode="nearest")
        gc = uniform_filter(gc, 3, mode="nearest")
    n = patch - 1
    rr, cc = np.meshgrid(np.arange(n) + 0.5 - h, np.arange(n) + 0.5 - h, indexing="ij")
    mag2 = gr ** 2 + gc ** 2
    total = mag2.sum()
    if not total > 0:
        return Refined(seed, False)
    centroid = np.array([(mag2 * rr).sum(), (mag2 * cc).sum()]) / total
    dist = np.hypot(rr - centroid[0], cc - centroid[1])
    w = mag2 / np.sqrt(np.maximum(dist, 1e-3))
    mag = np.sqrt(mag2)
    with np.errstate(invalid="ignore", divide="ignore"):
        nr = np.where(mag > 0, -gc / mag, 0.0)  # unit normal to the gradient line
        nc = np.where(mag > 0, gr / mag, 0.0)
    A = np.array([[np.sum(w * nr * nr), np.sum(w * nr * nc)],
                  [np.sum(w * nr * nc), np.sum(w * nc * nc)]])
    proj = nr * rr + nc * cc
    b = np.array([np.sum(w * nr * proj), np.sum(w * nc * proj)])
    if abs(np.linalg.det(A)) <= 1e-12 * max(np.trace(A) ** 2, 1e-300):
        return Refined(seed, False)
    off = np.linalg.solve(A, b)
    off = np.clip(off, -patch / 2, patch / 2)
    return Refined(seed + off, True)


def _gauss_model(p, rr, cc):
    A, r0, c0, s, b = p
    e = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * s * s))
    return A * e + b, e


def gaussian_fit_2d(img, seed_px, patch: int = 7, max_iter: int = 200) -> Refined:
    """Least-squares fit of an isotropic Gaussian plus offset over the patch."""
    P, seed, h = _patch(img, seed_px, patch)
    rr, cc = np.meshgrid(np.arange(patch) - h, np.arange(patch) - h, indexing="ij")
    rr, cc, data = rr.ravel(), cc.ravel(), P.ravel()

    def residual(p):
        # widths outside the plausible range are rejected as non-finite steps
        if not 0.25 <= abs(p[3]) <= 2 * patch:
            return np.full(data.shape, np.inf)
        return _gauss_model(p, rr, cc)[0] - data

    def jacobian(p):
        A, r0, c0, s, _ = p
        _, e = _gauss_model(p, rr, cc)
        d2 = (rr - r0) ** 2 + (cc - c0) ** 2
        return np.stack([e, A * e * (rr - r0) / s ** 2, A * e * (cc - c0) / s ** 2,
                         A * e * d2 / s ** 3, np.ones_like(e)], axis=1)

    lo = data.min()
    init = [data.max() - lo, 0.0, 0.0, 1.5, lo]
    try:
        p = lm_solve(residual, init, jacobian, max_iter=max_iter)
    except ConvergenceError:
        return Refined(seed, False)
    off = p[1:3]
    if not np.all(np.isfinite(off)) or np.any(np.abs(off) > patch / 2):
        return Refined(seed, False)
    return Refined(seed + off, True)


def lanczos_kernel(x, a=3):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def interp_peak(img, seed_px, factor: int = 10, taps: int = 3, patch: int = 7) -> Refined:
    """Argmax of the patch after Lanczos upsampling by ``factor``."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    P, seed, h = _patch(img, seed_px, patch)
    fine = np.arange(-h * factor, h * factor + 1) / factor
    M = lanczos_kernel(fine[:, None] - np.arange(-h, h + 1)[None, :], taps)
    up = M @ P @ M.T
    i, j = np.unravel_index(int(np.argmax(up)), up.shape)
    return Refined(seed + np.array([fine[i], fine[j]]), True)


REFINERS = {"rs": radial_symmetry, "gauss2d": gaussian_fit_2d, "lanczos": interp_peak}


def detect_and_refine(img, threshold, method="rs", window=3, patch=7) -> PointSet:
    """Seeds from NMS on ``img`` (ignoring the border band), refined with ``method``.

    Returns ``(row, col)`` points with the seed value as confidence.
    """
    refine = REFINERS[method]
    img = np.asarray(img, dtype=float)
    seeds = nms_extract(img, window, threshold, Space.BMODE)
    h = patch // 2
    H, W = img.shape
    pts, conf = [], []
    for (r, c), v in zip(seeds.points.astype(int), seeds.confidence):
        if r < h or c < h or r + h >= H or c + h >= W:
            continue
        pts.append(refine(img, (r, c), patch=patch).point)
        conf.append(v)
    return PointSet(np.array(pts).reshape(-1, 2), Space.BMODE, np.array(conf))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

CSV_COLUMNS = ("frame_id", "wave_index", "space", "y", "z", "confidence")


def write_points_csv(path, pts: PointSet):
    n = len(pts)
    fid = pts.frame_id if pts.frame_id is not None else np.zeros(n, int)
    wid = pts.wave_index if pts.wave_index is not None else np.full(n, -1)
    conf = pts.confidence if pts.confidence is not None else np.ones(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i in range(n):
            w.writerow([int(fid[i]), int(wid[i]), pts.space.value,
                        repr(float(pts.points[i, 0])), repr(float(pts.points[i, 1])),
                        repr(float(conf[i]))])


def read_points_csv(path, space: Optional[Space] = None) -> PointSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(CSV_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path}: missing columns {sorted(set(CSV_COLUMNS) - set(rows[0]))}")
    spaces = {r["space"] for r in rows}
    if len(spaces) > 1:
        raise ValueError(f"{path}: mixed coordinate spaces {sorted(spaces)}")
    sp = Space(spaces.pop()) if spaces else (space or Space.BMODE)
    return PointSet(np.array([[float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 2), sp,
                    np.array([float(r["confidence"]) for r in rows]),
                    np.array([int(r["wave_index"]) for r in rows], dtype=int),
                    np.array([int(r["frame_id"]) for r in rows], dtype=int))
