"""Synthetic RF / I-Q channel data of point scatterers with matched labels.

A Gaussian-enveloped cosine pulse is placed on every channel at the arrival
time given by :func:`rfulm.geometry.project_to_channels`. Only the geometry
of the wavefronts (hyperbola shape and phase) is meant to be faithful; there
is no attenuation, directivity, speckle or nonlinear bubble response.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import (AcquisitionParams, ArrayGeometry, PlaneWave, default_region,
                       project_to_channels, project_tips)
from .tensorio import save_tensor, load_tensor

log = logging.getLogger(__name__)

MAX_SCATTERERS = 32


@dataclass
class Scene:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frame_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.amplitudes = np.broadcast_to(
            np.asarray(self.amplitudes, dtype=float), (len(self.positions),)).copy()
        if len(self.positions) > MAX_SCATTERERS:
            raise ValueError(f"at most {MAX_SCATTERERS} scatterers per scene")

    def __len__(self):
        return len(self.positions)

    def __add__(self, other):
        return Scene(np.concatenate([self.positions, other.positions]),
                     np.concatenate([self.amplitudes, other.amplitudes]), self.frame_index)


@dataclass
class IQFrame:
    """``data`` is ``2 x U x V`` (I and Q planes, channels x samples)."""

    data: np.ndarray
    wave_index: int = 0
    scale: float = 1.0

    @property
    def complex(self):
        return self.data[0] + 1j * self.data[1]

    @property
    def envelope(self):
        return np.hypot(self.data[0], self.data[1])


def pulse_sigma(acq: AcquisitionParams) -> float:
    """Temporal std of the Gaussian envelope matching the relative bandwidth (FWHM)."""
    return math.sqrt(2 * math.log(2)) / (math.pi * acq.relative_bandwidth * acq.fc)


def simulate_channels(scene: Scene, geom: ArrayGeometry, wave: PlaneWave,
                      acq: AcquisitionParams) -> np.ndarray:
    """Raw RF channel data ``K x (V*decimation)``, not normalised."""
    n_rf = acq.n_rf_samples
    rf = np.zeros((geom.n_elements, n_rf))
    if len(scene) == 0:
        return rf
    sig = pulse_sigma(acq)
    half = int(math.ceil(5 * sig * acq.fs)) + 1
    delays = project_to_channels(scene.positions, geom, wave, acq, fs=acq.fs)
    el = geom.element_positions
    k_idx = np.arange(geom.n_elements)[:, None]
    for (y, z), amp, d in zip(scene.positions, scene.amplitudes, delays):
        r = np.hypot(y - el[:, 0], z)
        gain = amp / np.sqrt(r)
        lo = np.floor(d).astype(int) - half
        idx = lo[:, None] + np.arange(2 * half + 2)[None, :]
        valid = (idx >= 0) & (idx < n_rf)
        t = (idx - d[:, None]) / acq.fs
        p = gain[:, None] * np.cos(2 * np.pi * acq.fc * t) * np.exp(-0.5 * (t / sig) ** 2)
        np.add.at(rf, (np.broadcast_to(k_idx, idx.shape)[valid], idx[valid]), p[valid])
    return rf


def demodulate_iq(rf, acq: AcquisitionParams, decimation: Optional[int] = None) -> np.ndarray:
    """Mix down to baseband, low-pass and decimate; returns ``2 x U x V``.

    The low-pass is a zero-phase cascade of two moving averages of length
    ``round(fs / fc)``, which nulls the ``2 fc`` mixing product when ``fs`` is
    an integer multiple of ``fc``. Bandpass sampling (``fs < 2 fc``) is not
    rejected but the result is then aliased.
    """
    rf = np.atleast_2d(np.asarray(rf, dtype=float))
    d = acq.decimation if decimation is None else int(decimation)
    if rf.shape[-1] < 4:
        raise ValueError("need at least 4 RF samples")
    if d < 1 or rf.shape[-1] % d:
        raise ValueError(f"decimation {d} does not divide {rf.shape[-1]} samples")
    t = np.arange(rf.shape[-1]) / acq.fs
    L = max(1, int(round(acq.fs / acq.fc)))
    box = np.ones(L) / L
    kernel = np.convolve(box, box)
    i = convolve1d(rf * np.cos(2 * np.pi * acq.fc * t), kernel, axis=-1, mode="constant")
    q = convolve1d(rf * -np.sin(2 * np.pi * acq.fc * t), kernel, axis=-1, mode="constant")
    return np.stack([i[..., ::d], q[..., ::d]])


def add_clutter_noise(frame, snr_db, seed=None):
    """Add white Gaussian noise at ``snr_db`` relative to the frame's mean power.

    Accepts an :class:`IQFrame` or a bare array and returns the same kind.
    """
    data = frame.data if isinstance(frame, IQFrame) else np.asarray(frame, dtype=float)
    if data.size == 0:
        raise ValueError("empty frame")
    if snr_db is None or np.isinf(snr_db):
        out = data.copy()
    else:
        power = float(np.mean(data ** 2))
        std = math.sqrt(power * 10 ** (-snr_db / 10))
        rng = np.random.default_rng(seed)
        out = data + rng.normal(0.0, std, size=data.shape)
    if isinstance(frame, IQFrame):
        return IQFrame(out, frame.wave_index, frame.scale)
    return out


def normalize(data):
    """Scale so that ``max |value| == 1``; returns ``(data, scale)``."""
    peak = float(np.max(np.abs(data))) if data.size else 0.0
    if peak == 0:
        return data, 1.0
    return data / peak, 1.0 / peak


def simulate_rf(scene: Scene, geom: ArrayGeometry, wave: PlaneWave, acq: AcquisitionParams,
                noise_snr_db: Optional[float] = None, seed=None, iq: bool = True,
                normalized: bool = True) -> IQFrame:
    """Simulate one transmit event; see the module docstring for the pulse model."""
    rf = simulate_channels(scene, geom, wave, acq)
    data = demodulate_iq(rf, acq) if iq else rf[None]
    if noise_snr_db is not None and not np.isinf(noise_snr_db):
        if np.any(data):
            data = add_clutter_noise(data, noise_snr_db, seed)
        else:
            # an empty scene has no signal power to reference; use unit power
            rng = np.random.default_rng(seed)
            data = rng.normal(0.0, math.sqrt(10 ** (-noise_snr_db / 10)), size=data.shape)
    scale = 1.0
    if normalized:
        data, scale = normalize(data)
    return IQFrame(data, wave.index, scale)


def make_label_map(scene: Scene, geom, wave, acq, R: int, return_skipped=False):
    """Binary ``R*U x R*V`` map with a one at the rounded tip of every scatterer."""
    if R < 1:
        raise ValueError("R must be >= 1")
    shape = (R * geom.n_elements, R * acq.n_samples)
    label = np.zeros(shape)
    tips = project_tips(scene.positions, geom, wave, acq)
    idx = np.rint(R * tips).astype(int)
    inside = (idx[:, 0] >= 0) & (idx[:, 0] < shape[0]) & (idx[:, 1] >= 0) & (idx[:, 1] < shape[1])
    skipped = int(np.count_nonzero(~inside))
    if skipped:
        log.warning("%d scatterer tip(s) outside the frame were skipped", skipped)
    label[idx[inside, 0], idx[inside, 1]] = 1.0
    return (label, skipped) if return_skipped else label


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def imaging_region(geom: ArrayGeometry, acq: AcquisitionParams, z_min=1e-3, z_max=15e-3,
                   margin=0.5e-3):
    """Lateral array span x axial range that fits inside the recorded samples."""
    recorded = acq.n_samples / acq.fs_iq * acq.c / 2
    y0, y1, _, _ = default_region(geom)
    return (y0, y1, z_min, min(z_max, recorded - margin))


def random_scene(rng, region, n, frame_index=0):
    y0, y1, z0, z1 = region
    pos = np.stack([rng.uniform(y0, y1, n), rng.uniform(z0, z1, n)], axis=1)
    return Scene(pos, rng.uniform(0.2, 1.0, n), frame_index)


@dataclass
class TubeFlow:
    """Straight tubes with a parabolic (Poiseuille) velocity profile.

    Every bubble keeps its radial offset ``rho`` and moves along the tube axis
    at ``v_max * (1 - (rho / radius)^2)``, wrapping around at the tube end.
    """

    starts: np.ndarray
    directions: np.ndarray
    lengths: np.ndarray
    radii: np.ndarray
    v_max: np.ndarray
    tube_of: np.ndarray
    rho: np.ndarray
    s0: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def random(cls, rng, region, n_tubes=3, n_bubbles=5, radius=(50e-6, 200e-6),
               v_max=(5e-3, 20e-3)):
        y0, y1, z0, z1 = region
        a = np.stack([rng.uniform(y0, y1, n_tubes), rng.uniform(z0, z1, n_tubes)], 1)
        b = np.stack([rng.uniform(y0, y1, n_tubes), rng.uniform(z0, z1, n_tubes)], 1)
        vec = b - a
        length = np.maximum(np.linalg.norm(vec, axis=1), 1e-4)
        radii = rng.uniform(*radius, n_tubes)
        tube_of = rng.integers(0, n_tubes, n_bubbles)
        return cls(a, vec / length[:, None], length, radii, rng.uniform(*v_max, n_tubes),
                   tube_of, rng.uniform(-1, 1, n_bubbles) * radii[tube_of],
                   rng.uniform(0, 1, n_bubbles) * length[tube_of],
                   rng.uniform(0.2, 1.0, n_bubbles))

    def positions(self, t):
        k = self.tube_of
        v = self.v_max[k] * (1 - (self.rho / self.radii[k]) ** 2)
        s = np.mod(self.s0 + v * t, self.lengths[k])
        normal = np.stack([-self.directions[k, 1], self.directions[k, 0]], 1)
        return self.starts[k] + s[:, None] * self.directions[k] + self.rho[:, None] * normal

    def scene(self, frame_index, dt, region):
        pos = self.positions(frame_index * dt)
        y0, y1, z0, z1 = region
        inside = (pos[:, 0] >= y0) & (pos[:, 0] <= y1) & (pos[:, 1] >= z0) & (pos[:, 1] <= z1)
        return Scene(pos[inside], self.amplitudes[inside], frame_index)


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

MANIFEST_COLUMNS = ("frame_id", "wave_index", "rf_path", "label_path", "n_scatterers", "seed")
GT_COLUMNS = ("frame_id", "wave_index", "y_m", "z_m", "y_star", "z_star")


@dataclass
class DatasetSpec:
    n_frames: int = 1
    scatterers: tuple = (1, 10)
    angles_deg: tuple = (0.0,)
    R: int = 8
    seed: int = 0
    snr_db: Optional[float] = None
    geom: ArrayGeometry = field(default_factory=ArrayGeometry)
    acq: AcquisitionParams = field(default_factory=AcquisitionParams)
    z_range: tuple = (1e-3, 15e-3)
    tubes: int = 0
    frame_dt: float = 1e-3

    def waves(self):
        return [PlaneWave.from_degrees(a, self.geom, index=i) for i, a in enumerate(self.angles_deg)]

    def region(self):
        return imaging_region(self.geom, self.acq, *self.z_range)

    def metadata(self):
        g, a = self.geom, self.acq
        return {
            "n_elements": g.n_elements, "pitch": g.pitch, "c": a.c, "fs": a.fs, "fc": a.fc,
            "n_samples": a.n_samples, "relative_bandwidth": a.relative_bandwidth,
            "decimation": a.decimation, "R": self.R,
            "angles_deg": ",".join(repr(float(x)) for x in self.angles_deg),
            "snr_db": "none" if self.snr_db is None else repr(float(self.snr_db)),
            "seed": self.seed, "spreading": "1/sqrt(r)",
            "z_range": ",".join(repr(float(z)) for z in self.z_range),
        }


def _frame_scenes(spec: DatasetSpec, i: int, flow: Optional[TubeFlow]):
    rng = np.random.default_rng([spec.seed, i])
    if flow is not None:
        return flow.scene(i, spec.frame_dt, spec.region())
    lo, hi = spec.scatterers
    n = int(rng.integers(lo, hi + 1))
    return random_scene(rng, spec.region(), n, i)


def _render_frame(args):
    spec, i, scene = args
    rows = []
    for wave in spec.waves():
        noise_seed = [spec.seed, i, wave.index, 1]
        frame = simulate_rf(scene, spec.geom, wave, spec.acq, spec.snr_db,
                            seed=np.random.default_rng(noise_seed))
        label = make_label_map(scene, spec.geom, wave, spec.acq, spec.R)
        tips = project_tips(scene.positions, spec.geom, wave, spec.acq)
        rows.append((wave.index, frame.data.astype(np.float32), label.astype(np.float32), tips))
    return i, scene, rows


def generate_dataset(out_dir, spec: DatasetSpec, jobs: int = 1):
    """Write frames, labels, ``manifest.tsv`` and ``gt_points.csv`` under ``out_dir``.

    Output is byte-identical for a fixed ``spec`` regardless of ``jobs``.
    Returns the manifest rows.
    """
    if spec.n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    flow = None
    if spec.tubes:
        lo, hi = spec.scatterers
        rng = np.random.default_rng([spec.seed, 2 ** 31])
        flow = TubeFlow.random(rng, spec.region(), spec.tubes, int(rng.integers(lo, hi + 1)))
    tasks = [(spec, i, _frame_scenes(spec, i, flow)) for i in range(spec.n_frames)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_render_frame, tasks, chunksize=4))
    else:
        results = map(_render_frame, tasks)

    manifest, gt_rows = [], []
    for i, scene, rows in results:
        for w, data, label, tips in rows:
            rf_path = f"frames/frame_{i:05d}_w{w}.rtnsr"
            label_path = f"labels/label_{i:05d}_w{w}.rtnsr"
            save_tensor(out / rf_path, data)
            save_tensor(out / label_path, label)
            manifest.append((i, w, rf_path, label_path, len(scene), spec.seed))
            for (y, z), (ys, zs) in zip(scene.positions, tips):
                gt_rows.append((i, w, repr(float(y)), repr(float(z)), repr(float(ys)), repr(float(zs))))

    with open(out / "manifest.tsv", "w", newline="") as fh:
        for k, v in spec.metadata().items():
            fh.write(f"# {k}={v}\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in manifest:
            fh.write("\t".join(str(v) for v in row) + "\n")
    with open(out / "gt_points.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(GT_COLUMNS)
        wr.writerows(gt_rows)
    return manifest


@dataclass
class Dataset:
    """A dataset directory written by :func:`generate_dataset`."""

    root: Path
    meta: dict
    rows: list

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / "manifest.tsv"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.tsv in {root}")
        meta, rows, header = {}, [], None
        for line in path.read_text().splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif header is None:
                header = line.split("\t")
            elif line.strip():
                rec = dict(zip(header, line.split("\t")))
                for k in ("frame_id", "wave_index", "n_scatterers", "seed"):
                    rec[k] = int(rec[k])
                rows.append(rec)
        return cls(root, meta, rows)

    @property
    def geom(self):
        return ArrayGeometry(int(self.meta["n_elements"]), float(self.meta["pitch"]))

    @property
    def acq(self):
        m = self.meta
        return AcquisitionParams(float(m["c"]), float(m["fs"]), float(m["fc"]), int(m["n_samples"]),
                                 float(m["relative_bandwidth"]), int(m["decimation"]))

    @property
    def R(self):
        return int(self.meta["R"])

    @property
    def angles_deg(self):
        return tuple(float(a) for a in self.meta["angles_deg"].split(","))

    def waves(self):
        return [PlaneWave.from_degrees(a, self.geom, index=i) for i, a in enumerate(self.angles_deg)]

    def region(self):
        z = tuple(float(v) for v in self.meta.get("z_range", "0.001,0.015").split(","))
        return imaging_region(self.geom, self.acq, *z)

    @property
    def n_scenes(self):
        return len({r["frame_id"] for r in self.rows})

    def frame(self, i):
        return load_tensor(self.root / self.rows[i]["rf_path"])

    def label(self, i):
        return load_tensor(self.root / self.rows[i]["label_path"])

    def __len__(self):
        return len(self.rows)

    def ground_truth(self):
        """``{(frame_id, wave_index): N x 4 array of (y_m, z_m, y_star, z_star)}``."""
        out = {}
        with open(self.root / "gt_points.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                key = (int(rec["frame_id"]), int(rec["wave_index"]))
                out.setdefault(key, []).append(
                    [float(rec["y_m"]), float(rec["z_m"]), float(rec["y_star"]), float(rec["z_star"])])
        return {k: np.array(v) for k, v in out.items()}
