"""Transducer and plane-wave geometry, channel/B-mode point mapping.

Coordinates in B-mode space are ``(y, z)`` = (lateral, axial) in metres with
the array on ``z = 0`` centred at ``y = 0``. In channel space a point is
``(y*, z*)`` with ``y*`` in element-index units and ``z*`` in samples of the
I/Q frame.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .numerics import lm_solve, ConvergenceError


class GeometryError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    n_elements: int = 128
    pitch: float = 1e-4

    def __post_init__(self):
        if self.n_elements < 2:
            raise GeometryError("need at least two elements")
        if not self.pitch > 0:
            raise GeometryError("pitch must be positive")

    @property
    def element_positions(self) -> np.ndarray:
        """``K x 2`` array of ``(y, z)``; elements sit on ``z = 0``."""
        y = (np.arange(self.n_elements) - (self.n_elements - 1) / 2) * self.pitch
        return np.stack([y, np.zeros_like(y)], axis=1)

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch

    def element_to_lateral(self, index):
        return (np.asarray(index, dtype=float) - (self.n_elements - 1) / 2) * self.pitch


@dataclass(frozen=True)
class AcquisitionParams:
    """Acquisition constants.

    ``fs`` is the RF sampling rate; I/Q frames are decimated by ``decimation``
    so channel-space sample units refer to ``fs_iq = fs / decimation``.
    """

    c: float = 1540.0
    fs: float = 62.5e6
    fc: float = 15.625e6
    n_samples: int = 256
    relative_bandwidth: float = 0.67
    decimation: int = 5

    def __post_init__(self):
        for name in ("c", "fs", "fc", "relative_bandwidth"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be positive")
        if self.n_samples < 1 or self.decimation < 1:
            raise GeometryError("n_samples and decimation must be >= 1")

    @property
    def wavelength(self) -> float:
        return self.c / self.fc

    @property
    def fs_iq(self) -> float:
        return self.fs / self.decimation

    @property
    def n_rf_samples(self) -> int:
        return self.n_samples * self.decimation


@dataclass(frozen=True)
class PlaneWave:
    """Steered plane wave modelled by a distant virtual source.

    The source sits ``standoff`` metres behind the array centre along the
    steering direction ``(sin a, cos a)`` and ``offset`` equals that standoff,
    so ``|p - v_s| - offset`` tends to ``y sin a + z cos a``.
    """

    angle: float
    virtual_source: tuple
    offset: float
    index: int = 0

    @classmethod
    def from_angle(cls, angle, geom: ArrayGeometry, index=0, standoff_factor=100.0):
        d = standoff_factor * geom.aperture
        vs = (-d * math.sin(angle), -d * math.cos(angle))
        return cls(angle=float(angle), virtual_source=vs, offset=d, index=index)

    @classmethod
    def from_degrees(cls, degrees, geom: ArrayGeometry, index=0):
        return cls.from_angle(math.radians(degrees), geom, index=index)


def default_waves(geom: ArrayGeometry, degrees=(-5.0, 0.0, 5.0)):
    return [PlaneWave.from_degrees(d, geom, index=i) for i, d in enumerate(degrees)]


class Space(str, enum.Enum):
    BMODE = "bmode"
    CHANNEL = "channel"


@dataclass
class PointSet:
    """Sub-pixel localisations ``(y, z)`` with optional per-point metadata."""

    points: np.ndarray
    space: Space = Space.BMODE
    confidence: Optional[np.ndarray] = None
    wave_index: Optional[np.ndarray] = None
    frame_id: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.space = Space(self.space)
        n = len(self.points)
        for name in ("confidence", "wave_index", "frame_id"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v), (n,)).copy()
                setattr(self, name, v)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        def pick(v):
            return None if v is None else v[mask]
        return PointSet(self.points[mask], self.space, pick(self.confidence),
                        pick(self.wave_index), pick(self.frame_id))

    @classmethod
    def empty(cls, space=Space.BMODE):
        return cls(np.zeros((0, 2)), space, np.zeros(0), np.zeros(0, int), np.zeros(0, int))

    @staticmethod
    def concat(sets, space=None):
        sets = list(sets)
        if not sets:
            return PointSet.empty(space or Space.BMODE)
        space = space or sets[0].space
        if any(s.space != space for s in sets):
            raise ValueError("cannot mix coordinate spaces")

        def cat(name, fill):
            if all(getattr(s, name) is None for s in sets):
                return None
            return np.concatenate([
                getattr(s, name) if getattr(s, name) is not None else np.full(len(s), fill)
                for s in sets])
        return PointSet(np.concatenate([s.points for s in sets]), space,
                        cat("confidence", 1.0), cat("wave_index", -1), cat("frame_id", -1))


# --------------------------------------------------------------------------
# forward projection
# --------------------------------------------------------------------------

def project_to_channels(p, geom: ArrayGeometry, wave: PlaneWave, acq: AcquisitionParams,
                        fs: Optional[float] = None) -> np.ndarray:
    """Per-element arrival sample of the echo from B-mode point(s) ``p``.

    ``depth_k = fs / c * (|p - v_s| + |p - x_k| - s)``. ``fs`` defaults to
    the I/Q rate. ``p`` may be a single ``(y, z)`` or an ``N x 2`` array;
    the result has shape ``K`` or ``N x K`` accordingly.
    """
    fs = acq.fs_iq if fs is None else fs
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    if np.any(pts[:, 1] <= 0):
        raise GeometryError("points must lie in front of the array (z > 0)")
    vs = np.asarray(wave.virtual_source)
    tx = np.hypot(pts[:, 0] - vs[0], pts[:, 1] - vs[1]) - wave.offset
    el = geom.element_positions
    rx = np.hypot(pts[:, 0, None] - el[None, :, 0], pts[:, 1, None])
    depth = fs / acq.c * (tx[:, None] + rx)
    if np.any(depth < 0):
        raise GeometryError("negative arrival time, travel offset too large")
    return depth[0] if single else depth


def wavefront_tip(projections, geom: Optional[ArrayGeometry] = None, refine: bool = True):
    """Apex of the echo hyperbola from per-element arrival samples.

    The apex element is the one with the earliest arrival (lower index on
    ties). With ``refine`` the apex is moved to the vertex of the parabola
    through that element and its two neighbours, giving a sub-element
    ``y*`` and ``z* <= min_k depth_k``; boundary minima are not refined.

    Returns ``(y*, z*)`` as floats, or an ``N x 2`` array for ``N x K`` input.
    """
    d = np.asarray(projections, dtype=float)
    single = d.ndim == 1
    d = d.reshape(-1, d.shape[-1])
    if geom is not None and d.shape[1] != geom.n_elements:
        raise GeometryError("projection count does not match the array")
    rows = np.arange(len(d))
    k = np.argmin(d, axis=1)  # first occurrence == lower index on ties
    y = k.astype(float)
    z = d[rows, k].copy()
    if refine:
        inner = (k > 0) & (k < d.shape[1] - 1)
        ki = k[inner]
        ri = rows[inner]
        dm, d0, dp = d[ri, ki - 1], d[ri, ki], d[ri, ki + 1]
        curv = dm - 2 * d0 + dp
        ok = curv > 0
        delta = np.zeros_like(d0)
        delta[ok] = 0.5 * (dm[ok] - dp[ok]) / curv[ok]
        y[inner] = ki + delta
        z[inner] = d0 - 0.25 * (dm - dp) * delta
    out = np.stack([y, z], axis=1)
    return (float(out[0, 0]), float(out[0, 1])) if single else out


def project_tips(points, geom, wave, acq, refine=True):
    """B-mode points (``N x 2``) to channel-space tips (``N x 2``)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2))
    return wavefront_tip(project_to_channels(pts, geom, wave, acq), geom, refine=refine)


# --------------------------------------------------------------------------
# affine inverse
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    matrix: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    wave_index: int = 0
    residual: float = float("nan")

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(2, 3)
        object.__setattr__(self, "matrix", m)
        if not abs(np.linalg.det(m[:, :2])) > 1e-12:
            raise GeometryError("singular affine scaling block")

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def save(self, path):
        m = self.matrix
        lines = [repr(float(v)) for v in (m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])]
        lines += [str(int(self.wave_index)), repr(float(self.residual))]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        tok = Path(path).read_text().split()
        if len(tok) < 7:
            raise ValueError(f"{path}: expected 6 coefficients and a wave index")
        coef = [float(t) for t in tok[:6]]
        residual = float(tok[7]) if len(tok) > 7 else float("nan")
        return cls(np.array(coef).reshape(2, 3), int(float(tok[6])), residual)


def default_region(geom: ArrayGeometry, depth=(1e-3, 15e-3)):
    """``(y_min, y_max, z_min, z_max)`` spanning the array laterally."""
    half = geom.aperture / 2
    return (-half, half, depth[0], depth[1])


def sample_region(n, region, rng):
    y0, y1, z0, z1 = region
    return np.stack([rng.uniform(y0, y1, n), rng.uniform(z0, z1, n)], axis=1)


def fit_affine(geom, wave, acq, n=1000, seed=0, region=None,
               tip_fn: Optional[Callable] = None) -> AffineMap:
    """Least-squares affine map from channel-space tips back to B-mode.

    ``n`` random B-mode points are drawn uniformly in ``region``, projected to
    their wavefront tips (or through ``tip_fn`` if given) and the six
    coefficients are found with Levenberg-Marquardt. The mean Euclidean
    residual in metres is stored on the returned map.
    """
    if n < 7:
        raise ValueError("need more than six calibration points")
    rng = np.random.default_rng(seed)
    region = region or default_region(geom)
    p = sample_region(n, region, rng)
    tips = tip_fn(p) if tip_fn is not None else project_tips(p, geom, wave, acq)
    tips = np.asarray(tips, dtype=float)

    # normalise coordinates so the six unknowns are O(1)
    t_mu, t_sd = tips.mean(0), tips.std(0) + 1e-300
    p_mu, p_sd = p.mean(0), p.std(0) + 1e-300
    tn = (tips - t_mu) / t_sd
    pn = (p - p_mu) / p_sd
    H = np.column_stack([tn, np.ones(n)])
    jac = np.zeros((2 * n, 6))
    jac[:n, :3] = H
    jac[n:, 3:] = H

    def residual(a):
        return np.concatenate([H @ a[:3] - pn[:, 0], H @ a[3:] - pn[:, 1]])

    try:
        a = lm_solve(residual, np.array([1.0, 0, 0, 0, 1.0, 0]), lambda a: jac,
                     max_iter=50, tol=1e-14)
    except ConvergenceError as exc:
        raise CalibrationError(str(exc)) from exc
    An = a.reshape(2, 3)
    # undo normalisation: p = P_sd * (An[:, :2] @ (t - t_mu)/t_sd + An[:, 2]) + p_mu
    lin = (p_sd[:, None] * An[:, :2]) / t_sd[None, :]
    trans = p_sd * An[:, 2] + p_mu - lin @ t_mu
    M = np.column_stack([lin, trans])
    amap = AffineMap(M, wave.index)
    res = float(np.mean(np.linalg.norm(amap(tips) - p, axis=1)))
    return AffineMap(M, wave.index, res)


def reprojection_error(amap: AffineMap, geom, wave, acq, n=1000, seed=1, region=None):
    """Mean distance (m) between fresh B-mode points and their mapped tips."""
    rng = np.random.default_rng(seed)
    p = sample_region(n, region or default_region(geom), rng)
    tips = project_tips(p, geom, wave, acq)
    return float(np.mean(np.linalg.norm(amap(tips) - p, axis=1)))


def apply_affine(amap: AffineMap, pts: PointSet) -> PointSet:
    if pts.space != Space.CHANNEL:
        raise ValueError("apply_affine expects channel-space points")
    return PointSet(amap(pts.points), Space.BMODE, pts.confidence, pts.wave_index, pts.frame_id)


# --------------------------------------------------------------------------
# semi-global scale
# --------------------------------------------------------------------------

def estimate_semiglobal_scale(width_samples: int, k1: int) -> int:
    """Bottleneck factor giving a ``k1`` kernel a receptive field of ``width_samples``."""
    if not (width_samples >= k1 > 1):
        raise ValueError("need width_samples >= k1 > 1")
    return int(round((width_samples - 1) / (k1 - 1)))


def measure_wavefront_width(profile, threshold=0.5) -> int:
    """Number of contiguous samples around the peak with ``|v| >= threshold * peak``."""
    v = np.abs(np.asarray(profile, dtype=float).ravel())
    if v.size == 0 or np.all(v == v[0]):
        raise ValueError("flat profile, width undefined")
    i = int(np.argmax(v))
    level = threshold * v[i]
    lo = i
    while lo > 0 and v[lo - 1] >= level:
        lo -= 1
    hi = i
    while hi < v.size - 1 and v[hi + 1] >= level:
        hi += 1
    return hi - lo + 1
