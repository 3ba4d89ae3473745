"""Reference delay-and-sum beamformer for I/Q channel data."""

from dataclasses import dataclass

import numpy as np

from .geometry import AcquisitionParams, ArrayGeometry, PlaneWave


@dataclass(frozen=True)
class BModeGrid:
    """Regular pixel grid; rows run along depth ``z``, columns along ``y``."""

    y0: float
    z0: float
    dy: float
    dz: float
    cols: int
    rows: int

    def __post_init__(self):
        if not (self.dy > 0 and self.dz > 0):
            raise ValueError("grid spacings must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("empty grid")

    @classmethod
    def covering(cls, region, step_y, step_z=None):
        """Grid spanning ``(y_min, y_max, z_min, z_max)`` with the given spacing."""
        step_z = step_y if step_z is None else step_z
        y0, y1, z0, z1 = region
        cols = int(np.floor((y1 - y0) / step_y)) + 1
        rows = int(np.floor((z1 - z0) / step_z)) + 1
        return cls(y0, z0, step_y, step_z, cols, rows)

    @property
    def y(self):
        return self.y0 + self.dy * np.arange(self.cols)

    @property
    def z(self):
        return self.z0 + self.dz * np.arange(self.rows)

    def to_metres(self, rc):
        """``(row, col)`` pixel coordinates to ``(y, z)``."""
        rc = np.asarray(rc, dtype=float).reshape(-1, 2)
        return np.stack([self.y0 + rc[:, 1] * self.dy, self.z0 + rc[:, 0] * self.dz], axis=1)

    def to_pixels(self, yz):
        yz = np.asarray(yz, dtype=float).reshape(-1, 2)
        return np.stack([(yz[:, 1] - self.z0) / self.dz, (yz[:, 0] - self.y0) / self.dy], axis=1)


def das_beamform(frame, geom: ArrayGeometry, wave: PlaneWave, acq: AcquisitionParams,
                 grid: BModeGrid, f_number: float = 1.0) -> np.ndarray:
    """Delay-and-sum of a ``2 x K x V`` I/Q frame onto ``grid``.

    Every element whose lateral distance to the pixel is within
    ``z / (2 f_number)`` contributes its linearly interpolated I/Q sample at
    the round-trip delay, rotated by ``exp(+j 2 pi fc tau)``. Delays outside
    the recorded window contribute nothing. Returns ``2 x rows x cols``
    (real and imaginary planes).
    """
    data = np.asarray(frame.data if hasattr(frame, "data") else frame, dtype=float)
    iq = data[0] + 1j * data[1]
    K, V = iq.shape
    if K != geom.n_elements:
        raise ValueError(f"frame has {K} channels, geometry has {geom.n_elements}")
    Z, Y = np.meshgrid(grid.z, grid.y, indexing="ij")
    vs = wave.virtual_source
    tx = np.hypot(Y - vs[0], Z - vs[1]) - wave.offset
    out = np.zeros(Z.shape, dtype=complex)
    half_ap = Z / (2.0 * f_number) if f_number > 0 else np.full(Z.shape, np.inf)
    for k, (xk, _) in enumerate(geom.element_positions):
        dy = Y - xk
        use = np.abs(dy) <= half_ap
        if not use.any():
            continue
        tau = (tx[use] + np.hypot(dy[use], Z[use])) / acq.c
        s = tau * acq.fs_iq
        i0 = np.floor(s).astype(int)
        ok = (i0 >= 0) & (i0 + 1 < V)
        frac = s[ok] - i0[ok]
        row = iq[k]
        val = (1 - frac) * row[i0[ok]] + frac * row[i0[ok] + 1]
        contrib = np.zeros(tau.shape, dtype=complex)
        contrib[ok] = val * np.exp(2j * np.pi * acq.fc * tau[ok])
        out[use] += contrib
    return np.stack([out.real, out.imag])


def envelope_log(img, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Log-compressed envelope rescaled to ``[0, 1]`` (0 dB -> 1, -range -> 0)."""
    img = np.asarray(img, dtype=float)
    mag = np.hypot(img[0], img[1]) if img.ndim == 3 and img.shape[0] == 2 else np.abs(img)
    peak = mag.max(initial=0.0)
    if peak == 0:
        return np.zeros_like(mag)
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mag / peak)
    db = np.clip(db, -dynamic_range_db, 0.0)
    return (db + dynamic_range_db) / dynamic_range_db
