"""Spatio-temporal clutter rejection on stacks of channel-data frames."""

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .numerics import svd_truncate


@dataclass
class FrameStack:
    """``frames`` is ``T x ...`` (typically ``T x 2 x U x V``); ``dt`` in seconds."""

    frames: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim < 2 or self.frames.shape[0] < 2:
            raise ValueError("a frame stack needs at least two frames")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def T(self):
        return self.frames.shape[0]

    def casorati(self):
        """Space x time matrix (one column per frame)."""
        return self.frames.reshape(self.T, -1).T


def svd_clutter_filter(stack: FrameStack, drop_low=1, drop_high=0) -> FrameStack:
    """Remove the ``drop_low`` strongest (tissue) and ``drop_high`` weakest (noise) components."""
    if drop_low + drop_high >= stack.T:
        raise ValueError(f"cannot drop {drop_low}+{drop_high} components from {stack.T} frames")
    filtered = svd_truncate(stack.casorati(), drop_low, drop_high)
    return FrameStack(filtered.T.reshape(stack.frames.shape), stack.dt)


def bandpass_sos(f_lo, f_hi, dt, order=4):
    nyq = 0.5 / dt
    if not (0 <= f_lo < f_hi <= nyq):
        raise ValueError(f"band [{f_lo}, {f_hi}] Hz outside [0, {nyq}] Hz")
    fs = 1.0 / dt
    if f_lo == 0 and f_hi == nyq:
        return None
    if f_lo == 0:
        return sps.butter(order, f_hi, btype="lowpass", fs=fs, output="sos")
    if f_hi == nyq:
        return sps.butter(order, f_lo, btype="highpass", fs=fs, output="sos")
    return sps.butter(order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")


def temporal_bandpass(stack: FrameStack, f_lo=None, f_hi=None, order=4) -> FrameStack:
    """Zero-phase Butterworth band-pass along the time axis of every pixel.

    Defaults to ``[0.1, 0.9]`` of the Nyquist frequency. Filtering runs
    forward and backward so wavefront tips are not shifted in time.
    """
    nyq = 0.5 / stack.dt
    f_lo = 0.1 * nyq if f_lo is None else f_lo
    f_hi = 0.9 * nyq if f_hi is None else f_hi
    sos = bandpass_sos(f_lo, f_hi, stack.dt, order)
    if sos is None:
        return FrameStack(stack.frames.copy(), stack.dt)
    out = sps.sosfiltfilt(sos, stack.frames, axis=0)
    return FrameStack(out, stack.dt)
