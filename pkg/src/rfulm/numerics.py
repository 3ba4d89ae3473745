"""Dense numeric kernels shared by the whole package.

Tensors are plain ``numpy.ndarray`` objects laid out channels-first
(``C x H x W``) or batched (``N x C x H x W``). Convolutions follow the
cross-correlation convention used in deep learning, i.e. kernels are not
flipped.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)


class DimensionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Raised by :func:`lm_solve`; ``params`` holds the best iterate found."""

    def __init__(self, message, params):
        super().__init__(message)
        self.params = params


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def im2col(x, k, stride=1, padding=0):
    """Unfold ``N x C x H x W`` into a ``(C*k*k) x (N*H'*W')`` matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def col2im(cols, shape, k, stride=1, padding=0):
    """Adjoint of :func:`im2col` (overlapping patches are summed)."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    Parameters
    ----------
    x : array, ``C x H x W`` or ``N x C x H x W``
    kernels : array, ``F x C x k x k``
    bias : optional array of length ``F``
    stride, padding : int
        Output extent is ``(H + 2*padding - k) // stride + 1``.

    Each output element is a single BLAS dot product over ``C*k*k`` terms,
    so results do not depend on how work is split across threads.
    """
    xb, squeeze = _as_batch(np.asarray(x))
    f, c, k, k2 = kernels.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if xb.shape[1] != c:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernels expect {c}")
    n = xb.shape[0]
    cols, ho, wo = im2col(xb, k, stride, padding)
    out = kernels.reshape(f, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(x, kernels, grad_out, padding=0, need_input_grad=True):
    """Gradients of a stride-1 :func:`conv2d` w.r.t. input, kernels and bias.

    Returns ``(grad_x, grad_kernels, grad_bias)``; ``grad_x`` is None when not
    requested (first layer).
    """
    xb, squeeze = _as_batch(np.asarray(x))
    gb, _ = _as_batch(np.asarray(grad_out))
    f, c, k, _ = kernels.shape
    g2 = gb.transpose(1, 0, 2, 3).reshape(f, -1)
    cols, _, _ = im2col(xb, k, 1, padding)
    grad_w = (g2 @ cols.T).reshape(kernels.shape)
    grad_b = g2.sum(axis=1)
    grad_x = None
    if need_input_grad:
        del cols
        gcols = kernels.reshape(f, -1).T @ g2
        grad_x = col2im(gcols, xb.shape, k, 1, padding)
        if squeeze:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# kernels and rearrangements
# --------------------------------------------------------------------------

def kernel_side(R):
    """Side length ``7 + R`` of the loss blur kernel, bumped to the next odd number."""
    side = 7 + int(R)
    return side if side % 2 else side + 1


def gaussian_kernel(sigma, side):
    """Unit-peak 2-D Gaussian: ``exp(-((r-m)^2 + (c-m)^2) / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if side < 1 or side % 2 == 0:
        raise ValueError(f"side must be a positive odd integer, got {side}")
    m = (side - 1) / 2
    r = np.arange(side) - m
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return np.outer(g, g)


def pixel_shuffle(x, R):
    """Rearrange ``(..., R*R, H, W)`` into ``(..., 1, R*H, R*W)``.

    ``out[r*R + dr, c*R + dc] = x[dr*R + dc, r, c]``.
    """
    x = np.asarray(x)
    if x.shape[-3] != R * R:
        raise DimensionError(f"channel count {x.shape[-3]} is not R^2 = {R * R}")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    L = len(lead)
    y = x.reshape(lead + (R, R, h, w))
    y = y.transpose(tuple(range(L)) + (L + 2, L, L + 3, L + 1))
    return y.reshape(lead + (1, h * R, w * R))


def pixel_unshuffle(y, R):
    """Inverse of :func:`pixel_shuffle`."""
    y = np.asarray(y)
    lead = y.shape[:-3]
    H, W = y.shape[-2:]
    if y.shape[-3] != 1 or H % R or W % R:
        raise DimensionError(f"cannot unshuffle shape {y.shape} with R={R}")
    h, w = H // R, W // R
    L = len(lead)
    z = y.reshape(lead + (h, R, w, R))
    z = z.transpose(tuple(range(L)) + (L + 1, L + 3, L, L + 2))
    return z.reshape(lead + (R * R, h, w))


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def _cubic(t, a=-0.75):
    t = np.abs(t)
    return np.where(
        t <= 1, ((a + 2) * t - (a + 3)) * t * t + 1,
        np.where(t < 2, ((a * t - 5 * a) * t + 8 * a) * t - 4 * a, 0.0))


def resample_matrix(n_in, n_out, mode="bilinear"):
    """``n_out x n_in`` matrix sampling at half-pixel-centred positions.

    Source coordinate of output ``i`` is ``(i + 0.5) * n_in / n_out - 0.5``
    (no antialiasing), borders are replicated.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError("empty extent")
    M = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    rows = np.arange(n_out)
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_out)) * (n_in / n_out)).astype(int), 0, n_in - 1)
        M[rows, idx] = 1.0
    elif mode == "bilinear":
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        np.add.at(M, (rows, i0), 1 - t)
        np.add.at(M, (rows, i1), t)
    elif mode == "bicubic":
        base = np.floor(src).astype(int)
        for off in range(-1, 3):
            idx = base + off
            wgt = _cubic(src - idx)
            np.add.at(M, (rows, np.clip(idx, 0, n_in - 1)), wgt)
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    return M


def resample2d(x, scale=None, size=None, mode="bilinear"):
    """Resample the last two axes of ``x``.

    Either ``scale`` (output extent ``round(extent * scale)``, at least 1) or
    an explicit ``size=(rows, cols)`` must be given.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.size == 0:
        raise DimensionError("cannot resample an empty tensor")
    h, w = x.shape[-2:]
    if size is None:
        if scale is None or not scale > 0:
            raise ValueError("scale must be positive")
        size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    My = resample_matrix(h, size[0], mode).astype(x.dtype, copy=False)
    Mx = resample_matrix(w, size[1], mode).astype(x.dtype, copy=False)
    return My @ x @ Mx.T


def resample2d_backward(grad_out, in_size, mode="bilinear"):
    """Transpose of the linear map applied by :func:`resample2d`."""
    H, W = grad_out.shape[-2:]
    My = resample_matrix(in_size[0], H, mode).astype(grad_out.dtype, copy=False)
    Mx = resample_matrix(in_size[1], W, mode).astype(grad_out.dtype, copy=False)
    return My.T @ grad_out @ Mx


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def svd(matrix):
    """Thin SVD with a deterministic sign convention.

    The largest-magnitude entry of every left singular vector is made positive
    (and the matching right vector flipped with it).
    """
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    pivot = np.argmax(np.abs(u), axis=0)
    sign = np.sign(u[pivot, np.arange(u.shape[1])])
    sign[sign == 0] = 1
    return u * sign, s, vt * sign[:, None]


def svd_truncate(matrix, drop_low=0, drop_high=0):
    """Zero the ``drop_low`` largest and ``drop_high`` smallest singular values."""
    a = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("matrix contains non-finite entries")
    r = min(a.shape)
    if drop_low < 0 or drop_high < 0 or drop_low + drop_high > r:
        raise ValueError(f"cannot drop {drop_low}+{drop_high} of {r} singular values")
    if drop_low == 0 and drop_high == 0:
        return a.copy()
    u, s, vt = svd(a)
    keep = slice(drop_low, r - drop_high)
    return (u[:, keep] * s[keep]) @ vt[keep]


def forward_difference_jacobian(fun, p, step=1e-7):
    p = np.asarray(p, dtype=float)
    r0 = np.asarray(fun(p), dtype=float)
    J = np.empty((r0.size, p.size))
    for j in range(p.size):
        h = step * max(1.0, abs(p[j]))
        q = p.copy()
        q[j] += h
        J[:, j] = (np.asarray(fun(q)) - r0) / h
    return J


def lm_solve(residual_fn: Callable, init, jacobian_fn: Optional[Callable] = None,
             max_iter: int = 100, tol: float = 1e-12, damping: float = 1e-3,
             history: Optional[list] = None):
    """Levenberg-Marquardt minimisation of ``||residual_fn(p)||^2``.

    The damped normal equations ``(J^T J + mu * diag(J^T J)) dp = -J^T r`` are
    solved each iteration. ``mu`` starts at ``damping``, is divided by 10 after
    an accepted step and multiplied by 10 after a rejected one. Iteration stops
    when the step norm drops below ``tol`` or after ``max_iter`` iterations.
    Without ``jacobian_fn`` a forward-difference Jacobian is used.

    ``history``, if given, receives the objective of every accepted iterate.
    """
    p = np.array(init, dtype=float)
    r = np.asarray(residual_fn(p), dtype=float)
    if r.size < p.size:
        raise ValueError("need at least as many residuals as parameters")
    cost = float(r @ r)
    if history is not None:
        history.append(cost)
    jac = jacobian_fn or (lambda q: forward_difference_jacobian(residual_fn, q))
    mu = damping
    for it in range(max_iter):
        J = np.asarray(jac(p), dtype=float)
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                if np.linalg.norm(step) < tol:
                    return p
                trial = p + step
                r_new = np.asarray(residual_fn(trial), dtype=float)
                c_new = float(r_new @ r_new)
                if np.isfinite(c_new) and c_new <= cost:
                    p, r, cost = trial, r_new, c_new
                    if history is not None:
                        history.append(cost)
                    mu = max(mu / 10.0, 1e-15)
                    break
            mu *= 10.0
            if mu > 1e10:
                raise ConvergenceError(
                    f"damping exceeded 1e10 at iteration {it}", p.copy())
    return p
