"""Semi-global sub-pixel convolutional network (SG-SPCN) in numpy.

Layer graph (all convolutions same-padded)::

    x ─ conv k_in ─ ReLU ─ a1 ──────────────────────────────┐
                           └ down ×1/G ─ conv k_sg ─ LReLU ─ conv k_sg ─ LReLU ─ up ×G ─(+)─ s
    s ─┬ conv k_mid ─ ReLU ─ conv k_mid ─(+)─ ... (n_mid/2 residual pairs) ─ h
       │                                                                     │
       └──────────────────────────── conv k_out ─(+)─────────────────────────┘
                                                  └ conv k_out (R^2 filters) ─ pixel shuffle ─ y

With the default in-silico configuration (F=64, R=8, G=16) this has
exactly 658496 parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import correlate1d

from .numerics import (conv2d, conv2d_backward, gaussian_kernel, kernel_side, pixel_shuffle,
                       pixel_unshuffle, resample2d, resample2d_backward)

IN_SILICO_PARAMS = 658496


@dataclass(frozen=True)
class SgSpcnConfig:
    in_channels: int = 2
    features: int = 64
    R: int = 8
    G: int = 16
    k_in: int = 9
    k_sg: int = 5
    k_mid: int = 3
    k_out: int = 3
    n_mid_layers: int = 10
    leaky_slope: float = 0.01
    resample_mode: str = "bilinear"

    def __post_init__(self):
        for k in (self.k_in, self.k_sg, self.k_mid, self.k_out):
            if k < 1 or k % 2 == 0:
                raise ValueError("kernel sizes must be odd")
        if self.R < 1 or self.G < 1:
            raise ValueError("R and G must be >= 1")
        if self.n_mid_layers % 2:
            raise ValueError("mid layers come in residual pairs")

    @property
    def S(self) -> int:
        """Bottleneck width multiplier ``max(1, G // 10)``."""
        return max(1, self.G // 10)

    @property
    def sg_features(self) -> int:
        return self.features * self.S

    def layer_shapes(self):
        F, C = self.features, self.in_channels
        shapes = {"conv1": (F, C, self.k_in, self.k_in),
                  "sg_down": (self.sg_features, F, self.k_sg, self.k_sg),
                  "sg_up": (F, self.sg_features, self.k_sg, self.k_sg)}
        for i in range(self.n_mid_layers):
            shapes[f"mid{i}"] = (F, F, self.k_mid, self.k_mid)
        shapes["tail"] = (F, F, self.k_out, self.k_out)
        shapes["head"] = (self.R ** 2, F, self.k_out, self.k_out)
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) + s[0] for s in self.layer_shapes().values())

    def to_dict(self):
        return asdict(self)


IN_SILICO = SgSpcnConfig()


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


class SgSpcn:
    """Parameters live in ``self.params`` as ``{"<layer>.w": ..., "<layer>.b": ...}``."""

    def __init__(self, config: SgSpcnConfig = IN_SILICO, seed=0, dtype=np.float32, init="he"):
        self.config = config
        if config == IN_SILICO and config.n_params != IN_SILICO_PARAMS:
            raise AssertionError(f"in-silico config has {config.n_params} parameters")
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in config.layer_shapes().items():
            fan_in = shape[1] * shape[2] * shape[3]
            if init == "zeros":
                w = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=shape)
            self.params[name + ".w"] = w.astype(dtype)
            self.params[name + ".b"] = np.zeros(shape[0], dtype=dtype)
        self._cache = None

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    def astype(self, dtype):
        other = SgSpcn.__new__(SgSpcn)
        other.config = self.config
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other._cache = None
        return other

    def copy(self):
        return self.astype(self.dtype)

    # ------------------------------------------------------------------
    def _conv(self, name, x):
        w = self.params[name + ".w"]
        return conv2d(x, w, self.params[name + ".b"], padding=w.shape[-1] // 2)

    def forward(self, x, keep_cache=False):
        """Map ``C x H x W`` (or ``N x C x H x W``) to ``RH x RW`` (or ``N x RH x RW``)."""
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {xb.shape[1]}")
        H, W = xb.shape[-2:]
        if H < cfg.G or W < cfg.G:
            raise ValueError(f"input {H}x{W} smaller than the semi-global scale {cfg.G}")
        slope = cfg.leaky_slope
        c = {"x": xb}
        z1 = self._conv("conv1", xb)
        a1 = np.maximum(z1, 0)
        small = (max(1, round(H / cfg.G)), max(1, round(W / cfg.G)))
        d = resample2d(a1, size=small, mode=cfg.resample_mode)
        z2 = self._conv("sg_down", d)
        a2 = np.where(z2 > 0, z2, slope * z2)
        z3 = self._conv("sg_up", a2)
        a3 = np.where(z3 > 0, z3, slope * z3)
        s = a1 + resample2d(a3, size=(H, W), mode=cfg.resample_mode)
        c.update(z1=z1, a1=a1, d=d, z2=z2, a2=a2, z3=z3, s=s, small=small)
        h = s
        for i in range(0, cfg.n_mid_layers, 2):
            za = self._conv(f"mid{i}", h)
            aa = np.maximum(za, 0)
            c[f"h{i}"], c[f"za{i}"], c[f"aa{i}"] = h, za, aa
            h = self._conv(f"mid{i + 1}", aa) + h
        t = self._conv("tail", h) + s
        c["h"], c["t"] = h, t
        y = pixel_shuffle(self._conv("head", t), cfg.R)[:, 0]
        self._cache = c if keep_cache else None
        return y[0] if single else y

    __call__ = forward

    def backward(self, grad_out):
        """Parameter gradients for the last ``forward(..., keep_cache=True)`` call.

        Returns ``(grads, grad_input)`` where ``grads`` mirrors ``self.params``.
        """
        c = self._cache
        if c is None:
            raise RuntimeError("backward() needs a preceding forward(keep_cache=True)")
        cfg = self.config
        P = self.params
        g = {}
        gy = np.asarray(grad_out, dtype=self.dtype)
        if gy.ndim == 2:
            gy = gy[None]
        go = pixel_unshuffle(gy[:, None], cfg.R)

        def conv_back(name, inp, gout, need_input=True):
            w = P[name + ".w"]
            gx, gw, gb = conv2d_backward(inp, w, gout, padding=w.shape[-1] // 2,
                                         need_input_grad=need_input)
            g[name + ".w"], g[name + ".b"] = gw, gb
            return gx

        gt = conv_back("head", c["t"], go)
        gs = gt.copy()
        gh = conv_back("tail", c["h"], gt)
        for i in reversed(range(0, cfg.n_mid_layers, 2)):
            gaa = conv_back(f"mid{i + 1}", c[f"aa{i}"], gh)
            gza = gaa * _relu_grad(c[f"za{i}"])
            gh = gh + conv_back(f"mid{i}", c[f"h{i}"], gza)
        gs += gh
        H, W = c["a1"].shape[-2:]
        slope = cfg.leaky_slope
        ga3 = resample2d_backward(gs, c["small"], cfg.resample_mode)
        gz3 = ga3 * np.where(c["z3"] > 0, 1, slope).astype(self.dtype)
        ga2 = conv_back("sg_up", c["a2"], gz3)
        gz2 = ga2 * np.where(c["z2"] > 0, 1, slope).astype(self.dtype)
        gd = conv_back("sg_down", c["d"], gz2)
        ga1 = gs + resample2d_backward(gd, (H, W), cfg.resample_mode)
        gz1 = ga1 * _relu_grad(c["z1"])
        gx = conv_back("conv1", c["x"], gz1)
        return g, gx


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

LAMBDA0_PEAK = 120.0


def blur_label(label, sigma, R):
    """``G_sigma (*) Y`` with the unit-peak ``(7+R)``-sided kernel, zero padded."""
    side = kernel_side(R)
    g1 = gaussian_kernel(sigma, side)[side // 2]
    out = correlate1d(np.asarray(label, dtype=float), g1, axis=-1, mode="constant")
    return correlate1d(out, g1, axis=-2, mode="constant")


def lambda0_for(blurred):
    """``(max(G * Y) / 120)^-1``; an empty label falls back to 120."""
    peak = float(np.max(blurred)) if blurred.size else 0.0
    return LAMBDA0_PEAK if peak <= 0 else LAMBDA0_PEAK / peak


def target_map(label, sigma, R):
    blurred = blur_label(label, sigma, R)
    return lambda0_for(blurred) * blurred


def loss(pred, label=None, sigma=1.0, R=8, lambda1=1e-2, target=None):
    """``||pred - lambda0 (G * Y)||^2 + lambda1 ||pred||_1`` and its gradient.

    Works on one map or a batch (leading axis); for a batch the loss and
    gradient are averaged over the batch.
    """
    pred = np.asarray(pred)
    if target is None:
        label = np.asarray(label)
        if label.shape != pred.shape:
            raise ValueError(f"prediction {pred.shape} and label {label.shape} differ")
        if pred.ndim == 3:
            target = np.stack([target_map(l, sigma, R) for l in label])
        else:
            target = target_map(label, sigma, R)
    target = np.asarray(target, dtype=pred.dtype)
    diff = pred - target
    n = pred.shape[0] if pred.ndim == 3 else 1
    value = (float(np.sum(diff.astype(float) ** 2)) +
             lambda1 * float(np.sum(np.abs(pred.astype(float))))) / n
    grad = (2 * diff + lambda1 * np.sign(pred)) / n
    return value, grad.astype(pred.dtype)


def anneal_sigma(epoch: int, total: int, start=3.5, end=1.0) -> float:
    """Quadratic ease-out from ``start`` (first epoch) to ``end`` (last epoch)."""
    if total < 2:
        return float(end)
    frac = 1.0 - min(max(epoch, 0), total - 1) / (total - 1)
    return float(end + (start - end) * frac ** 2)


def sigma_schedule(epoch: int, total: int, R: int, start=3.5, end=1.0) -> float:
    """Kernel width for ``epoch``: annealed when ``R > 10``, else constant ``end``."""
    if R <= 10:
        return float(end)
    return anneal_sigma(epoch, total, start, end)


def cosine_lr(step, total, lr0):
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0
        self.skipped = 0

    def step(self, params, grads, lr, weight_decay=0.0):
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay:
                upd = upd + weight_decay * p
            p -= (lr * upd).astype(p.dtype)
        return True
