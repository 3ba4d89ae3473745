"""Augmentation, training loop, checkpoints and inference for SG-SPCN."""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .geometry import PointSet, Space
from .localize import default_window, nms_extract, rescale_points, roc_threshold
from .network import Adam, SgSpcn, SgSpcnConfig, anneal_sigma, cosine_lr, loss, target_map
from .simulator import add_clutter_noise, normalize
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: Optional[int] = 128
    p_flip: float = 0.5
    p_rot: float = 0.25
    max_rot_deg: float = 5.0
    p_blur: float = 0.1
    blur_sigma: tuple = (0.5, 1.0)
    snr_db: Optional[float] = 50.0

    @classmethod
    def off(cls):
        return cls(crop=None, p_flip=0.0, p_rot=0.0, p_blur=0.0, snr_db=None)


def label_to_points(label):
    """Integer (row, col) of the ones in a binary label map."""
    return np.argwhere(np.asarray(label) > 0)


def points_to_label(pts, shape):
    label = np.zeros(shape, dtype=np.float32)
    pts = np.asarray(pts, dtype=int).reshape(-1, 2)
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < shape[0]) & (pts[:, 1] >= 0) & (pts[:, 1] < shape[1])
    label[pts[ok, 0], pts[ok, 1]] = 1.0
    return label


def crop(frame, pts, R, top, left, size):
    """Square crop of ``frame`` with the label points shifted to match."""
    out = frame[:, top:top + size, left:left + size]
    p = np.asarray(pts, dtype=int).reshape(-1, 2) - [R * top, R * left]
    keep = np.all((p >= 0) & (p < R * size), axis=1)
    return out, p[keep]


def flip_lateral(frame, pts, R):
    """Reverse the channel axis. Label pixel ``m`` maps to ``R (U - 1) - m``."""
    U = frame.shape[1]
    p = np.asarray(pts, dtype=int).reshape(-1, 2).copy()
    p[:, 0] = R * (U - 1) - p[:, 0]
    return frame[:, ::-1, :].copy(), p[p[:, 0] >= 0]


def rotate(frame, pts, R, degrees):
    """Bilinear rotation of the frame about its centre; label points re-rounded."""
    H, W = frame.shape[1:]
    t = math.radians(degrees)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    c = np.array([(H - 1) / 2, (W - 1) / 2])
    offset = c - rot @ c
    out = np.stack([affine_transform(plane, rot, offset, order=1, mode="constant")
                    for plane in frame])
    q = np.asarray(pts, dtype=float).reshape(-1, 2) / R
    o = (q - c) @ rot + c  # inverse of the sampling map: rot^T (q - c) + c
    p = np.rint(R * o).astype(int)
    keep = np.all((p >= 0) & (p < [R * H, R * W]), axis=1)
    return out, p[keep]


def augment_points(frame, pts, R, rng, cfg: AugmentConfig = AugmentConfig()):
    """Random training transform of ``frame`` (2 x U x V) and its label points."""
    frame = np.asarray(frame)
    dtype = frame.dtype
    if cfg.crop is not None:
        H, W = frame.shape[1:]
        if H < cfg.crop or W < cfg.crop:
            raise ValueError(f"frame {H}x{W} smaller than crop {cfg.crop}")
        top = int(rng.integers(0, H - cfg.crop + 1))
        left = int(rng.integers(0, W - cfg.crop + 1))
        frame, pts = crop(frame, pts, R, top, left, cfg.crop)
    if rng.random() < cfg.p_flip:
        frame, pts = flip_lateral(frame, pts, R)
    if rng.random() < cfg.p_rot:
        frame, pts = rotate(frame, pts, R, rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg))
    changed = False
    if rng.random() < cfg.p_blur:
        s = rng.uniform(*cfg.blur_sigma)
        frame = np.stack([gaussian_filter(p.astype(float), s) for p in frame])
        changed = True
    if cfg.snr_db is not None:
        frame = add_clutter_noise(frame, cfg.snr_db, rng)
        changed = True
    if changed:
        frame = normalize(frame)[0]
    return np.ascontiguousarray(frame, dtype=dtype), pts


def augment(frame, label, seed, R, cfg: AugmentConfig = AugmentConfig()):
    """Map-in, map-out wrapper around :func:`augment_points`."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out, pts = augment_points(frame, label_to_points(label), R, rng, cfg)
    return out, points_to_label(pts, (R * out.shape[1], R * out.shape[2]))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "rfulm-checkpoint 1"
_INT_FIELDS = {"in_channels", "features", "R", "G", "k_in", "k_sg", "k_mid", "k_out", "n_mid_layers"}


def save_checkpoint(path, net: SgSpcn, epoch=-1, threshold=None, adam: Optional[Adam] = None,
                    history=None, best_val=None):
    """Directory with ``header.txt`` and one RTNSR1 file per tensor."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    lines = [CHECKPOINT_FORMAT]
    for k, v in net.config.to_dict().items():
        lines.append(f"config.{k} {v}")
    lines.append(f"epoch {epoch}")
    lines.append(f"threshold {'none' if threshold is None else repr(float(threshold))}")
    lines.append(f"best_val {'none' if best_val is None else repr(float(best_val))}")
    for name, p in net.params.items():
        lines.append(f"param {name} {p.dtype.str} " + " ".join(str(s) for s in p.shape))
        save_tensor(tmp / "params" / f"{name}.rtnsr", p)
    if adam is not None:
        (tmp / "adam").mkdir()
        lines.append(f"adam_t {adam.t}")
        lines.append(f"adam_skipped {adam.skipped}")
        for name in adam.m:
            save_tensor(tmp / "adam" / f"m.{name}.rtnsr", adam.m[name])
            save_tensor(tmp / "adam" / f"v.{name}.rtnsr", adam.v[name])
    (tmp / "header.txt").write_text("\n".join(lines) + "\n")
    if history is not None:
        write_metrics(tmp / "metrics.tsv", history)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


@dataclass
class Checkpoint:
    net: SgSpcn
    epoch: int
    threshold: Optional[float]
    best_val: Optional[float]
    adam: Optional[Adam]
    history: list


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    header = path / "header.txt"
    if not header.is_file():
        raise CheckpointError(f"{path} is not a checkpoint (no header.txt)")
    lines = header.read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{header}: unknown format {lines[:1]}")
    cfg, shapes, info = {}, {}, {}
    for ln, line in enumerate(lines[1:], start=2):
        key, _, rest = line.partition(" ")
        if key.startswith("config."):
            name = key[len("config."):]
            cfg[name] = int(rest) if name in _INT_FIELDS else (
                float(rest) if name == "leaky_slope" else rest)
        elif key == "param":
            name, _dtype, *shape = rest.split(" ")
            shapes[name] = tuple(int(s) for s in shape)
        elif key:
            info[key] = rest
    try:
        config = SgSpcnConfig(**cfg)
    except TypeError as exc:
        raise CheckpointError(f"{header}: bad config ({exc})") from None
    net = SgSpcn(config, init="zeros")
    for name, shape in shapes.items():
        if name not in net.params:
            raise CheckpointError(f"{header}: unexpected parameter {name}")
        arr = load_tensor(path / "params" / f"{name}.rtnsr")
        if arr.shape != shape or shape != net.params[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match {shape}")
        net.params[name] = arr
    if set(shapes) != set(net.params):
        raise CheckpointError(f"{header}: missing parameters {sorted(set(net.params) - set(shapes))}")
    adam = None
    if "adam_t" in info:
        adam = Adam()
        adam.t = int(info["adam_t"])
        adam.skipped = int(info.get("adam_skipped", 0))
        for name in shapes:
            m = path / "adam" / f"m.{name}.rtnsr"
            if m.exists():
                adam.m[name] = load_tensor(m)
                adam.v[name] = load_tensor(path / "adam" / f"v.{name}.rtnsr")

    def opt(v):
        return None if v in (None, "none") else float(v)

    hist = read_metrics(path / "metrics.tsv") if (path / "metrics.tsv").exists() else []
    return Checkpoint(net, int(info.get("epoch", -1)), opt(info.get("threshold")),
                      opt(info.get("best_val")), adam, hist)


METRIC_COLUMNS = ("epoch", "lr", "sigma", "train_loss", "val_loss")


def write_metrics(path, history):
    with open(path, "w") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for row in history:
            fh.write("\t".join(repr(row[c]) if c != "epoch" else str(row[c])
                               for c in METRIC_COLUMNS) + "\n")


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        row = {c: float(v) for c, v in zip(METRIC_COLUMNS, vals)}
        row["epoch"] = int(row["epoch"])
        out.append(row)
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-8
    lambda1: float = 1e-2
    sigma_start: float = 3.5
    sigma_end: float = 1.0
    anneal: Optional[bool] = None  # None: anneal exactly when R > 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    eval_batch: int = 4
    roc_tolerance: Optional[float] = None  # heatmap px; default R / 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        for name in ("batch_size", "lr", "sigma_start", "sigma_end", "eval_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda1 < 0:
            raise ValueError("weight_decay and lambda1 must be non-negative")
        if self.sigma_end > self.sigma_start:
            raise ValueError("sigma_end must not exceed sigma_start")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def sigma(self, epoch, R):
        anneal = R > 10 if self.anneal is None else self.anneal
        if not anneal:
            return self.sigma_end
        return anneal_sigma(epoch, self.epochs, self.sigma_start, self.sigma_end)


@dataclass
class Sample:
    frame: np.ndarray  # 2 x U x V
    pts: np.ndarray    # label points at scale R, integer (row, col)
    frame_id: int = 0
    wave_index: int = 0


def samples_from(data, R=None) -> list:
    """Load a :class:`Dataset` (or pass through a list of samples) into memory."""
    if isinstance(data, (list, tuple)):
        return [s if isinstance(s, Sample) else Sample(np.asarray(s[0]), label_to_points(s[1]))
                for s in data]
    out = []
    for i, row in enumerate(data.rows):
        out.append(Sample(data.frame(i), label_to_points(data.label(i)),
                          row["frame_id"], row["wave_index"]))
    return out


def split_samples(samples, val_fraction, seed):
    """Split by scene (frame_id) so waves of one scene never straddle the split."""
    ids = np.unique([s.frame_id for s in samples])
    if val_fraction == 0 or len(ids) < 2:
        return list(samples), []
    perm = np.random.default_rng([seed, 7919]).permutation(ids)
    n_val = max(1, int(round(val_fraction * len(ids))))
    val_ids = set(perm[:n_val].tolist())
    train = [s for s in samples if s.frame_id not in val_ids]
    val = [s for s in samples if s.frame_id in val_ids]
    return train, val


def _targets(pts_list, shape, sigma, R):
    return np.stack([target_map(points_to_label(p, shape), sigma, R) for p in pts_list])


def evaluate_loss(net, samples, sigma, cfg: TrainConfig):
    R = net.config.R
    total = 0.0
    for i in range(0, len(samples), cfg.eval_batch):
        chunk = samples[i:i + cfg.eval_batch]
        x = np.stack([s.frame for s in chunk]).astype(net.dtype)
        pred = net.forward(x)
        tgt = _targets([s.pts for s in chunk], pred.shape[1:], sigma, R)
        value, _ = loss(pred, sigma=sigma, R=R, lambda1=cfg.lambda1, target=tgt)
        total += value * len(chunk)
    return total / len(samples)


def predict(net, samples, batch=4):
    out = []
    for i in range(0, len(samples), batch):
        x = np.stack([s.frame for s in samples[i:i + batch]]).astype(net.dtype)
        out.extend(net.forward(x))
    return out


def calibrate_threshold(net, samples, tolerance=None, window=None):
    """ROC geometric-mean threshold on held-out samples (``None`` without positives)."""
    R = net.config.R
    if not samples or sum(len(s.pts) for s in samples) == 0:
        return None
    heat = predict(net, samples)
    return roc_threshold(heat, [s.pts for s in samples],
                         tolerance if tolerance is not None else R / 2,
                         window or default_window(R))


@dataclass
class TrainResult:
    net: SgSpcn
    history: list
    threshold: Optional[float]
    best_val: Optional[float]
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def train(net: SgSpcn, data, cfg: TrainConfig = TrainConfig(), out_dir=None, resume=None,
          val_data=None) -> TrainResult:
    """Mini-batch training with per-epoch validation.

    ``data`` is a :class:`Dataset` or a list of samples. Unless ``val_data``
    is given, a scene-level split holds out ``cfg.val_fraction``. Each epoch
    draws its shuffling and augmentation from ``default_rng([seed, epoch])``
    so that a resumed run continues exactly as an uninterrupted one.
    Writes ``last/``, ``best/`` and ``metrics.tsv`` under ``out_dir``.
    """
    R = net.config.R
    dtype = np.dtype(cfg.dtype)
    samples = samples_from(data)
    if val_data is None:
        train_s, val_s = split_samples(samples, cfg.val_fraction, cfg.seed)
    else:
        train_s, val_s = samples, samples_from(val_data)
    if not train_s:
        raise ValueError("no training samples")
    for s in train_s + val_s:
        s.frame = s.frame.astype(dtype, copy=False)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    adam = Adam()
    history, best_val, start = [], None, 0
    net = net.astype(dtype)
    best_params = {k: v.copy() for k, v in net.params.items()}
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.net.config != net.config:
            raise CheckpointError("checkpoint config differs from the network being trained")
        net = ck.net.astype(dtype)
        adam = ck.adam or Adam()
        history, best_val, start = ck.history, ck.best_val, ck.epoch + 1
        best_dir = Path(resume).parent / "best"
        if best_dir.exists():
            best_params = {k: v.astype(dtype) for k, v in load_checkpoint(best_dir).net.params.items()}

    steps_per_epoch = math.ceil(len(train_s) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        sigma = cfg.sigma(epoch, R)
        order = rng.permutation(len(train_s))
        losses = []
        lr = cfg.lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            frames, pts = [], []
            for i in idx:
                f, p = augment_points(train_s[i].frame, train_s[i].pts, R, rng, cfg.augment)
                frames.append(f)
                pts.append(p)
            x = np.stack(frames)
            pred = net.forward(x, keep_cache=True)
            tgt = _targets(pts, pred.shape[1:], sigma, R)
            value, grad = loss(pred, sigma=sigma, R=R, lambda1=cfg.lambda1, target=tgt)
            grads, _ = net.backward(grad)
            net._cache = None
            lr = cosine_lr(epoch * steps_per_epoch + b, total_steps, cfg.lr)
            adam.step(net.params, grads, lr, cfg.weight_decay)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(net, val_s, sigma, cfg) if val_s else train_loss
        row = dict(epoch=epoch, lr=lr, sigma=sigma, train_loss=train_loss, val_loss=val_loss)
        log.info("epoch %d lr %.3g sigma %.3g train %.6g val %.6g", epoch, lr, sigma,
                 train_loss, val_loss)
        if not (np.isfinite(val_loss) and np.isfinite(train_loss)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}; "
                                   f"last good checkpoint: {out / 'last' if out else None}")
        history.append(row)
        if best_val is None or val_loss <= best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in net.params.items()}
            if out is not None:
                save_checkpoint(out / "best", net, epoch, None, None, history, best_val)
        if out is not None:
            save_checkpoint(out / "last", net, epoch, None, adam, history, best_val)
            write_metrics(out / "metrics.tsv", history)

    best = net.copy()
    best.params = best_params
    threshold = calibrate_threshold(best, val_s or train_s, cfg.roc_tolerance)
    result = TrainResult(best, history, threshold, best_val)
    if out is not None:
        last_epoch = history[-1]["epoch"] if history else -1
        best_epoch = min(history, key=lambda r: (r["val_loss"], -r["epoch"]))["epoch"] if history else -1
        result.best_path = save_checkpoint(out / "best", best, best_epoch, threshold, None,
                                           history, best_val)
        result.last_path = save_checkpoint(out / "last", net, last_epoch, threshold, adam,
                                           history, best_val)
    return result


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def infer(net: SgSpcn, frame) -> np.ndarray:
    """Heatmap ``RU x RV`` for one ``2 x U x V`` frame."""
    data = np.asarray(getattr(frame, "data", frame))
    if data.ndim != 3 or data.shape[0] != net.config.in_channels:
        raise ValueError(f"frame of shape {data.shape} does not fit a "
                         f"{net.config.in_channels}-channel network")
    return net.forward(data.astype(net.dtype))


def localize_frame(net: SgSpcn, frame, threshold: float, window: Optional[int] = None,
                   frame_id=0, wave_index=0) -> PointSet:
    """Channel-space points ``(y*, z*)`` at input resolution."""
    R = net.config.R
    heat = infer(net, frame)
    pts = rescale_points(nms_extract(heat, window or default_window(R), threshold, Space.CHANNEL), R)
    pts.frame_id = np.full(len(pts), frame_id)
    pts.wave_index = np.full(len(pts), wave_index)
    return pts
