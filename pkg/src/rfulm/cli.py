"""``rfulm`` command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .beamform import BModeGrid
from .clutter import FrameStack, svd_clutter_filter
from .config import ConfigError, load_config
from .evaluate import pair_and_score, render_ulm, ssim, write_metrics_tsv
from .geometry import AcquisitionParams, AffineMap, ArrayGeometry, PointSet, Space
from .localize import read_points_csv, write_points_csv
from .network import SgSpcn, SgSpcnConfig
from .pipeline import bmode_points, calibrate, compound, network_points
from .simulator import Dataset, DatasetSpec, generate_dataset, normalize
from .tensorio import save_pgm, save_tensor
from .training import AugmentConfig, CheckpointError, TrainConfig, load_checkpoint, train

log = logging.getLogger("rfulm")


class UsageError(Exception):
    pass


def _load_dataset(path):
    try:
        return Dataset.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"bad dataset path: {exc}") from None


def _geom_acq(cfg):
    try:
        return ArrayGeometry(**cfg.section("array")), AcquisitionParams(**cfg.section("acquisition"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config)
    cfg.require("simulate")
    geom, acq = _geom_acq(cfg)
    sim = cfg.section("simulate")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    spec = DatasetSpec(geom=geom, acq=acq, seed=seed, **sim)
    generate_dataset(args.out, spec, jobs=args.jobs)
    print(f"wrote {spec.n_frames} frame(s) x {len(spec.angles_deg)} wave(s) to {args.out}")


def cmd_calibrate(args):
    ds = _load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = calibrate(ds.geom, ds.acq, ds.waves(), ds.region(), n=args.n, seed=args.seed or 0)
    lam = ds.acq.wavelength
    for idx, amap in maps.items():
        amap.save(out / f"affine_w{idx}.txt")
        print(f"wave {idx}: mean residual {amap.residual * 1e6:.2f} um ({amap.residual / lam:.3f} lambda)")


def _train_config(cfg, seed, frame_shape):
    t = cfg.section("train")
    crop = t.pop("crop", 128)
    crop = None if crop is None else min(crop, *frame_shape)
    aug = AugmentConfig(crop=crop, p_flip=t.pop("p_flip", 0.5), p_rot=t.pop("p_rot", 0.25),
                        p_blur=t.pop("p_blur", 0.1), snr_db=t.pop("snr_db", 50.0))
    try:
        return TrainConfig(seed=seed, augment=aug, **t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None


def cmd_train(args):
    cfg = load_config(args.config)
    cfg.require("train")
    ds = _load_dataset(args.dataset)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    try:
        ncfg = SgSpcnConfig(R=ds.R, **cfg.section("network"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None
    tcfg = _train_config(cfg, seed, (ds.geom.n_elements, ds.acq.n_samples))
    net = SgSpcn(ncfg, seed=seed, dtype=np.dtype(tcfg.dtype))
    res = train(net, ds, tcfg, out_dir=args.out, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} epoch(s); final val loss {last.get('val_loss')}; "
          f"threshold {res.threshold}; best checkpoint {res.best_path}")


def _load_affines(path, waves):
    if path is None:
        raise UsageError("sgspcn needs an affine calibration: run `rfulm calibrate` and pass --calibration")
    maps = {}
    for w in waves:
        f = Path(path) / f"affine_w{w.index}.txt"
        if not f.is_file():
            raise UsageError(f"missing {f}: run `rfulm calibrate --dataset ... --out {path}` first")
        maps[w.index] = AffineMap.load(f)
    return maps


def _channel_frames(ds, clutter_filter):
    """``(frame_id, wave_index, data)`` for every manifest row."""
    frames = [(r["frame_id"], r["wave_index"], ds.frame(i)) for i, r in enumerate(ds.rows)]
    if not clutter_filter:
        return frames
    out = []
    for w in sorted({f[1] for f in frames}):
        sel = [f for f in frames if f[1] == w]
        if len(sel) < 3:
            raise UsageError("--clutter-filter needs at least 3 frames per wave")
        stack = svd_clutter_filter(FrameStack(np.stack([f[2] for f in sel])), drop_low=1)
        out += [(f[0], w, normalize(d)[0]) for f, d in zip(sel, stack.frames)]
    return sorted(out, key=lambda f: (f[0], f[1]))


def cmd_localize(args):
    ds = _load_dataset(args.dataset)
    frames = _channel_frames(ds, args.clutter_filter)
    lam = ds.acq.wavelength
    if args.method == "sgspcn":
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required for --method sgspcn")
        ck = load_checkpoint(args.checkpoint)
        if ck.net.config.R != ds.R:
            raise CheckpointError(f"checkpoint R={ck.net.config.R} but dataset R={ds.R}")
        thr = args.threshold if args.threshold is not None else ck.threshold
        if thr is None:
            raise UsageError("checkpoint has no ROC threshold; pass --threshold")
        affines = _load_affines(args.calibration, ds.waves())
        pts = network_points(ck.net, frames, affines, thr * args.threshold_scale, lam)
    else:
        grid = BModeGrid.covering(ds.region(), args.grid_step * lam)
        waves = {w.index: w for w in ds.waves()}
        sets = []
        for fid in sorted({f[0] for f in frames}):
            env = compound([(f[1], f[2]) for f in frames if f[0] == fid], ds.geom, ds.acq, waves, grid)
            thr = (args.threshold if args.threshold is not None
                   else args.rel_threshold * float(env.max(initial=0.0)))
            if env.max(initial=0.0) > 0:
                sets.append(bmode_points(env, grid, thr * args.threshold_scale, args.method, fid))
        pts = PointSet.concat(sets, Space.BMODE)
    write_points_csv(args.out, pts)
    print(f"{len(pts)} point(s) -> {args.out}")


def _read_gt(path):
    """Ground truth from a dataset ``gt_points.csv`` or a points CSV."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if "y_m" not in header:
        return read_points_csv(path)
    pts, fids = [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if int(rec["wave_index"]) == 0:
                pts.append([float(rec["y_m"]), float(rec["z_m"])])
                fids.append(int(rec["frame_id"]))
    return PointSet(np.array(pts).reshape(-1, 2), Space.BMODE, frame_id=np.array(fids, int))


def _extent(points, pad):
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    return lo[0], hi[0], lo[1], hi[1]


def _render(points, extent, pixel, scale, source_scale=None, dither=False, seed=0, gamma=None):
    y0, y1, z0, z1 = extent
    shape = (int(np.ceil((z1 - z0) / pixel)) + 1, int(np.ceil((y1 - y0) / pixel)) + 1)
    px = np.stack([(points[:, 1] - z0) / pixel, (points[:, 0] - y0) / pixel], axis=1)
    return render_ulm(px, shape, scale, source_scale, dither, seed, gamma)


def cmd_evaluate(args):
    est = read_points_csv(args.points)
    gt = _read_gt(args.gt)
    lam = args.wavelength
    score = pair_and_score(est, gt, lam)
    s = None
    if args.ssim and len(gt):
        ext = _extent(gt.points, 4 * lam)
        a = _render(est.points, ext, lam, args.scale)
        b = _render(gt.points, ext, lam, args.scale)
        s = ssim(a, b)
    write_metrics_tsv(args.out, score, s)
    rmse = "n/a" if score.rmse is None else f"{score.rmse:.3f}"
    print(f"Jaccard {100 * score.jaccard:.1f}%  RMSE {rmse} lambda/10  "
          f"TP {score.tp} FP {score.fp} FN {score.fn}" + ("" if s is None else f"  SSIM {100 * s:.1f}%"))


def cmd_render(args):
    pts = read_points_csv(args.points)
    if len(pts) == 0:
        raise UsageError(f"{args.points} has no points to render")
    lam = args.wavelength
    ext = tuple(args.extent) if args.extent else _extent(pts.points, 2 * lam)
    img = _render(pts.points, ext, args.pixel or lam, args.scale, args.source_scale,
                  args.dither, args.seed or 0, args.gamma)
    out = Path(args.out)
    save_pgm(out, img, bits=16)
    save_tensor(out.with_suffix(".rtnsr"), img.astype(np.float32))
    print(f"{img.shape[0]}x{img.shape[1]} image, {len(pts)} point(s) -> {out}")


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    lam = AcquisitionParams().wavelength
    p = argparse.ArgumentParser(prog="rfulm", description="Ultrasound localisation on channel data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes for per-frame stages")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="fit per-wave affine maps from channel to B-mode space")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1000)
    common(s)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", help="train SG-SPCN on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("localize", help="localise scatterers in every frame of a dataset")
    s.add_argument("--method", required=True, choices=["sgspcn", "rs", "gauss2d", "lanczos"])
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--calibration")
    s.add_argument("--threshold", type=float, default=None, help="absolute detection threshold")
    s.add_argument("--threshold-scale", type=float, default=1.0,
                   help="multiplier on the threshold (raise it for in-vivo data)")
    s.add_argument("--rel-threshold", type=float, default=0.3,
                   help="B-mode methods: threshold as a fraction of the frame maximum")
    s.add_argument("--grid-step", type=float, default=0.5, help="B-mode pixel size in wavelengths")
    s.add_argument("--clutter-filter", action="store_true",
                   help="SVD clutter filter across frames before localisation")
    common(s)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", help="score points against ground truth")
    s.add_argument("--points", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--wavelength", type=float, default=lam)
    s.add_argument("--ssim", action="store_true", help="also compare rendered images")
    s.add_argument("--scale", type=int, default=1)
    common(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="accumulate points into a ULM image")
    s.add_argument("--points", required=True)
    s.add_argument("--out", required=True, help="16-bit PGM path; an .rtnsr copy is written alongside")
    s.add_argument("--scale", type=int, default=1, help="render grid refinement")
    s.add_argument("--source-scale", type=int, default=None, help="scale the points were quantised at")
    s.add_argument("--dither", action="store_true")
    s.add_argument("--gamma", type=float, default=None)
    s.add_argument("--wavelength", type=float, default=lam)
    s.add_argument("--pixel", type=float, default=None, help="base pixel size in metres (default lambda)")
    s.add_argument("--extent", type=float, nargs=4, metavar=("Y0", "Y1", "Z0", "Z1"))
    common(s)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"rfulm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"rfulm {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
