"""Cross-wave fusion, detection metrics and ULM image accumulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointSet, Space


def _frames(ps: PointSet):
    return np.zeros(len(ps), int) if ps.frame_id is None else np.asarray(ps.frame_id, int)


# --------------------------------------------------------------------------
# DBSCAN fusion
# --------------------------------------------------------------------------

def dbscan_labels(points, eps, min_pts=1):
    """Cluster label per point (-1 for noise).

    Core points have at least ``min_pts`` neighbours within ``eps``
    (themselves included). Clusters are connected components of core points;
    a border point joins the cluster of its lowest-indexed core neighbour.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0, int)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    deg = np.ones(n, int)
    np.add.at(deg, pairs[:, 0], 1)
    np.add.at(deg, pairs[:, 1], 1)
    core = deg >= min_pts
    both = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    graph = coo_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    labels = np.full(n, -1)
    # renumber core components in order of first appearance
    remap = {}
    for i in np.flatnonzero(core):
        labels[i] = remap.setdefault(comp[i], len(remap))
    for i in np.flatnonzero(~core):
        nb = [j for j in tree.query_ball_point(pts[i], eps) if core[j]]
        if nb:
            labels[i] = labels[min(nb)]
    return labels


def dbscan_fuse(points: PointSet, wavelength: float, eps: float = 0.6, min_pts: int = 1) -> PointSet:
    """Merge detections of the same bubble seen by several waves.

    ``eps`` is in wavelengths. Fusion runs separately per ``frame_id``. Each
    cluster becomes its confidence-weighted centroid; its confidence is the
    mean member confidence and its wave index is kept only when all members
    share it (else -1). Noise points (possible only with ``min_pts > 1``)
    are dropped.
    """
    if points.space != Space.BMODE:
        raise ValueError("fusion expects B-mode points")
    n = len(points)
    if n == 0:
        return PointSet.empty(Space.BMODE)
    frames = _frames(points)
    conf = np.ones(n) if points.confidence is None else np.asarray(points.confidence, float)
    waves = np.full(n, -1) if points.wave_index is None else np.asarray(points.wave_index, int)
    out_p, out_c, out_w, out_f = [], [], [], []
    for fid in np.unique(frames):
        idx = np.flatnonzero(frames == fid)
        labels = dbscan_labels(points.points[idx], eps * wavelength, min_pts)
        for lab in range(labels.max() + 1):
            members = idx[labels == lab]
            w = conf[members]
            w = w if np.all(w > 0) else np.ones(len(members))
            out_p.append(np.average(points.points[members], axis=0, weights=w))
            out_c.append(conf[members].mean())
            wm = np.unique(waves[members])
            out_w.append(wm[0] if len(wm) == 1 else -1)
            out_f.append(fid)
    return PointSet(np.array(out_p).reshape(-1, 2), Space.BMODE, np.array(out_c),
                    np.array(out_w, int), np.array(out_f, int))


# --------------------------------------------------------------------------
# matching and scores
# --------------------------------------------------------------------------

def greedy_pairs(est, gt, gate):
    """Distance-ordered one-to-one matching of pairs closer than ``gate`` (strict)."""
    est = np.asarray(est, float).reshape(-1, 2)
    gt = np.asarray(gt, float).reshape(-1, 2)
    if len(est) == 0 or len(gt) == 0:
        return np.zeros((0, 2), int), np.zeros(0)
    sdm = cKDTree(est).sparse_distance_matrix(cKDTree(gt), gate, output_type="ndarray")
    sdm = sdm[sdm["v"] < gate]
    order = np.lexsort((sdm["j"], sdm["i"], sdm["v"]))
    used_e = np.zeros(len(est), bool)
    used_g = np.zeros(len(gt), bool)
    pairs, dists = [], []
    for k in order:
        i, j, d = sdm["i"][k], sdm["j"][k], sdm["v"][k]
        if not used_e[i] and not used_g[j]:
            used_e[i] = used_g[j] = True
            pairs.append((i, j))
            dists.append(d)
    return np.array(pairs, int).reshape(-1, 2), np.array(dists)


def optimal_pairs(est, gt, gate):
    """Most pairs closer than ``gate`` (strict), then least total distance among those."""
    est = np.asarray(est, float).reshape(-1, 2)
    gt = np.asarray(gt, float).reshape(-1, 2)
    if len(est) == 0 or len(gt) == 0:
        return np.zeros((0, 2), int), np.zeros(0)
    d = np.linalg.norm(est[:, None] - gt[None], axis=2)
    ok = d < gate
    # a forbidden pair costs more than any set of allowed ones, so the
    # assignment first maximises the number of allowed pairs
    big = gate * (min(d.shape) + 1)
    rows, cols = linear_sum_assignment(np.where(ok, d, big))
    keep = ok[rows, cols]
    pairs = np.column_stack([rows[keep], cols[keep]]).astype(int)
    return pairs.reshape(-1, 2), d[rows[keep], cols[keep]]


MATCHERS = {"greedy": greedy_pairs, "optimal": optimal_pairs}


@dataclass
class Score:
    tp: int
    fp: int
    fn: int
    rmse_per_frame: dict = field(default_factory=dict)  # frame -> RMSE in lambda/10
    sq_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))  # lambda/10 units

    @property
    def jaccard(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    @property
    def rmse(self) -> Optional[float]:
        """Mean of the per-frame RMSE values (lambda/10), ``None`` without any match."""
        vals = [v for v in self.rmse_per_frame.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def rmse_std(self) -> Optional[float]:
        vals = [v for v in self.rmse_per_frame.values() if v is not None]
        return float(np.std(vals)) if vals else None

    @property
    def rmse_pooled(self) -> Optional[float]:
        return float(np.sqrt(np.mean(self.sq_errors))) if len(self.sq_errors) else None


def pair_and_score(est: PointSet, gt: PointSet, wavelength: float,
                   matcher: str = "greedy") -> Score:
    """TP/FP/FN and RMSE with a strict ``< wavelength/4`` gate, per frame.

    ``matcher`` is ``"greedy"`` (distance-ordered) or ``"optimal"``.
    """
    match = MATCHERS[matcher]
    for ps in (est, gt):
        if ps.space != Space.BMODE:
            raise ValueError("scoring expects B-mode points")
    fe, fg = _frames(est), _frames(gt)
    unit = wavelength / 10
    tp = fp = fn = 0
    per_frame, sq = {}, []
    for fid in np.union1d(fe, fg):
        e = est.points[fe == fid]
        g = gt.points[fg == fid]
        pairs, d = match(e, g, wavelength / 4)
        tp += len(pairs)
        fp += len(e) - len(pairs)
        fn += len(g) - len(pairs)
        err = (d / unit) ** 2
        sq.append(err)
        per_frame[int(fid)] = float(np.sqrt(err.mean())) if len(err) else None
    sq = np.concatenate(sq) if sq else np.zeros(0)
    return Score(tp, fp, fn, per_frame, sq)


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

def _gauss_window(size, sigma):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(img_a, img_b, window: int = 11, L: Optional[float] = None, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window.

    ``L`` defaults to the joint value range of both images. Local statistics
    use reflective borders; the mean skips a band of ``window // 2`` pixels.
    """
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"images must be 2-D and at least {window} px per side")
    if L is None:
        L = max(a.max(), b.max()) - min(a.min(), b.min())
        L = L if L > 0 else 1.0
    g = _gauss_window(window, sigma)

    def filt(x):
        return correlate1d(correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
            ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    p = window // 2
    return float(smap[p:-p, p:-p].mean())


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def render_ulm(points_px, shape, R_render: int, source_R: Optional[int] = None,
               dither: bool = False, seed: int = 0, gamma: Optional[float] = None):
    """Accumulate point counts on a grid ``R_render`` times finer than the input.

    ``points_px`` are ``(row, col)`` in input pixels; input pixel ``i``
    spans ``[i - 0.5, i + 0.5)``. When ``dither`` is set and the points were
    quantised at a coarser ``source_R``, each coordinate gets uniform noise
    of +-0.5/source_R px first. Points landing outside are dropped. With
    ``gamma`` the counts are raised to that power for display.
    """
    pts = np.asarray(points_px, dtype=float).reshape(-1, 2)
    rows, cols = shape[0] * R_render, shape[1] * R_render
    if dither and source_R is not None and source_R < R_render:
        rng = np.random.default_rng(seed)
        pts = pts + rng.uniform(-0.5, 0.5, pts.shape) / source_R
    idx = np.floor(pts * R_render + 0.5).astype(np.int64)
    inside = (idx[:, 0] >= 0) & (idx[:, 0] < rows) & (idx[:, 1] >= 0) & (idx[:, 1] < cols)
    idx = idx[inside]
    img = np.bincount(idx[:, 0] * cols + idx[:, 1], minlength=rows * cols)
    img = img.reshape(rows, cols).astype(float)
    if gamma is not None:
        img = img ** gamma
    return img


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _fmt(v):
    return "" if v is None else f"{v:.6g}"


def write_metrics_tsv(path, score: Score, ssim_value: Optional[float] = None):
    """Per-frame rows then a summary row (RMSE mean and std in lambda/10, Jaccard %, SSIM %)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["frame", "rmse_lambda10", "rmse_std", "jaccard_pct", "ssim_pct",
                    "tp", "fp", "fn"])
        for fid, r in sorted(score.rmse_per_frame.items()):
            w.writerow([fid, _fmt(r), "", "", "", "", "", ""])
        w.writerow(["summary", _fmt(score.rmse), _fmt(score.rmse_std),
                    _fmt(100 * score.jaccard),
                    _fmt(None if ssim_value is None else 100 * ssim_value),
                    score.tp, score.fp, score.fn])
