"""Point-set geometry kernels.

Raw clouds are plain float64 numpy arrays of shape (N, 3). Everything here
is deterministic given its inputs: farthest point sampling always starts at
index 0 and breaks ties toward the lower index, and k-nearest-neighbor
ordering is stable so equal distances also resolve toward the lower index.
The coarse-to-fine pyramid built from these two kernels is the substrate
every later stage (masking, tokenization, reconstruction) operates on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, MaskConsistencyError, PamrError, ShapeError
from .tensor import Tensor

__all__ = [
    "PointCloud",
    "ScalePyramid",
    "MaskPlan",
    "normalize_points",
    "fps",
    "knn",
    "build_scale_pyramid",
    "mask_and_backproject",
    "gather_patches",
    "visible_positions",
    "chamfer_l2",
    "chamfer_l2_batched",
]


def _check_points(points: np.ndarray, what: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"{what} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ShapeError(f"{what} must hold at least one point")
    if not np.all(np.isfinite(pts)):
        raise ShapeError(f"{what} holds non-finite coordinates")
    return pts


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = _check_points(points, "points")
    centered = pts - pts.mean(axis=0)
    radius = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if radius == 0.0:
        raise PamrError("cannot normalize a cloud whose points all coincide")
    return centered / radius


@dataclass
class PointCloud:
    """A cloud of 3-d points with an optional integer class label."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = _check_points(self.points, "PointCloud.points")
        if self.label is not None:
            self.label = int(self.label)

    def __len__(self) -> int:
        return self.points.shape[0]

    def normalized(self) -> "PointCloud":
        return PointCloud(normalize_points(self.points), self.label)


def fps(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns `m` unique indices.

    Begins at `start` (index 0 by default, which keeps the whole pipeline
    deterministic); each step picks the point farthest from the selected set
    (squared distance), ties toward the lower index. Selected slots are
    poisoned to -1 so duplicates in the cloud can never be picked twice.
    """
    pts = _check_points(points, "points")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ShapeError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= start < n:
        raise ShapeError(f"start index {start} outside cloud of {n}")
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    diff = pts - pts[start]
    best = (diff * diff).sum(axis=1)
    best[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(best))
        sel[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(best, (diff * diff).sum(axis=1), out=best)
        best[nxt] = -1.0
    return sel


def knn(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest reference points for each query, nearest first.

    Squared euclidean distance; equal distances resolve toward the lower
    reference index (stable sort), so the result is fully deterministic.
    """
    q = _check_points(queries, "queries")
    r = _check_points(refs, "refs")
    if not 1 <= k <= r.shape[0]:
        raise ShapeError(f"k={k} with only {r.shape[0]} reference points")
    diff = q[:, None, :] - r[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


@dataclass
class ScalePyramid:
    """Coarse-to-fine index structure over one cloud.

    points[i] is the scale-i cloud (scale 0 is the raw input); sample_idx[i-1]
    locates scale i inside scale i-1; neighbors[i-1] (shape (N_i, k_i)) is the
    patch of each scale-i center, indexing into scale i-1.
    """

    points: list[np.ndarray]
    sample_idx: list[np.ndarray]
    neighbors: list[np.ndarray]

    @property
    def num_scales(self) -> int:
        return len(self.points) - 1

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.points)

    def size_at(self, scale: int) -> int:
        return self.points[scale].shape[0]


def build_scale_pyramid(
    points: np.ndarray, sizes: tuple[int, ...], ks: tuple[int, ...]
) -> ScalePyramid:
    """Subsample repeatedly with fps and attach a knn patch to every center.

    `sizes` are the per-scale center counts (strictly decreasing, all below
    the raw count); `ks` the per-scale patch sizes, one per entry of `sizes`.
    """
    pts = _check_points(points, "points")
    if len(sizes) != len(ks):
        raise ConfigError(f"sizes {sizes} and ks {ks} must align")
    if len(sizes) < 1:
        raise ConfigError("a pyramid needs at least one scale")
    if not 1 <= sizes[0] <= pts.shape[0]:
        raise ConfigError(f"first scale size {sizes[0]} exceeds the raw count {pts.shape[0]}")
    for coarse, fine in zip(sizes[1:], sizes[:-1]):
        if not 1 <= coarse < fine:
            raise ConfigError(f"scale sizes must strictly decrease: {sizes}")
    prev_sizes = (pts.shape[0],) + tuple(sizes[:-1])
    for k, avail in zip(ks, prev_sizes):
        if not 1 <= k <= avail:
            raise ConfigError(f"patch size {k} exceeds the {avail} points of the scale below")
    levels = [pts]
    sample_idx: list[np.ndarray] = []
    neighbors: list[np.ndarray] = []
    for size, k in zip(sizes, ks):
        below = levels[-1]
        idx = fps(below, size)
        centers = below[idx]
        neighbors.append(knn(centers, below, k))
        sample_idx.append(idx)
        levels.append(centers)
    return ScalePyramid(levels, sample_idx, neighbors)


@dataclass
class MaskPlan:
    """Sorted visible/masked index sets for every token scale.

    Lists are indexed by scale; entry 0 is None because raw points are never
    masked. At each scale the two arrays partition arange(N_i).
    """

    mu: float
    visible: list = field(default_factory=list)
    masked: list = field(default_factory=list)

    def n_masked_final(self) -> int:
        return len(self.masked[-1])


def mask_and_backproject(
    pyramid: ScalePyramid, mu: float, rng: np.random.Generator
) -> MaskPlan:
    """Mask floor(mu * N_S) random coarsest centers and project the mask down.

    A finer point stays visible exactly when it lies in the patch of at least
    one visible center of the scale above. A ratio that rounds to zero masked
    centers leaves every scale fully visible.
    """
    if not 0.0 <= mu < 1.0:
        raise ShapeError(f"mask ratio must lie in [0, 1), got {mu}")
    s = pyramid.num_scales
    n_final = pyramid.size_at(s)
    n_masked = int(np.floor(mu * n_final))
    visible: list = [None] * (s + 1)
    masked: list = [None] * (s + 1)
    if n_masked == 0:
        for i in range(1, s + 1):
            visible[i] = np.arange(pyramid.size_at(i), dtype=np.int64)
            masked[i] = np.empty(0, dtype=np.int64)
        return MaskPlan(mu, visible, masked)

    perm = rng.permutation(n_final)
    masked[s] = np.sort(perm[:n_masked]).astype(np.int64)
    visible[s] = np.sort(perm[n_masked:]).astype(np.int64)
    for i in range(s - 1, 0, -1):
        rows = pyramid.neighbors[i]  # patches of scale i+1, indexing scale i
        vis = np.unique(rows[visible[i + 1]]).astype(np.int64)
        visible[i] = vis
        all_i = np.arange(pyramid.size_at(i), dtype=np.int64)
        masked[i] = np.setdiff1d(all_i, vis, assume_unique=True)
    return MaskPlan(mu, visible, masked)


def gather_patches(
    pyramid: ScalePyramid, scale: int, centers: np.ndarray | None = None
) -> np.ndarray:
    """Center-relative patch coordinates at a scale: (n, k_scale, 3).

    Each row is the scale-(i-1) neighborhood of one scale-i center, expressed
    relative to that center. `centers` restricts to a subset of center
    indices; None takes all of them.
    """
    if not 1 <= scale <= pyramid.num_scales:
        raise ShapeError(f"scale {scale} outside 1..{pyramid.num_scales}")
    idx = pyramid.neighbors[scale - 1]
    ctr = pyramid.points[scale]
    if centers is not None:
        centers = np.asarray(centers, dtype=np.int64)
        idx = idx[centers]
        ctr = ctr[centers]
    return pyramid.points[scale - 1][idx] - ctr[:, None, :]


def visible_positions(visible_sorted: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    """Positions of `wanted` indices inside a sorted visible-index array.

    Raises MaskConsistencyError if any wanted index is not actually visible;
    that means mask bookkeeping upstream went wrong.
    """
    vis = np.asarray(visible_sorted, dtype=np.int64)
    want = np.asarray(wanted, dtype=np.int64)
    pos = np.searchsorted(vis, want)
    ok = (pos < vis.shape[0]) & (vis[np.minimum(pos, vis.shape[0] - 1)] == want)
    if not np.all(ok):
        missing = want[~ok]
        raise MaskConsistencyError(f"indices {missing[:8].tolist()} are not in the visible set")
    return pos.astype(np.int64)


def _pairwise_sq(a: Tensor, b: Tensor) -> Tensor:
    """(..., A, B) squared distances between (..., A, 3) and (..., B, 3).

    Built from explicit differences, not the expanded quadratic form, so
    identical points give exactly 0 (the loss on a perfect reconstruction
    must be 0, not cancellation noise).
    """
    sa = a.shape[:-2] + (a.shape[-2], 1, 3)
    sb = b.shape[:-2] + (1, b.shape[-2], 3)
    diff = T.sub(T.reshape(a, sa), T.reshape(b, sb))
    return T.tsum(T.mul(diff, diff), axis=-1)


def chamfer_l2(a, b) -> Tensor:
    """Symmetric squared-distance chamfer between two clouds.

    mean over a of the squared distance to the nearest b, plus the same with
    roles swapped. Gradients flow into whichever side is a live tensor.
    """
    at = a if isinstance(a, Tensor) else T.constant(np.asarray(a, dtype=np.float64))
    bt = b if isinstance(b, Tensor) else T.constant(np.asarray(b, dtype=np.float64))
    if at.ndim != 2 or at.shape[1] != 3 or bt.ndim != 2 or bt.shape[1] != 3:
        raise ShapeError(f"chamfer needs (A, 3) and (B, 3), got {at.shape} and {bt.shape}")
    if at.shape[0] < 1 or bt.shape[0] < 1:
        raise ShapeError("chamfer is undefined for an empty cloud")
    d2 = _pairwise_sq(at, bt)
    fwd = T.tmean(T.amin(d2, axis=1))
    bwd = T.tmean(T.amin(d2, axis=0))
    return T.add(fwd, bwd)


def chamfer_l2_batched(pred, truth) -> Tensor:
    """Mean chamfer over a batch of patch pairs: (M, A, 3) vs (M, B, 3)."""
    pt = pred if isinstance(pred, Tensor) else T.constant(np.asarray(pred, dtype=np.float64))
    tt = truth if isinstance(truth, Tensor) else T.constant(np.asarray(truth, dtype=np.float64))
    if pt.ndim != 3 or pt.shape[2] != 3 or tt.ndim != 3 or tt.shape[2] != 3:
        raise ShapeError(f"batched chamfer needs (M, A, 3) and (M, B, 3), got {pt.shape} and {tt.shape}")
    if pt.shape[0] != tt.shape[0]:
        raise ShapeError(f"batch sizes disagree: {pt.shape[0]} vs {tt.shape[0]}")
    if pt.shape[0] < 1 or pt.shape[1] < 1 or tt.shape[1] < 1:
        raise ShapeError("batched chamfer is undefined for empty patches")
    d2 = _pairwise_sq(pt, tt)  # (M, A, B)
    fwd = T.tmean(T.amin(d2, axis=2), axis=1)  # (M,)
    bwd = T.tmean(T.amin(d2, axis=1), axis=1)  # (M,)
    return T.tmean(T.add(fwd, bwd))
