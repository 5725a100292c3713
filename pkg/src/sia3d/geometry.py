"""Non-learned geometric primitives on points and axis-aligned 3D boxes.

Everything here is pure numpy, deterministic, and tie-broken by lowest index
so tests and training runs reproduce exactly.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Box3D", "PointSet", "farthest_point_sample", "ball_query", "knn",
    "iou_3d", "giou_3d", "nms", "point_in_box", "pairwise_sq_dist",
]


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box given by center (x,y,z) and size (w,d,h), meters."""

    center: tuple
    size: tuple

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        s = np.asarray(self.size, dtype=np.float64)
        if c.shape != (3,) or s.shape != (3,):
            raise ValueError(f"Box3D needs 3-vectors, got center {c.shape}, size {s.shape}")
        if not np.all(s > 0):
            raise ValueError(f"Box3D size must be strictly positive, got {tuple(s)}")
        object.__setattr__(self, "center", tuple(float(v) for v in c))
        object.__setattr__(self, "size", tuple(float(v) for v in s))

    @property
    def min_corner(self):
        return tuple(c - 0.5 * s for c, s in zip(self.center, self.size))

    @property
    def max_corner(self):
        return tuple(c + 0.5 * s for c, s in zip(self.center, self.size))

    @property
    def volume(self):
        w, d, h = self.size
        return w * d * h

    def as_array(self):
        return np.asarray(self.center + self.size, dtype=np.float64)


@dataclass
class PointSet:
    """M points with optional per-point features."""

    positions: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (M,3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.positions.shape[0]:
                raise ValueError(
                    f"feature rows {self.features.shape[0]} != point count {self.positions.shape[0]}")

    def __len__(self):
        return self.positions.shape[0]


def pairwise_sq_dist(a, b):
    """Squared euclidean distances, (|a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def farthest_point_sample(points, n, seed_index=0):
    """Greedy FPS: start at seed_index, then repeatedly take the point that
    maximizes the minimum distance to everything picked so far.

    Ties break toward the lowest index.  Returns a list of n indices.
    """
    pos = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    m = pos.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"farthest_point_sample: n={n} out of range for {m} points")
    if not 0 <= seed_index < m:
        raise ValueError(f"farthest_point_sample: seed_index={seed_index} out of range")
    picked = np.empty(n, dtype=np.int64)
    picked[0] = seed_index
    diff = pos - pos[seed_index]
    mind = (diff * diff).sum(1)
    for i in range(1, n):
        nxt = int(np.argmax(mind))  # argmax takes the first maximum: lowest index
        picked[i] = nxt
        diff = pos - pos[nxt]
        np.minimum(mind, (diff * diff).sum(1), out=mind)
    return picked


def ball_query(centers, points, radius, nsample):
    """Per center, up to nsample point indices within radius, nearest first.

    Padding repeats the nearest qualifying index; a center with no point in
    radius gets the globally nearest point repeated and its empty flag set.
    Returns (indices (C, nsample), empty (C,) bool).
    """
    if radius <= 0:
        raise ValueError(f"ball_query: radius must be positive, got {radius}")
    if nsample < 1:
        raise ValueError(f"ball_query: nsample must be >= 1, got {nsample}")
    cpos = centers.positions if isinstance(centers, PointSet) else np.asarray(centers, dtype=np.float64)
    ppos = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    d2 = pairwise_sq_dist(cpos, ppos)
    take, empty = _nearest_block(d2, nsample, radius)
    return take, empty


def _nearest_block(d2, nsample, radius):
    """Shared ball-query core over a (rows, N) squared-distance matrix.

    radius is a scalar or a per-row array.  Rows of the result hold the
    nsample nearest indices ascending by distance (ties toward the lower
    index), padded per the ball-query rule.  For N much larger than nsample
    an argpartition prefilter replaces the full sort; exact ties across the
    partition boundary then resolve by the partition's deterministic choice
    instead of by index.
    """
    rows, n = d2.shape
    avail = min(nsample, n)
    if n > 4 * nsample and n > 64:
        part = np.argpartition(d2, avail - 1, axis=1)[:, :avail]
        part.sort(axis=1)                      # index-ascending, so the stable
        vals = np.take_along_axis(d2, part, axis=1)   # sort below breaks ties low
        order_local = np.argsort(vals, axis=1, kind="stable")
        cand = np.take_along_axis(part, order_local, axis=1)
        cand_d2 = np.take_along_axis(vals, order_local, axis=1)
    else:
        order = np.argsort(d2, axis=1, kind="stable")[:, :avail]
        cand = order
        cand_d2 = np.take_along_axis(d2, cand, axis=1)
    r2 = np.broadcast_to(np.asarray(radius, dtype=np.float64) ** 2, (rows,))
    within = cand_d2 <= r2[:, None]
    counts = within.sum(axis=1)
    empty = counts == 0
    take = np.empty((rows, nsample), dtype=np.int64)
    take[:, :avail] = cand
    if nsample > avail:
        take[:, avail:] = cand[:, :1]
    pad = np.arange(nsample)[None, :] >= np.maximum(counts, 1)[:, None]
    take = np.where(pad, take[:, :1], take)
    return take, empty


def fps_batch(positions, n, seeds):
    """Batched farthest-point sampling: (B,N,3) -> (B,n) indices.

    Same greedy rule and tie-breaks as farthest_point_sample, vectorized
    over the batch.
    """
    pos = np.asarray(positions, dtype=np.float64)
    b, m, _ = pos.shape
    if not 1 <= n <= m:
        raise ValueError(f"fps_batch: n={n} out of range for {m} points")
    seeds = np.asarray(seeds, dtype=np.int64)
    picked = np.empty((b, n), dtype=np.int64)
    picked[:, 0] = seeds
    rows = np.arange(b)
    diff = pos - pos[rows, seeds][:, None, :]
    mind = (diff * diff).sum(-1)
    for i in range(1, n):
        nxt = mind.argmax(axis=1)
        picked[:, i] = nxt
        diff = pos - pos[rows, nxt][:, None, :]
        np.minimum(mind, (diff * diff).sum(-1), out=mind)
    return picked


def ball_query_batch(centers, points, radii, nsample):
    """Batched ball query: (B,M,3) x (B,N,3) -> (B,M,nsample) indices.

    radii is one radius per batch element.
    """
    c = np.asarray(centers, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    b, m, _ = c.shape
    n = p.shape[1]
    d2 = ((c * c).sum(-1)[:, :, None] + (p * p).sum(-1)[:, None, :]
          - 2.0 * np.matmul(c, p.transpose(0, 2, 1)))
    np.maximum(d2, 0.0, out=d2)
    r = np.repeat(np.asarray(radii, dtype=np.float64), m)
    take, empty = _nearest_block(d2.reshape(b * m, n), nsample, r)
    return take.reshape(b, m, nsample), empty.reshape(b, m)


def knn(query, keys, k):
    """Exact k nearest keys per query, ascending distance, ties to lower index."""
    qpos = query.positions if isinstance(query, PointSet) else np.asarray(query, dtype=np.float64)
    kpos = keys.positions if isinstance(keys, PointSet) else np.asarray(keys, dtype=np.float64)
    if k > kpos.shape[0]:
        raise ValueError(f"knn: k={k} exceeds key count {kpos.shape[0]}")
    d2 = pairwise_sq_dist(qpos, kpos)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _overlap_1d(amin, amax, bmin, bmax):
    return max(0.0, min(amax, bmax) - max(amin, bmin))


def iou_3d(a, b):
    """Axis-aligned intersection over union, in [0, 1]."""
    amin, amax = a.min_corner, a.max_corner
    bmin, bmax = b.min_corner, b.max_corner
    inter = 1.0
    for i in range(3):
        inter *= _overlap_1d(amin[i], amax[i], bmin[i], bmax[i])
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def giou_3d(a, b):
    """Generalized IoU: IoU minus the hull's empty fraction, in (-1, 1]."""
    amin, amax = a.min_corner, a.max_corner
    bmin, bmax = b.min_corner, b.max_corner
    inter = 1.0
    hull = 1.0
    for i in range(3):
        inter *= _overlap_1d(amin[i], amax[i], bmin[i], bmax[i])
        hull *= max(amax[i], bmax[i]) - min(amin[i], bmin[i])
    union = a.volume + b.volume - inter
    iou = inter / union if union > 0 else 0.0
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def nms(proposals, iou_threshold):
    """Greedy score-descending suppression; keeps indices into `proposals`.

    proposals is a list of (Box3D, score).  Equal scores break toward the
    lower index.  A proposal is suppressed when its IoU with any already-kept
    proposal is >= iou_threshold.
    """
    if not proposals:
        return []
    scores = np.asarray([s for _, s in proposals], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    order = np.lexsort((np.arange(len(proposals)), -scores))
    kept = []
    for idx in order:
        box = proposals[idx][0]
        if all(iou_3d(box, proposals[j][0]) < iou_threshold for j in kept):
            kept.append(int(idx))
    return sorted(kept)


def point_in_box(p, box):
    """Closed-boundary containment test."""
    p = np.asarray(p, dtype=np.float64)
    mn = np.asarray(box.min_corner)
    mx = np.asarray(box.max_corner)
    return bool(np.all(p >= mn) and np.all(p <= mx))


def points_in_box(points, box):
    """Vectorized closed containment for an (M,3) array."""
    pts = np.asarray(points, dtype=np.float64)
    mn = np.asarray(box.min_corner)
    mx = np.asarray(box.max_corner)
    return np.all((pts >= mn) & (pts <= mx), axis=1)
