"""TGI aggregation: a global scene descriptor plus per-instance prefixes.

The global descriptor pools all decoded queries through either NetVLAD (soft
cluster assignment + residual sums) or GeM (generalized-mean pooling), both
projected to D and unit-normalized.  Per instance the aggregator emits the
ordered prefix [instance feature, K nearest context features, global
descriptor], K+2 entries, nearest-first by spatial distance with lower-index
tie-breaks.

Prefix slot roles for the caption head:
    0 = instance, 1 = context, 2 = global.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .nn import Module, Linear

__all__ = ["NetVlad", "GeM", "TgiAggregator", "netvlad", "gem",
           "SLOT_INSTANCE", "SLOT_CONTEXT", "SLOT_GLOBAL", "kmeans"]

SLOT_INSTANCE, SLOT_CONTEXT, SLOT_GLOBAL = 0, 1, 2


def kmeans(rng, points, k, iters=15):
    """Plain Lloyd's iterations; deterministic given the generator state."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < k:
        reps = int(np.ceil(k / n))
        pts = np.tile(pts, (reps, 1))
        n = pts.shape[0]
    centers = pts[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = d.argmin(1)
        for j in range(k):
            m = assign == j
            if m.any():
                centers[j] = pts[m].mean(0)
    return centers


class NetVlad(Module):
    """Soft-assignment VLAD pooling with intra- and final normalization."""

    def __init__(self, rng, dim, clusters=8, dtype=np.float32):
        super().__init__()
        if clusters < 2:
            raise ValueError(f"NetVLAD needs >= 2 clusters, got {clusters}")
        self.dim = dim
        self.clusters = clusters
        self.centers = Tensor(rng.normal(0.0, 0.5, size=(clusters, dim)).astype(dtype),
                              requires_grad=True)
        self.assign = Linear(rng, dim, clusters, dtype)
        self.proj = Linear(rng, clusters * dim, dim, dtype)

    def init_from_features(self, feats, rng, alpha=5.0):
        """K-means re-initialization from a warm-up batch of descriptors."""
        c = kmeans(rng, feats, self.clusters).astype(self.centers.dtype)
        self.centers.data[...] = c
        self.assign.weight.data[...] = (2.0 * alpha * c).T
        self.assign.bias.data[...] = -alpha * (c * c).sum(1)

    def __call__(self, feats):
        """feats tensor (..., S, D) -> unit-norm descriptor (..., D)."""
        if feats.shape[-2] < 1:
            raise ValueError("netvlad: empty feature set")
        lead = feats.shape[:-2]
        s, d = feats.shape[-2:]
        x = nd.reshape(feats, (-1, s, d))
        a = nd.softmax(self.assign(x), axis=-1)                      # (B,S,C)
        xe = nd.reshape(x, (x.shape[0], s, 1, d))
        resid = nd.sub(xe, nd.reshape(self.centers, (1, 1, self.clusters, d)))
        weighted = nd.mul(resid, nd.reshape(a, (x.shape[0], s, self.clusters, 1)))
        vlad = nd.sum_(weighted, axis=1)                             # (B,C,D)
        vlad = nd.l2_normalize(vlad, axis=-1)                        # intra-norm, zero-safe
        flat = nd.reshape(vlad, (x.shape[0], self.clusters * d))
        flat = nd.l2_normalize(flat, axis=-1)
        out = nd.l2_normalize(self.proj(flat), axis=-1)
        return nd.reshape(out, lead + (d,))


class GeM(Module):
    """Generalized-mean pooling with a learnable positive exponent.

    Features shift to >= 0 through softplus before pooling so fractional
    powers stay real.
    """

    def __init__(self, rng, dim, p_init=3.0, dtype=np.float32):
        super().__init__()
        self.dim = dim
        # parameterized as softplus(rho) to keep p > 0 under training
        rho = np.log(np.expm1(p_init))
        self.rho = Tensor(np.asarray([rho], dtype=dtype), requires_grad=True)
        self.proj = Linear(rng, dim, dim, dtype)

    def set_exponent(self, p):
        self.rho.data[...] = np.log(np.expm1(p))

    @property
    def exponent(self):
        return float(np.log1p(np.exp(self.rho.data[0])))

    def pooled(self, feats):
        """Pre-projection generalized mean over the set axis."""
        if feats.shape[-2] < 1:
            raise ValueError("gem: empty feature set")
        p = nd.softplus(self.rho)
        x = nd.softplus(feats)
        m = nd.mean_over_set(nd.pow_(x, p), axis=feats.ndim - 2)
        return nd.pow_(m, nd.pow_(p, -1.0))

    def __call__(self, feats):
        out = self.proj(self.pooled(feats))
        return nd.l2_normalize(out, axis=-1)


def netvlad(features, params: NetVlad):
    """Functional form over a list/array of D-vectors -> unit descriptor."""
    arr = _stack_features(features, params.dim)
    out = params(Tensor(arr[None]) if not isinstance(arr, Tensor) else arr)
    return nd.reshape(out, (params.dim,)) if out.ndim > 1 else out


def gem(features, params: GeM):
    arr = _stack_features(features, params.dim)
    out = params(Tensor(arr[None]) if not isinstance(arr, Tensor) else arr)
    return nd.reshape(out, (params.dim,)) if out.ndim > 1 else out


def _stack_features(features, dim):
    if isinstance(features, Tensor):
        return features
    if isinstance(features, np.ndarray):
        arr = features
    else:
        feats = [f.data if isinstance(f, Tensor) else np.asarray(f) for f in features]
        if not feats:
            raise ValueError("aggregator: empty feature set")
        arr = np.stack(feats)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"aggregator: expected (S,{dim}) features, got {arr.shape}")
    return arr.astype(np.float32)


class TgiAggregator(Module):
    """Builds the per-instance caption prefix [instance; K contexts; global]."""

    def __init__(self, rng, dim, k=16, clusters=8, kind="netvlad",
                 global_inputs="all", use_global=True, dtype=np.float32):
        super().__init__()
        if kind not in ("netvlad", "gem"):
            raise ValueError(f"unknown aggregator kind {kind!r}")
        if global_inputs not in ("all", "contexts", "single+contexts"):
            raise ValueError(f"unknown global_inputs {global_inputs!r}")
        self.dim = dim
        self.k = k
        self.kind = kind
        self.global_inputs = global_inputs
        self.use_global = use_global
        if use_global:
            self.pool = NetVlad(rng, dim, clusters, dtype) if kind == "netvlad" \
                else GeM(rng, dim, dtype=dtype)

    @property
    def prefix_length(self):
        return self.k + 2 if self.use_global else self.k + 1

    def forward_batch(self, v_o, v_c, pos_o, pos_c):
        """v_o (B,Mo,D), v_c (B,Mc,D) tensors; positions numpy.

        Returns (prefixes (B,Mo,P,D) tensor, slot types (P,) int array).
        """
        b, mo, d = v_o.shape
        mc = v_c.shape[1]
        if self.k > mc:
            raise ValueError(f"K={self.k} exceeds context query count {mc}")

        # K nearest context queries per instance, by position, stable ties
        diff = pos_o[:, :, None, :] - pos_c[:, None, :, :]
        d2 = (diff * diff).sum(-1)                               # (B,Mo,Mc)
        order = np.argsort(d2, axis=-1, kind="stable")[..., :self.k]
        flat_c = nd.reshape(v_c, (b * mc, d))
        idx = order + (np.arange(b, dtype=np.int64) * mc)[:, None, None]
        ctx = nd.reshape(nd.gather(flat_c, idx.reshape(-1), axis=0), (b, mo, self.k, d))

        inst = nd.reshape(v_o, (b, mo, 1, d))
        parts = [inst, ctx]
        types = [SLOT_INSTANCE] + [SLOT_CONTEXT] * self.k
        if self.use_global:
            if self.global_inputs == "all":
                g = self.pool(nd.concat([v_c, v_o], axis=1))      # (B,D)
                g = nd.reshape(g, (b, 1, 1, d))
                g = nd.add(g, Tensor(np.zeros((b, mo, 1, d), dtype=v_o.dtype)))
            elif self.global_inputs == "contexts":
                g = self.pool(v_c)
                g = nd.reshape(g, (b, 1, 1, d))
                g = nd.add(g, Tensor(np.zeros((b, mo, 1, d), dtype=v_o.dtype)))
            else:  # single+contexts: each instance pools with all contexts
                ctx_rep = nd.add(nd.reshape(v_c, (b, 1, mc, d)),
                                 Tensor(np.zeros((b, mo, mc, d), dtype=v_o.dtype)))
                joined = nd.concat([ctx_rep, nd.reshape(v_o, (b, mo, 1, d))], axis=2)
                g = self.pool(joined)                             # (B,Mo,D)
                g = nd.reshape(g, (b, mo, 1, d))
            parts.append(g)
            types.append(SLOT_GLOBAL)
        prefix = nd.concat(parts, axis=2)
        return prefix, np.asarray(types, dtype=np.int64)

    def aggregate(self, decoded_o, decoded_c, pos_o, pos_c):
        """Single-scene wrapper; returns (list of (P,D) tensors, slot types)."""
        mo, d = decoded_o.V.shape
        mc = decoded_c.V.shape[0]
        po = pos_o.data if isinstance(pos_o, Tensor) else np.asarray(pos_o)
        prefix, types = self.forward_batch(
            nd.reshape(decoded_o.V, (1, mo, d)), nd.reshape(decoded_c.V, (1, mc, d)),
            po[None], np.asarray(pos_c)[None])
        return [nd.reshape(prefix[0, i], (self.prefix_length, d)) for i in range(mo)], types
