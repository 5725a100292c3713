"""Context and instance query generation from encoded scene tokens.

Context queries: FPS seeds on the token positions, then set abstraction with
a wide radius.  Instance queries: a vote FFN shifts every token toward an
object center, then set abstraction with a tight radius runs over the shifted
field, so features are extracted at the candidate coordinates after voting.
The two paths share no learned parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .backbone import SceneTokens, REFERENCE_ROOM_DIAG, _flat_group_gather
from .geometry import ball_query_batch, fps_batch, points_in_box
from .nn import Module, MLP

__all__ = ["QueryConfig", "QuerySet", "VoteField", "VoteNet", "SetAbstraction",
           "ContextQueryGenerator", "InstanceQueryGenerator", "vote_loss"]


@dataclass
class QueryConfig:
    dim: int = 64
    m_context: int = 64
    m_instance: int = 32
    context_radius: float = 1.2
    context_nsample: int = 64
    instance_radius: float = 0.3
    instance_nsample: int = 16
    scale_radii_to_room: bool = True


@dataclass
class QuerySet:
    """Positions and features of either query kind.

    positions is numpy (M,3) for context queries and a Tensor (M,3) for
    instance queries (vote coordinates carry gradient).  origin_index exists
    only for the instance kind.
    """

    kind: str
    positions: object
    features: "Tensor"
    origin_index: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("instance", "context"):
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.kind == "context" and self.origin_index is not None:
            raise ValueError("context queries must not carry origin_index")
        if self.kind == "instance" and self.origin_index is None:
            raise ValueError("instance queries require origin_index")

    def positions_np(self):
        return self.positions.data if isinstance(self.positions, Tensor) else self.positions


@dataclass
class VoteField:
    """Token positions and features after the learned shift."""

    p_vote: "Tensor"   # (B, T, 3) or (T, 3)
    f_vote: "Tensor"   # (B, T, D) or (T, D)
    p_enc: np.ndarray  # pre-shift positions, same leading shape


class VoteNet(Module):
    """FFN_o: f_enc -> [delta position ; delta feature], zero at init."""

    def __init__(self, rng, dim, dtype=np.float32):
        super().__init__()
        self.ffn = MLP(rng, (dim, dim, dim, 3 + dim), dtype, zero_init_last=True)
        self.dim = dim

    def forward_batch(self, positions, feats):
        """positions (B,T,3) np, feats (B,T,D) tensor -> VoteField."""
        delta = self.ffn(feats)
        dp = delta[..., :3]
        df = delta[..., 3:]
        p_vote = nd.add(Tensor(positions.astype(feats.dtype)), dp)
        f_vote = nd.add(feats, df)
        return VoteField(p_vote=p_vote, f_vote=f_vote, p_enc=positions)

    def vote(self, tokens: SceneTokens):
        t, d = tokens.f_enc.shape
        vf = self.forward_batch(tokens.p_enc[None], nd.reshape(tokens.f_enc, (1, t, d)))
        return VoteField(p_vote=nd.reshape(vf.p_vote, (t, 3)),
                         f_vote=nd.reshape(vf.f_vote, (t, d)),
                         p_enc=tokens.p_enc)


class SetAbstraction(Module):
    """FPS + ball grouping + shared MLP + max-pool over each group.

    Grouping indices come from the (detached) positions; the relative
    positions and grouped features stay differentiable when the inputs are
    tensors.
    """

    def __init__(self, rng, dim_in, dim, m_out, radius, nsample, dtype=np.float32):
        super().__init__()
        self.mlp = MLP(rng, (3 + dim_in, dim, dim), dtype)
        self.m_out = m_out
        self.radius = radius
        self.nsample = nsample
        self.dtype = dtype

    def forward_batch(self, positions, feats, seeds, room_diags, scale_radii=True):
        """positions (B,T,3) np or Tensor, feats (B,T,D) Tensor.

        Returns (center positions, features (B,M,D) Tensor, fps index (B,M)).
        Center positions are a Tensor slice when positions is a Tensor.
        """
        pos_np = positions.data if isinstance(positions, Tensor) else positions
        b, t, _ = pos_np.shape
        if self.m_out > t:
            raise ValueError(f"set abstraction: m_out {self.m_out} exceeds {t} points")
        radii = [self.radius * d / REFERENCE_ROOM_DIAG if scale_radii else self.radius
                 for d in room_diags]
        fps_idx = fps_batch(pos_np, self.m_out, np.asarray(seeds, dtype=np.int64) % t)
        centers_np = np.take_along_axis(pos_np, fps_idx[..., None], axis=1)
        groups, _ = ball_query_batch(centers_np, pos_np, radii, self.nsample)

        gfeat = _flat_group_gather(feats, groups)
        if isinstance(positions, Tensor):
            gpos = _flat_group_gather(positions, groups)
            centers = _flat_group_gather(positions, fps_idx[..., None])
            centers = nd.reshape(centers, (b, self.m_out, 3))
            rel = nd.sub(gpos, nd.reshape(centers, (b, self.m_out, 1, 3)))
            inp = nd.concat([rel, gfeat], axis=-1)
        else:
            flat = pos_np.reshape(b * t, 3)
            off = (np.arange(b, dtype=np.int64) * t)[:, None, None]
            gpos = flat[(groups + off).reshape(-1)].reshape(b, self.m_out, self.nsample, 3)
            centers = centers_np
            rel = (gpos - centers[:, :, None, :]).astype(self.dtype)
            inp = nd.concat([Tensor(rel), gfeat], axis=-1)
        h = nd.relu(self.mlp(inp))
        out = nd.max_over_set(h, axis=2)
        return centers, out, fps_idx


class ContextQueryGenerator(Module):
    def __init__(self, rng, cfg: QueryConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.sa = SetAbstraction(rng, cfg.dim, cfg.dim, cfg.m_context,
                                 cfg.context_radius, cfg.context_nsample, dtype)

    def forward_batch(self, positions, feats, seeds, room_diags):
        centers, out, _ = self.sa.forward_batch(positions, feats, seeds, room_diags,
                                                scale_radii=self.cfg.scale_radii_to_room)
        return centers, out

    def generate(self, tokens: SceneTokens, seed=0):
        t, d = tokens.f_enc.shape
        centers, out = self.forward_batch(tokens.p_enc[None], nd.reshape(tokens.f_enc, (1, t, d)),
                                          [seed], [tokens.room_diag])
        return QuerySet(kind="context", positions=centers[0],
                        features=nd.reshape(out, (self.cfg.m_context, d)))


class InstanceQueryGenerator(Module):
    def __init__(self, rng, cfg: QueryConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.sa = SetAbstraction(rng, cfg.dim, cfg.dim, cfg.m_instance,
                                 cfg.instance_radius, cfg.instance_nsample, dtype)

    def forward_batch(self, votefield: VoteField, seeds, room_diags):
        centers, out, fps_idx = self.sa.forward_batch(
            votefield.p_vote, votefield.f_vote, seeds, room_diags,
            scale_radii=self.cfg.scale_radii_to_room)
        return centers, out, fps_idx

    def generate(self, votefield: VoteField, seed=0, room_diag=REFERENCE_ROOM_DIAG):
        t, d = votefield.f_vote.shape
        vf = VoteField(p_vote=nd.reshape(votefield.p_vote, (1, t, 3)),
                       f_vote=nd.reshape(votefield.f_vote, (1, t, d)),
                       p_enc=votefield.p_enc[None])
        centers, out, fps_idx = self.forward_batch(vf, [seed], [room_diag])
        return QuerySet(kind="instance",
                        positions=nd.reshape(centers, (self.cfg.m_instance, 3)),
                        features=nd.reshape(out, (self.cfg.m_instance, d)),
                        origin_index=fps_idx[0])


def vote_loss(votefield: VoteField, gt_instances_per_scene, normalize="all"):
    """L1 pull of shifted points toward the center of their containing box.

    Every encoded point inside a ground-truth box contributes the L1 distance
    of its shifted position to that box center.  normalize="all" divides by
    the number of shifted points per scene (all of them); "positive" divides
    by the number of contributing points (the VoteNet convention, which keeps
    the per-vote gradient scale independent of how much of the scene is
    background).  Batch inputs average over scenes.  Returns a scalar Tensor
    (0 when no point is inside any box).
    """
    if normalize not in ("all", "positive"):
        raise ValueError(f"unknown vote_loss normalization {normalize!r}")
    p_vote = votefield.p_vote
    p_enc = votefield.p_enc
    if p_vote.ndim == 2:
        p_vote = nd.reshape(p_vote, (1,) + p_vote.shape)
        p_enc = p_enc[None]
        gt_instances_per_scene = [gt_instances_per_scene]
    b, t, _ = p_enc.shape

    rows, centers = [], []
    for i, instances in enumerate(gt_instances_per_scene):
        for inst in instances:
            inside = np.nonzero(points_in_box(p_enc[i], inst.box))[0]
            if inside.size:
                rows.append(inside + i * t)
                centers.append(np.broadcast_to(np.asarray(inst.box.center), (inside.size, 3)))
    if not rows:
        return nd.sum_(nd.mul(p_vote, 0.0))
    rows = np.concatenate(rows)
    centers = np.concatenate(centers).astype(p_vote.dtype)
    flat = nd.reshape(p_vote, (b * t, 3))
    picked = nd.gather(flat, rows, axis=0)
    diff = nd.sub(picked, Tensor(centers))
    denom = rows.size if normalize == "positive" else t * b
    return nd.mul(nd.l1_norm(diff), 1.0 / denom)
