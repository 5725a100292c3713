"""Scene tokenizer (set abstraction) and masked transformer encoder.

The tokenizer turns a raw point cloud into T tokens: FPS centers, ball-query
grouping, a shared two-layer MLP on [relative position ; point feature], and
a max-pool per group.  The encoder runs self-attention over the tokens with
the first layer masked to spatially nearby pairs; positions ride along
unchanged.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .geometry import ball_query_batch, fps_batch, pairwise_sq_dist
from .nn import Module, ModuleList, MLP, TransformerEncoderLayer, LayerNorm, fourier_positions

__all__ = ["EncoderConfig", "SceneTokens", "SceneTokenizer", "SceneEncoder", "Backbone"]

REFERENCE_ROOM_DIAG = 9.0  # meters; radii scale by room_diag / this


@dataclass
class EncoderConfig:
    t_tokens: int = 256
    dim: int = 64
    heads: int = 4
    n_layers: int = 3          # first layer masked, remainder unmasked
    mask_radius: float = None  # None: 0.8 * room_diag / sqrt(T)
    ffn_dim: int = 128
    dropout: float = 0.0
    tokenize_radius: float = 0.4
    tokenize_nsample: int = 32
    in_features: int = 3

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")

    def effective_mask_radius(self, room_diag):
        if self.mask_radius is not None:
            return self.mask_radius
        return 0.8 * room_diag / np.sqrt(self.t_tokens)


@dataclass
class SceneTokens:
    """Aligned token positions and features for one scene."""

    p_enc: np.ndarray        # (T, 3)
    f_enc: "nd.Tensor"       # (T, D)
    room_diag: float = REFERENCE_ROOM_DIAG


def _flat_group_gather(feats, groups):
    """feats (B, N, D) tensor, groups (B, M, ns) int -> (B, M, ns, D) tensor."""
    b, n, d = feats.shape
    _, m, ns = groups.shape
    flat = nd.reshape(feats, (b * n, d))
    idx = groups + (np.arange(b, dtype=np.int64) * n)[:, None, None]
    out = nd.gather(flat, idx.reshape(-1), axis=0)
    return nd.reshape(out, (b, m, ns, d))


class SceneTokenizer(Module):
    """Groups points around FPS centers and pools a shared MLP per group.

    The MLP input per grouped point is [relative position ; height above the
    floor ; point features]; the height channel is derived from the cloud
    itself (z minus the 1st percentile z) and is what separates flat
    furniture classes that look alike in a local patch.
    """

    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.mlp = MLP(rng, (4 + cfg.in_features, cfg.dim, cfg.dim), dtype)

    def forward_batch(self, positions, features, seeds, room_diags):
        """positions (B,N,3), features (B,N,F) numpy -> ((B,T,3) np, (B,T,D) tensor)."""
        cfg = self.cfg
        b, n, _ = positions.shape
        if n < cfg.t_tokens:
            raise ValueError(f"tokenize: {n} points < {cfg.t_tokens} tokens")
        radii = [cfg.tokenize_radius * d / REFERENCE_ROOM_DIAG for d in room_diags]
        fps_idx = fps_batch(positions, cfg.t_tokens,
                            np.asarray(seeds, dtype=np.int64) % n)
        centers = np.take_along_axis(positions, fps_idx[..., None], axis=1)
        groups, _ = ball_query_batch(centers, positions, radii, cfg.tokenize_nsample)
        rel = _group_np(positions, groups) - centers[:, :, None, :]
        floor = np.percentile(positions[..., 2], 1.0, axis=1)
        height = positions[..., 2] - floor[:, None]
        gfeat = _group_np(np.concatenate([height[..., None], features], axis=-1), groups)
        inp = np.concatenate([rel, gfeat], axis=-1).astype(self.dtype)
        h = nd.relu(self.mlp(nd.Tensor(inp)))
        tokens = nd.max_over_set(h, axis=2)
        return centers, tokens


def _group_np(arr, groups):
    """arr (B,N,C), groups (B,M,ns) -> (B,M,ns,C), pure numpy."""
    b, n, c = arr.shape
    flat = arr.reshape(b * n, c)
    idx = groups + (np.arange(b, dtype=np.int64) * n)[:, None, None]
    return flat[idx.reshape(-1)].reshape(groups.shape + (c,))


class SceneEncoder(Module):
    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.layers = ModuleList([
            TransformerEncoderLayer(rng, cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dropout, dtype)
            for _ in range(cfg.n_layers)
        ])
        self.final_ln = LayerNorm(cfg.dim, dtype)

    def forward_batch(self, positions, feats, room_diags):
        """positions (B,T,3) np, feats (B,T,D) tensor -> (B,T,D) tensor."""
        cfg = self.cfg
        b, t, _ = positions.shape
        pos = fourier_positions(positions, cfg.dim)
        masks = None
        if cfg.n_layers > 0:
            masks = np.empty((b, t, t), dtype=bool)
            for i in range(b):
                r = cfg.effective_mask_radius(room_diags[i])
                d2 = pairwise_sq_dist(positions[i], positions[i])
                m = d2 <= r * r
                np.fill_diagonal(m, True)   # self always attended
                masks[i] = m
        x = feats
        for li, layer in enumerate(self.layers):
            x = layer(x, pos=pos, allowed=masks if li == 0 else None)
        return self.final_ln(x)


class Backbone(Module):
    """Tokenizer + encoder with the single-scene interface used by tests."""

    def __init__(self, rng, cfg: EncoderConfig = None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.tokenizer = SceneTokenizer(rng, self.cfg, dtype)
        self.encoder = SceneEncoder(rng, self.cfg, dtype)

    def tokenize(self, scene, seed=0):
        """Point cloud -> pre-encoder SceneTokens."""
        pos = np.asarray(scene.points, dtype=np.float64)[None]
        feat = np.asarray(scene.features, dtype=np.float64)[None]
        diag = scene.room_diag() if hasattr(scene, "room_diag") else REFERENCE_ROOM_DIAG
        centers, tokens = self.tokenizer.forward_batch(pos, feat, [seed], [diag])
        return SceneTokens(p_enc=centers[0], f_enc=nd.reshape(tokens, tokens.shape[1:]),
                           room_diag=diag)

    def encode(self, tokens: SceneTokens):
        """Masked self-attention over tokens; positions pass through unchanged."""
        t, d = tokens.f_enc.shape
        feats = nd.reshape(tokens.f_enc, (1, t, d))
        out = self.encoder.forward_batch(tokens.p_enc[None], feats, [tokens.room_diag])
        return SceneTokens(p_enc=tokens.p_enc, f_enc=nd.reshape(out, (t, d)),
                           room_diag=tokens.room_diag)
