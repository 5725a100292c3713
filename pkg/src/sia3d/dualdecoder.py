"""Parallel query decoders: instance and context, disjoint parameters.

Each decoder runs pre-norm transformer layers that self-attend over its
queries and cross-attend to the encoded scene tokens, with Fourier position
features added to queries and keys.  The instance decoder keeps a normalized
snapshot of every layer (the detection head supervises all of them); the
context decoder keeps only its final output.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .backbone import SceneTokens
from .nn import Module, ModuleList, TransformerDecoderLayer, LayerNorm, fourier_positions
from .queries import QuerySet

__all__ = ["DecoderConfig", "DecodedQueries", "QueryDecoder"]


@dataclass
class DecoderConfig:
    dim: int = 64
    heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.0


@dataclass
class DecodedQueries:
    kind: str
    V: "nd.Tensor"          # final decoded features
    layers: list            # per-layer normalized outputs (instance kind only)


class QueryDecoder(Module):
    def __init__(self, rng, cfg: DecoderConfig, kind, dtype=np.float32):
        super().__init__()
        if kind not in ("instance", "context"):
            raise ValueError(f"unknown decoder kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.layers = ModuleList([
            TransformerDecoderLayer(rng, cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dropout, dtype)
            for _ in range(cfg.n_layers)
        ])
        self.final_ln = LayerNorm(cfg.dim, dtype)

    def forward_batch(self, query_feats, query_pos, mem_feats, mem_pos,
                      include_inputs=False):
        """query_feats (B,M,D) tensor, query_pos (B,M,3) np, memory likewise."""
        if query_feats.shape[-1] != mem_feats.shape[-1]:
            raise nd.ShapeError(
                f"decode: query dim {query_feats.shape[-1]} != token dim {mem_feats.shape[-1]}")
        if self.cfg.n_layers == 0:
            return DecodedQueries(kind=self.kind, V=query_feats, layers=[])
        pos_q = fourier_positions(query_pos, self.cfg.dim)
        pos_m = fourier_positions(mem_pos, self.cfg.dim)
        x = query_feats
        snapshots = []
        if self.kind == "instance" and include_inputs:
            snapshots.append(self.final_ln(x))
        for layer in self.layers:
            x = layer(x, mem_feats, pos_q=pos_q, pos_mem=pos_m)
            if self.kind == "instance":
                snapshots.append(self.final_ln(x))
        final = snapshots[-1] if self.kind == "instance" else self.final_ln(x)
        return DecodedQueries(kind=self.kind, V=final, layers=snapshots)

    def decode(self, queries: QuerySet, tokens: SceneTokens):
        """Single-scene wrapper used by the narrow interface tests."""
        if queries.kind != self.kind:
            raise ValueError(f"decoder kind {self.kind} got {queries.kind} queries")
        m, d = queries.features.shape
        t, dm = tokens.f_enc.shape
        qf = nd.reshape(queries.features, (1, m, d))
        mf = nd.reshape(tokens.f_enc, (1, t, dm))
        out = self.forward_batch(qf, queries.positions_np()[None], mf, tokens.p_enc[None])
        return DecodedQueries(
            kind=out.kind,
            V=nd.reshape(out.V, (m, d)),
            layers=[nd.reshape(s, (m, d)) for s in out.layers],
        )
