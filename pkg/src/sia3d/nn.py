"""Learned-layer plumbing on top of ndtensor: modules, attention, encodings.

Modules register parameters and submodules through attribute assignment, so
named_parameters() walks them in deterministic insertion order.  Every
constructor takes an explicit numpy Generator and draws its initial values in
a fixed order, which is what makes whole-model builds reproducible.
"""

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

__all__ = [
    "Module", "ModuleList", "Linear", "LayerNorm", "Embedding", "Dropout",
    "MLP", "MultiHeadAttention", "TransformerEncoderLayer",
    "TransformerDecoderLayer", "fourier_positions",
]

NEG_INF = -1e9


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self.items = list(mods)
        for i, m in enumerate(self.items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = _xavier(rng, d_in, d_out, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return nd.add(nd.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return nd.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class Embedding(Module):
    def __init__(self, rng, count, dim, dtype=np.float32, scale=0.02):
        super().__init__()
        self.table = Tensor(rng.normal(0.0, scale, size=(count, dim)).astype(dtype),
                            requires_grad=True)

    def __call__(self, ids):
        return nd.embedding_lookup(self.table, ids)


class Dropout(Module):
    """Inverted dropout; identity when p == 0 or in eval mode."""

    def __init__(self, p=0.0):
        super().__init__()
        self.p = p
        self.rng = None

    def __call__(self, x):
        if not self.training or self.p <= 0.0 or self.rng is None:
            return x
        keep = 1.0 - self.p
        mask = (self.rng.uniform(size=x.shape) < keep).astype(x.dtype) / keep
        return nd.mul(x, Tensor(mask))


class MLP(Module):
    """Stack of Linear layers with relu between (not after the last)."""

    def __init__(self, rng, dims, dtype=np.float32, zero_init_last=False):
        super().__init__()
        layers = []
        for i in range(len(dims) - 1):
            layers.append(Linear(rng, dims[i], dims[i + 1], dtype,
                                 zero_init=(zero_init_last and i == len(dims) - 2)))
        self.layers = ModuleList(layers)

    def __call__(self, x):
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = nd.relu(x)
        return x


def fourier_positions(pos, dim, max_wavelength=20.0, min_wavelength=0.5):
    """Fixed sin/cos features of 3-d positions, shape (..., dim).

    Frequencies form a geometric spectrum between the two wavelengths; the
    shortest stays at room scale (0.5 m) so position dot-product kernels
    remain smooth enough for attention to exploit.  Positions are taken as
    plain numpy (no gradient flows through the encoding); unused trailing
    dims are zero when dim % 6 != 0.
    """
    pos = np.asarray(pos, dtype=np.float64)
    bands = dim // 6
    if bands == 0:
        return np.zeros(pos.shape[:-1] + (dim,), dtype=np.float32)
    if bands == 1:
        lams = np.asarray([max_wavelength])
    else:
        lams = max_wavelength * (min_wavelength / max_wavelength) ** \
            (np.arange(bands) / (bands - 1))
    freqs = 2.0 * np.pi / lams
    ang = pos[..., :, None] * freqs          # (..., 3, bands)
    feat = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, 2*bands)
    feat = feat.reshape(pos.shape[:-1] + (6 * bands,))
    if 6 * bands < dim:
        pad = np.zeros(pos.shape[:-1] + (dim - 6 * bands,))
        feat = np.concatenate([feat, pad], axis=-1)
    return feat.astype(np.float32)


class MultiHeadAttention(Module):
    """Standard multi-head attention over (B, L, D) tensors.

    pos_q / pos_k are additive positional features applied to queries and
    keys only (never values).  `allowed` is an optional boolean mask of shape
    (Lq, Lk) or (B, Lq, Lk); disallowed pairs get NEG_INF before softmax.
    The last forward's attention weights stay readable in .last_attn.
    """

    def __init__(self, rng, dim, heads, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, dtype)
        self.wk = Linear(rng, dim, dim, dtype)
        self.wv = Linear(rng, dim, dim, dtype)
        self.wo = Linear(rng, dim, dim, dtype)
        self.last_attn = None

    def _split(self, x, b, l):
        x = nd.reshape(x, (b, l, self.heads, self.head_dim))
        return nd.transpose(x, (0, 2, 1, 3))

    def __call__(self, q_in, k_in, v_in, pos_q=None, pos_k=None, allowed=None):
        b, lq, _ = q_in.shape
        lk = k_in.shape[1]
        dtype = q_in.dtype
        if pos_q is not None:
            q_in = nd.add(q_in, Tensor(np.asarray(pos_q, dtype=dtype)))
        if pos_k is not None:
            k_in = nd.add(k_in, Tensor(np.asarray(pos_k, dtype=dtype)))
        q = self._split(self.wq(q_in), b, lq)
        k = self._split(self.wk(k_in), b, lk)
        v = self._split(self.wv(v_in), b, lk)
        q = nd.mul(q, 1.0 / np.sqrt(self.head_dim))  # cheaper than scaling scores
        scores = nd.matmul(q, nd.transpose(k, (0, 1, 3, 2)))
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
            bias = np.where(allowed, 0.0, NEG_INF).astype(dtype)
            if bias.ndim == 2:
                bias = bias[None, None]
            else:
                bias = bias[:, None]
            scores = nd.add(scores, Tensor(bias))
        attn = nd.softmax(scores, axis=-1)
        self.last_attn = attn.data
        out = nd.matmul(attn, v)
        out = nd.transpose(out, (0, 2, 1, 3))
        out = nd.reshape(out, (b, lq, self.dim))
        return self.wo(out)


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim, heads, ffn_dim, dropout=0.0, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, ffn_dim, dtype)
        self.fc2 = Linear(rng, ffn_dim, dim, dtype)
        self.drop = Dropout(dropout)

    def __call__(self, x, pos=None, allowed=None):
        h = self.ln1(x)
        x = nd.add(x, self.drop(self.attn(h, h, h, pos_q=pos, pos_k=pos, allowed=allowed)))
        h = self.ln2(x)
        x = nd.add(x, self.drop(self.fc2(nd.relu(self.fc1(h)))))
        return x


class TransformerDecoderLayer(Module):
    """Pre-norm block: query self-attention, cross-attention to memory, FFN."""

    def __init__(self, rng, dim, heads, ffn_dim, dropout=0.0, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(rng, dim, heads, dtype)
        self.ln3 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, ffn_dim, dtype)
        self.fc2 = Linear(rng, ffn_dim, dim, dtype)
        self.drop = Dropout(dropout)

    def __call__(self, x, memory, pos_q=None, pos_mem=None):
        h = self.ln1(x)
        x = nd.add(x, self.drop(self.self_attn(h, h, h, pos_q=pos_q, pos_k=pos_q)))
        h = self.ln2(x)
        x = nd.add(x, self.drop(self.cross_attn(h, memory, memory, pos_q=pos_q, pos_k=pos_mem)))
        h = self.ln3(x)
        x = nd.add(x, self.drop(self.fc2(nd.relu(self.fc1(h)))))
        return x
