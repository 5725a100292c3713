"""Detection head (shared across decoder layers) and the caption head.

Detection: per-query FFNs predict a center offset from the query position,
a positive size (softplus), and class logits with one extra "no object"
class.  The same FFN parameters apply to every decoder layer's output.

Captioning: a decoder-only transformer consumes [visual prefix ; [BOS] ;
tokens...].  Prefix entries are projected from the model width by one shared
linear map and tagged with slot-type embeddings; text positions get learned
positional embeddings and a causal mask.  One head serves both the
single-token instance prefix and the K+2 aggregated prefix.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .nn import Module, ModuleList, Linear, LayerNorm, MLP, MultiHeadAttention, Embedding

__all__ = ["DetectionOutput", "DetectionHead", "CaptionHead", "FinalCaption",
           "caption_greedy", "caption_beam", "late_aggregate"]


@dataclass
class DetectionOutput:
    """Per-layer box predictions for instance queries.

    centers/sizes/logits are lists (one entry per decoder layer) of tensors
    shaped (B, M, 3) / (B, M, 3) / (B, M, n_classes+1).
    """

    centers: list
    sizes: list
    logits: list
    n_classes: int

    @property
    def n_layers(self):
        return len(self.centers)


class DetectionHead(Module):
    def __init__(self, rng, dim, n_classes, dtype=np.float32):
        super().__init__()
        self.n_classes = n_classes
        self.center_ffn = MLP(rng, (dim, dim, 3), dtype)
        self.size_ffn = MLP(rng, (dim, dim, 3), dtype)
        self.class_ffn = MLP(rng, (dim, dim, n_classes + 1), dtype)

    def forward_layers(self, layer_feats, positions):
        """layer_feats: list of (B,M,D) tensors; positions (B,M,3) tensor or np."""
        pos = positions if isinstance(positions, Tensor) else Tensor(np.asarray(positions))
        centers, sizes, logits = [], [], []
        for feats in layer_feats:
            centers.append(nd.add(pos, self.center_ffn(feats)))
            sizes.append(nd.softplus(self.size_ffn(feats)))
            logits.append(self.class_ffn(feats))
        return DetectionOutput(centers=centers, sizes=sizes, logits=logits,
                               n_classes=self.n_classes)

    def detect(self, decoded, positions):
        """Single-scene interface over DecodedQueries (instance kind only)."""
        if decoded.kind != "instance":
            raise ValueError(f"detection head needs instance queries, got {decoded.kind}")
        layers = decoded.layers if decoded.layers else [decoded.V]
        m, d = layers[0].shape
        pos = positions if isinstance(positions, Tensor) else Tensor(np.asarray(positions))
        pos = nd.reshape(pos, (1, m, 3))
        out = self.forward_layers([nd.reshape(f, (1, m, d)) for f in layers], pos)
        return DetectionOutput(
            centers=[nd.reshape(c, (m, 3)) for c in out.centers],
            sizes=[nd.reshape(s, (m, 3)) for s in out.sizes],
            logits=[nd.reshape(l, (m, self.n_classes + 1)) for l in out.logits],
            n_classes=self.n_classes)


class _CaptionBlock(Module):
    def __init__(self, rng, dim, heads, dtype):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, 4 * dim, dtype)
        self.fc2 = Linear(rng, 4 * dim, dim, dtype)

    def __call__(self, x, allowed):
        h = self.ln1(x)
        x = nd.add(x, self.attn(h, h, h, allowed=allowed))
        h = self.ln2(x)
        x = nd.add(x, self.fc2(nd.gelu(self.fc1(h))))
        return x


class CaptionHead(Module):
    """Decoder-only transformer over [prefix ; BOS ; tokens]."""

    def __init__(self, rng, vocab_size, model_dim, embed_dim=64, n_layers=2,
                 heads=4, max_len=16, dtype=np.float32):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.token_embed = Embedding(rng, vocab_size, embed_dim, dtype)
        self.pos_embed = Embedding(rng, max_len + 1, embed_dim, dtype)   # BOS + tokens
        self.slot_embed = Embedding(rng, 3, embed_dim, dtype)            # prefix roles
        self.prefix_proj = Linear(rng, model_dim, embed_dim, dtype)
        self.blocks = ModuleList([_CaptionBlock(rng, embed_dim, heads, dtype)
                                  for _ in range(n_layers)])
        self.final_ln = LayerNorm(embed_dim, dtype)
        self.out_proj = Linear(rng, embed_dim, vocab_size, dtype)
        self.bos_id = 1
        self.eos_id = 2

    @staticmethod
    def _mask(p, l):
        n = p + l
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:p, :p] = True                      # prefix tokens see each other
        allowed[p:, :p] = True                      # text sees the whole prefix
        allowed[p:, p:] = np.tril(np.ones((l, l), dtype=bool))  # causal over text
        return allowed

    def forward_logits(self, prefix, slot_types, text_ids):
        """prefix (B,P,D) tensor, slot_types (P,), text_ids (B,L) ints with BOS
        in column 0.  Returns logits (B,L,V): position t predicts token t+1.
        """
        if isinstance(prefix, np.ndarray):
            prefix = Tensor(prefix)
        b, p, _ = prefix.shape
        l = text_ids.shape[1]
        pv = nd.add(self.prefix_proj(prefix), self.slot_embed(np.asarray(slot_types)))
        tv = nd.add(self.token_embed(text_ids), self.pos_embed(np.arange(l)))
        x = nd.concat([pv, tv], axis=1)
        allowed = self._mask(p, l)
        for blk in self.blocks:
            x = blk(x, allowed)
        x = self.final_ln(x)
        text_part = x[:, p:, :]
        return self.out_proj(text_part)


def _prefix_batch(prefix):
    """Accepts (P,D) or (B,P,D) tensor/array; returns (B,P,D) tensor."""
    if isinstance(prefix, np.ndarray):
        prefix = Tensor(prefix)
    if prefix.ndim == 2:
        prefix = nd.reshape(prefix, (1,) + prefix.shape)
    return prefix


def caption_greedy(prefix, slot_types, head: CaptionHead, max_len=None):
    """Argmax decoding from BOS until EOS or max_len; returns token ids
    (EOS excluded).  Ties resolve to the lowest token id."""
    out = caption_greedy_batch(_prefix_batch(prefix), slot_types, head, max_len)
    return out[0]


def caption_greedy_batch(prefixes, slot_types, head: CaptionHead, max_len=None):
    max_len = head.max_len if max_len is None else max_len
    prefixes = _prefix_batch(prefixes)
    b = prefixes.shape[0]
    text = np.full((b, 1), head.bos_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outs = [[] for _ in range(b)]
    for _ in range(max_len):
        logits = head.forward_logits(prefixes, slot_types, text)
        nxt = logits.data[:, -1, :].argmax(axis=1)   # argmax takes the lowest id on ties
        for i in range(b):
            if done[i]:
                continue
            if nxt[i] == head.eos_id:
                done[i] = True
            else:
                outs[i].append(int(nxt[i]))
        if done.all():
            break
        text = np.concatenate([text, nxt[:, None]], axis=1)
    return outs


def caption_beam(prefix, slot_types, head: CaptionHead, beam_k, max_len=None):
    """Length-unnormalized beam search.

    Returns up to beam_k (token list, total log-prob) pairs sorted by
    descending log-prob; beam_k=1 reproduces greedy decoding exactly.
    """
    if beam_k < 1:
        raise ValueError(f"beam_k must be >= 1, got {beam_k}")
    max_len = head.max_len if max_len is None else max_len
    prefix = _prefix_batch(prefix)
    beams = [([], 0.0)]         # (tokens so far, logprob), all live
    completed = []
    for _ in range(max_len):
        live_texts = np.asarray(
            [[head.bos_id] + toks for toks, _ in beams], dtype=np.int64)
        reps = nd.concat([prefix] * len(beams), axis=0) if len(beams) > 1 else prefix
        logits = head.forward_logits(reps, slot_types, live_texts)
        logp = _log_softmax_np(logits.data[:, -1, :])
        scores = np.asarray([s for _, s in beams])[:, None] + logp
        flat = scores.ravel()
        order = np.argsort(-flat, kind="stable")[: beam_k * 2]
        nxt = []
        for fi in order:
            bi, tok = divmod(int(fi), head.vocab_size)
            toks, _ = beams[bi]
            sc = float(flat[fi])
            if tok == head.eos_id:
                completed.append((list(toks), sc))
            else:
                nxt.append((toks + [tok], sc))
            if len(nxt) >= beam_k:
                break
        beams = nxt[:beam_k]
        if not beams:
            break
        if len(completed) >= beam_k:
            kth_done = sorted(completed, key=lambda x: -x[1])[beam_k - 1][1]
            # extensions only lower a total log-prob, so live beams below the
            # k-th completed score can never enter the result
            if max(s for _, s in beams) <= kth_done:
                break
    for toks, sc in beams:
        completed.append((toks, sc))     # ran out of length without EOS
    completed.sort(key=lambda x: (-x[1], x[0]))
    return completed[:beam_k]


def _log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class FinalCaption:
    """The late-aggregated caption: instance part, context part, and their
    plain concatenation (specials stripped at the join, no re-ranking)."""

    instance_tokens: list
    context_tokens: list

    @property
    def final_tokens(self):
        return list(self.instance_tokens) + list(self.context_tokens)


_SPECIAL_IDS = (0, 1, 2)  # PAD, BOS, EOS


def late_aggregate(instance_caption, context_caption):
    """Concatenate the two decoded captions of one object."""
    inst = [t for t in instance_caption if t not in _SPECIAL_IDS]
    ctx = [t for t in context_caption if t not in _SPECIAL_IDS]
    return FinalCaption(instance_tokens=inst, context_tokens=ctx)
