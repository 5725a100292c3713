"""Full pipeline assembly: encoder, dual query paths, heads, prediction.

The model owns every learned component and exposes two parameter views:
the detector group (everything trained by the detection objective) and the
caption group (caption head, prefix projection, aggregator, context path),
which train at different learning rates after pretraining.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .backbone import EncoderConfig, SceneTokenizer, SceneEncoder
from .config import TrainConfig
from .dualdecoder import DecoderConfig, QueryDecoder
from .geometry import Box3D, nms
from .heads import (DetectionHead, CaptionHead, caption_greedy_batch, late_aggregate)
from .nn import Module
from .queries import QueryConfig, VoteNet, ContextQueryGenerator, InstanceQueryGenerator, VoteField
from .scenegen import CLASS_NAMES
from .tgi import TgiAggregator, SLOT_INSTANCE
from .evalkit import Proposal

__all__ = ["SiaModel", "BatchForward", "PredictedObject"]


@dataclass
class BatchForward:
    """Everything the losses need from one batched forward pass."""

    positions: np.ndarray          # (B, T, 3) token positions
    votefield: "VoteField"
    instance_pos: "Tensor"         # (B, Mo, 3) vote coordinates of instance queries
    decoded_instance: object       # DecodedQueries, batched
    detection: object              # DetectionOutput, batched per layer
    decoded_context: object = None
    context_pos: np.ndarray = None
    prefixes: "Tensor" = None      # (B, Mo, P, D)
    slot_types: np.ndarray = None


@dataclass
class PredictedObject:
    box: Box3D
    confidence: float
    class_id: int
    instance_tokens: list
    context_tokens: list
    final_tokens: list


class SiaModel(Module):
    def __init__(self, cfg: TrainConfig, vocab, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.np_dtype = dtype

        enc_cfg = EncoderConfig(
            t_tokens=cfg.t_tokens, dim=cfg.dim, heads=cfg.heads,
            n_layers=cfg.enc_layers,
            mask_radius=None if cfg.mask_radius == 0 else cfg.mask_radius,
            ffn_dim=cfg.ffn_dim, dropout=cfg.dropout,
            tokenize_radius=cfg.tokenize_radius, tokenize_nsample=cfg.tokenize_nsample)
        q_cfg = QueryConfig(
            dim=cfg.dim, m_context=cfg.m_context, m_instance=cfg.m_instance,
            context_radius=cfg.context_radius, context_nsample=cfg.context_nsample,
            instance_radius=cfg.instance_radius, instance_nsample=cfg.instance_nsample,
            scale_radii_to_room=cfg.scale_radii)
        dec_cfg = DecoderConfig(dim=cfg.dim, heads=cfg.heads, n_layers=cfg.dec_layers,
                                ffn_dim=cfg.ffn_dim, dropout=cfg.dropout)

        self.tokenizer = SceneTokenizer(rng, enc_cfg, dtype)
        self.encoder = SceneEncoder(rng, enc_cfg, dtype)
        self.votenet = VoteNet(rng, cfg.dim, dtype)
        self.instance_gen = InstanceQueryGenerator(rng, q_cfg, dtype)
        self.instance_decoder = QueryDecoder(rng, dec_cfg, "instance", dtype)
        self.detection_head = DetectionHead(rng, cfg.dim, len(CLASS_NAMES), dtype)
        if not cfg.instance_only:
            self.context_gen = ContextQueryGenerator(rng, q_cfg, dtype)
            self.context_decoder = QueryDecoder(rng, dec_cfg, "context", dtype)
            self.aggregator = TgiAggregator(
                rng, cfg.dim, k=cfg.k_nearest, clusters=cfg.clusters,
                kind=cfg.aggregator, global_inputs=cfg.global_inputs,
                use_global=not cfg.no_global, dtype=dtype)
        else:
            self.context_gen = None
            self.context_decoder = None
            self.aggregator = None
        self.caption_head = CaptionHead(
            rng, len(vocab), cfg.dim, embed_dim=cfg.cap_dim,
            n_layers=cfg.cap_layers, heads=cfg.cap_heads, max_len=cfg.max_len,
            dtype=dtype)
        self.n_classes = len(CLASS_NAMES)

    # -- parameter groups ---------------------------------------------------
    def detector_parameters(self):
        mods = [self.tokenizer, self.encoder, self.votenet, self.instance_gen,
                self.instance_decoder, self.detection_head]
        return [p for m in mods for p in m.parameters()]

    def caption_parameters(self):
        mods = [self.caption_head]
        if self.context_gen is not None:
            mods += [self.context_gen, self.context_decoder, self.aggregator]
        return [p for m in mods for p in m.parameters()]

    def caption_head_parameters(self):
        return self.caption_head.parameters()

    def module_param_counts(self):
        out = {}
        for name, mod in self._modules.items():
            out[name] = mod.param_count()
        return out

    def caption_prefix_length(self, kind="context"):
        if kind == "instance":
            return 1
        if self.aggregator is None:
            raise ValueError("no context prefix in instance_only wiring")
        return self.aggregator.prefix_length

    # -- forward -------------------------------------------------------------
    def forward_batch(self, scenes, fps_seeds=None):
        """scenes: list of SyntheticScene with equal point counts."""
        b = len(scenes)
        n = scenes[0].n_points
        if any(s.n_points != n for s in scenes):
            raise ValueError("forward_batch: scenes must share a point count")
        if fps_seeds is None:
            fps_seeds = np.zeros((b, 3), dtype=np.int64)
        pts = np.stack([s.points for s in scenes]).astype(np.float64)
        feats = np.stack([s.features for s in scenes]).astype(np.float64)
        diags = [s.room_diag() for s in scenes]

        pos, tokens = self.tokenizer.forward_batch(pts, feats, fps_seeds[:, 0], diags)
        enc = self.encoder.forward_batch(pos, tokens, diags)
        votefield = self.votenet.forward_batch(pos, enc)
        inst_pos, inst_feats, _ = self.instance_gen.forward_batch(
            votefield, fps_seeds[:, 1], diags)
        dec_o = self.instance_decoder.forward_batch(inst_feats, inst_pos.data, enc, pos,
                                                    include_inputs=self.cfg.det_on_queries)
        det = self.detection_head.forward_layers(dec_o.layers, inst_pos)

        out = BatchForward(positions=pos, votefield=votefield, instance_pos=inst_pos,
                           decoded_instance=dec_o, detection=det)
        if self.context_gen is not None:
            ctx_pos, ctx_feats = self.context_gen.forward_batch(pos, enc, fps_seeds[:, 2], diags)
            dec_c = self.context_decoder.forward_batch(ctx_feats, ctx_pos, enc, pos)
            prefixes, slot_types = self.aggregator.forward_batch(
                dec_o.V, dec_c.V, inst_pos.data, ctx_pos)
            out.decoded_context = dec_c
            out.context_pos = ctx_pos
            out.prefixes = prefixes
            out.slot_types = slot_types
        return out

    # -- inference -------------------------------------------------------------
    def predict(self, scene, fps_seeds=None, max_proposals=None, decode_captions=True):
        """Detect, NMS-filter, and caption one scene; returns PredictedObjects
        sorted by descending confidence."""
        was_training = self.training
        self.eval()
        try:
            fw = self.forward_batch([scene], fps_seeds=np.zeros((1, 3), dtype=np.int64)
                                    if fps_seeds is None else fps_seeds)
            centers = fw.detection.centers[-1].data[0]
            sizes = np.maximum(fw.detection.sizes[-1].data[0], 1e-4)
            logits = fw.detection.logits[-1].data[0]
            probs = _softmax_np(logits)
            conf = 1.0 - probs[:, self.n_classes]
            cls = probs[:, :self.n_classes].argmax(axis=1)

            keep = np.nonzero(conf >= self.cfg.conf_floor)[0]
            boxes = [Box3D(tuple(centers[i]), tuple(sizes[i])) for i in keep]
            kept_local = nms(list(zip(boxes, conf[keep])), self.cfg.nms_iou)
            kept = [int(keep[i]) for i in kept_local]
            if max_proposals is not None:
                order = np.argsort(-conf[kept], kind="stable")
                kept = [kept[i] for i in order[:max_proposals]]
            if not kept:
                return []

            if decode_captions:
                v_o = fw.decoded_instance.V
                d = v_o.shape[-1]
                inst_prefixes = nd.reshape(
                    nd.gather(nd.reshape(v_o, (-1, d)), np.asarray(kept), axis=0),
                    (len(kept), 1, d))
                inst_caps = caption_greedy_batch(
                    inst_prefixes, np.asarray([SLOT_INSTANCE]), self.caption_head)
                if fw.prefixes is not None:
                    p = fw.prefixes.shape[2]
                    ctx_prefixes = nd.reshape(
                        nd.gather(nd.reshape(fw.prefixes, (-1, p, d)), np.asarray(kept), axis=0),
                        (len(kept), p, d))
                    ctx_caps = caption_greedy_batch(ctx_prefixes, fw.slot_types,
                                                    self.caption_head)
                else:
                    ctx_caps = [[] for _ in kept]
            else:
                inst_caps = [[] for _ in kept]
                ctx_caps = [[] for _ in kept]

            out = []
            for j, i in enumerate(kept):
                fc = late_aggregate(inst_caps[j], ctx_caps[j])
                out.append(PredictedObject(
                    box=Box3D(tuple(centers[i]), tuple(sizes[i])),
                    confidence=float(conf[i]), class_id=int(cls[i]),
                    instance_tokens=fc.instance_tokens,
                    context_tokens=fc.context_tokens,
                    final_tokens=fc.final_tokens))
            out.sort(key=lambda o: -o.confidence)
            return out
        finally:
            self.train(was_training)

    def proposals_for(self, scene, **kw):
        """predict() repackaged as evalkit Proposals with caption strings."""
        objs = self.predict(scene, **kw)
        return [Proposal(scene_id=scene.scene_id, box=o.box, confidence=o.confidence,
                         caption=self.vocab.decode(o.final_tokens), class_id=o.class_id)
                for o in objs]


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
