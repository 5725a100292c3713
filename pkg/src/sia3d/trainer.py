"""Three-stage training: detection pretrain, joint MLE, SCST refinement.

Stage behavior
    pretrain  vote + per-layer detection losses; caption-side parameters
              receive no updates at all
    mle       adds the caption MLE term; detector group runs at the floor
              learning rate while the caption group follows the cosine
              schedule; NetVLAD centers re-initialize from k-means over a
              warm-up batch when entering from a pretrain checkpoint
    scst      caption head only, constant floor learning rate, CIDEr-reward
              self-critical updates; every other parameter stays bit-identical

Checkpoints are versioned, self-describing (config + vocabulary + RNG
streams + optimizer state), and carry per-tensor checksums.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor, AdamW, clip_grad_global_norm, cosine_lr
from .config import TrainConfig, ConfigError, config_to_text, parse_config_text
from .evalkit import build_doc_freq, cider, evaluate_proposals
from .losses import (DetWeights, LossReport, detection_loss, mle_loss_batch,
                     scst_loss, total_loss)
from .model import SiaModel
from .queries import vote_loss
from .scenegen import CLASS_NAMES, Vocabulary, build_vocab, scene_caption_corpus
from .tgi import SLOT_INSTANCE

__all__ = ["Checkpoint", "CheckpointError", "DivergenceError", "StageError",
           "run_stage", "save_checkpoint", "load_checkpoint", "build_model"]

CKPT_MAGIC = b"SIACKPT1"
CKPT_VERSION = 1

RNG_STREAMS = ("data", "fps", "dropout", "refs", "warmup")


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class StageError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocabulary
    params: dict                  # name -> array
    opt_state: dict               # name -> array
    rng_states: dict              # stream -> json-able state
    epoch: int = 0
    step: int = 0
    best: dict = field(default_factory=dict)

    def model_signature(self):
        return self.config.model_signature()


# -- serialization --------------------------------------------------------------

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    nb = arr.tobytes()
    head = struct.pack("<H", len(name.encode())) + name.encode()
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    head += struct.pack("<II", zlib.crc32(nb), len(nb))
    return head + nb


def _unpack_tensor(r):
    (nlen,) = r.unpack("<H")
    name = r.read(nlen).decode()
    code, ndim = r.unpack("<BB")
    shape = r.unpack(f"<{ndim}I") if ndim else ()
    crc, nb = r.unpack("<II")
    raw = r.read(nb)
    if zlib.crc32(raw) != crc:
        raise CheckpointError(f"checksum mismatch in tensor {name!r}")
    arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return name, arr


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def read(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.off}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _blob(data):
    return struct.pack("<I", len(data)) + data


def save_checkpoint(path, ckpt: Checkpoint):
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    parts.append(_blob(config_to_text(ckpt.config).encode()))
    vocab_extra = ckpt.vocab.tokens[4:]
    parts.append(_blob(json.dumps(vocab_extra).encode()))
    meta = json.dumps({"epoch": ckpt.epoch, "step": ckpt.step, "best": ckpt.best})
    parts.append(_blob(meta.encode()))
    parts.append(_blob(json.dumps(ckpt.rng_states).encode()))
    for group in (ckpt.params, ckpt.opt_state):
        parts.append(struct.pack("<I", len(group)))
        for name in group:
            parts.append(_pack_tensor(name, group[name]))
    payload = b"".join(parts)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    r = _Reader(raw)
    r.read(8)
    (version,) = r.unpack("<H")
    if version > CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is newer than supported {CKPT_VERSION}")
    (n,) = r.unpack("<I")
    cfg = parse_config_text(r.read(n).decode())
    (n,) = r.unpack("<I")
    vocab = Vocabulary(json.loads(r.read(n).decode()))
    (n,) = r.unpack("<I")
    meta = json.loads(r.read(n).decode())
    (n,) = r.unpack("<I")
    rng_states = json.loads(r.read(n).decode())
    groups = []
    for _ in range(2):
        (count,) = r.unpack("<I")
        g = {}
        for _ in range(count):
            name, arr = _unpack_tensor(r)
            g[name] = arr
        groups.append(g)
    return Checkpoint(config=cfg, vocab=vocab, params=groups[0], opt_state=groups[1],
                      rng_states=rng_states, epoch=meta["epoch"], step=meta["step"],
                      best=meta.get("best", {}))


# -- model <-> checkpoint --------------------------------------------------------

def snapshot_params(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_params(model, params):
    names = dict(model.named_parameters())
    if set(names) != set(params):
        missing = sorted(set(names) - set(params))
        extra = sorted(set(params) - set(names))
        raise CheckpointError(f"parameter name mismatch: missing {missing[:3]} extra {extra[:3]}")
    for name, p in names.items():
        arr = params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype)


def build_model(cfg: TrainConfig, vocab: Vocabulary):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    return SiaModel(cfg, vocab, rng)


def _make_streams(seed):
    seqs = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS) + 1)
    return {name: np.random.default_rng(seqs[i + 1]) for i, name in enumerate(RNG_STREAMS)}


def _stream_states(streams):
    return {k: json.loads(json.dumps(v.bit_generator.state)) for k, v in streams.items()}


def _restore_streams(states):
    out = {}
    for name in RNG_STREAMS:
        g = np.random.default_rng(0)
        g.bit_generator.state = states[name]
        out[name] = g
    return out


# -- training loop ---------------------------------------------------------------

def _det_weights(cfg):
    return DetWeights(giou=cfg.alpha_giou, cls=cfg.alpha_cls, center=cfg.alpha_center,
                      size=cfg.alpha_size, no_object=cfg.no_object_weight)


def _routed_refs(inst, vocab, kind, rng=None):
    """attribute caption for the instance prefix; one relational/global
    caption (uniform choice) for the context prefix."""
    if kind == "instance":
        return vocab.encode(inst.captions[0])
    rest = inst.captions[1:]
    pick = 0 if rng is None or len(rest) == 1 else int(rng.integers(0, len(rest)))
    return vocab.encode(rest[pick])


def _caption_samples(model, fw, batch_scenes, assigns, vocab, rng):
    """Gather matched-query caption training samples for one batch.

    Returns (instance_prefixes, instance_refs, context_prefixes, context_refs).
    """
    d = model.cfg.dim
    mo = model.cfg.m_instance
    v_flat = nd.reshape(fw.decoded_instance.V, (-1, d))
    inst_rows, inst_refs, ctx_rows, ctx_refs = [], [], [], []
    for b, (scene, assign) in enumerate(zip(batch_scenes, assigns)):
        for qi, gj in assign.pairs:
            inst = scene.instances[gj]
            inst_rows.append(b * mo + qi)
            inst_refs.append(_routed_refs(inst, vocab, "instance"))
            if fw.prefixes is not None:
                ctx_rows.append(b * mo + qi)
                ctx_refs.append(_routed_refs(inst, vocab, "context", rng))
    inst_prefix = None
    ctx_prefix = None
    if inst_rows:
        inst_prefix = nd.reshape(nd.gather(v_flat, np.asarray(inst_rows), axis=0),
                                 (len(inst_rows), 1, d))
    if ctx_rows:
        p = fw.prefixes.shape[2]
        ctx_prefix = nd.reshape(
            nd.gather(nd.reshape(fw.prefixes, (-1, p, d)), np.asarray(ctx_rows), axis=0),
            (len(ctx_rows), p, d))
    return inst_prefix, inst_refs, ctx_prefix, ctx_refs


def _mle_caption_loss(model, fw, batch_scenes, assigns, vocab, rng):
    inst_prefix, inst_refs, ctx_prefix, ctx_refs = _caption_samples(
        model, fw, batch_scenes, assigns, vocab, rng)
    head = model.caption_head
    terms = []
    counts = []
    if inst_prefix is not None:
        terms.append(mle_loss_batch(head, inst_prefix, np.asarray([SLOT_INSTANCE]), inst_refs))
        counts.append(len(inst_refs))
    if ctx_prefix is not None:
        terms.append(mle_loss_batch(head, ctx_prefix, fw.slot_types, ctx_refs))
        counts.append(len(ctx_refs))
    if not terms:
        return None
    total = None
    n = sum(counts)
    for t, c in zip(terms, counts):
        t = nd.mul(t, c / n)
        total = t if total is None else nd.add(total, t)
    return total


def _scst_caption_loss(model, fw, batch_scenes, assigns, vocab, dfq, rng):
    """Mean SCST loss over matched sub-caption samples; prefixes detached so
    gradient reaches only the caption head."""
    inst_prefix, inst_refs_ids, ctx_prefix, ctx_refs_ids = _caption_samples(
        model, fw, batch_scenes, assigns, vocab, rng)
    head = model.caption_head

    def reward(tokens, refs):
        return cider([vocab.tokens[t] for t in tokens],
                     [[vocab.tokens[t] for t in r] for r in refs], dfq)

    samples = []
    if inst_prefix is not None:
        data = inst_prefix.data
        for i in range(data.shape[0]):
            samples.append((Tensor(data[i]), np.asarray([SLOT_INSTANCE]),
                            _all_routed(batch_scenes, assigns, i, "instance", vocab)))
    if ctx_prefix is not None:
        data = ctx_prefix.data
        for i in range(data.shape[0]):
            samples.append((Tensor(data[i]), fw.slot_types,
                            _all_routed(batch_scenes, assigns, i, "context", vocab)))
    if not samples:
        return None
    total = None
    for prefix, slots, refs in samples:
        term = scst_loss(head, prefix, slots, refs, model.cfg.scst_beam_k, reward,
                         max_len=model.cfg.max_len)
        total = term if total is None else nd.add(total, term)
    return nd.mul(total, 1.0 / len(samples))


def _all_routed(batch_scenes, assigns, flat_index, kind, vocab):
    """Reference set for the flat_index-th matched pair across the batch."""
    i = 0
    for scene, assign in zip(batch_scenes, assigns):
        for _, gj in assign.pairs:
            if i == flat_index:
                inst = scene.instances[gj]
                caps = [inst.captions[0]] if kind == "instance" else inst.captions[1:]
                return [vocab.encode(c) for c in caps]
            i += 1
    raise IndexError(flat_index)


def _maybe_init_netvlad(model, scenes, streams, cfg):
    """K-means warm-up for NetVLAD centers from decoded features."""
    agg = model.aggregator
    if agg is None or not agg.use_global or cfg.aggregator != "netvlad":
        return
    batch = scenes[:min(len(scenes), cfg.batch_size)]
    model.eval()
    fw = model.forward_batch(batch)
    feats = [fw.decoded_instance.V.data.reshape(-1, cfg.dim)]
    if fw.decoded_context is not None:
        feats.append(fw.decoded_context.V.data.reshape(-1, cfg.dim))
    model.train()
    agg.pool.init_from_features(np.concatenate(feats), streams["warmup"])


def run_stage(cfg: TrainConfig, scenes, resume: Checkpoint = None, out_dir=None,
              log_fn=None):
    """Execute one training stage over a scene list; returns the final
    Checkpoint (and writes per-epoch/best checkpoints when out_dir is set)."""
    cfg.validate()
    if not scenes:
        raise ValueError("run_stage: dataset is empty")
    if cfg.stage == "scst":
        if resume is None or resume.config.stage not in ("mle", "scst"):
            raise StageError("scst stage requires resuming from an mle checkpoint")
    if resume is not None:
        mismatch = [k for k, v in resume.model_signature().items()
                    if v != getattr(cfg, k)]
        if mismatch:
            raise ConfigError(f"checkpoint/config conflict on model keys: {mismatch}")

    if resume is not None:
        vocab = resume.vocab
    else:
        vocab = build_vocab(scene_caption_corpus(scenes))
    for sc in scenes:
        for inst in sc.instances:
            for cap in inst.captions:
                for tok in cap:
                    if tok not in vocab.index:
                        raise CheckpointError(
                            f"dataset token {tok!r} missing from checkpoint vocabulary")

    model = build_model(cfg, vocab)
    streams = _make_streams(cfg.seed)
    start_epoch = 0
    step = 0
    best = {}
    if resume is not None:
        load_params(model, resume.params)
        streams = _restore_streams(resume.rng_states)
        if resume.config.stage == cfg.stage:
            start_epoch = resume.epoch
            step = resume.step
            best = dict(resume.best)
        else:
            start_epoch = 0
            step = 0   # each stage owns its schedule
            best = {}
    for p in model.parameters():
        if p.dtype != model.np_dtype:
            p.data = p.data.astype(model.np_dtype)

    holdout = cfg.holdout
    train_scenes = scenes[:len(scenes) - holdout] if holdout else list(scenes)
    eval_scenes = scenes[len(scenes) - holdout:] if holdout else []
    if not train_scenes:
        raise ValueError("run_stage: holdout leaves no training scenes")

    entering_mle = cfg.stage == "mle" and (resume is None or resume.config.stage == "pretrain")
    if entering_mle:
        _maybe_init_netvlad(model, train_scenes, streams, cfg)

    if cfg.stage == "pretrain":
        opts = {"det": AdamW(model.detector_parameters(), lr=cfg.lr_init,
                             weight_decay=cfg.weight_decay)}
    elif cfg.stage == "mle":
        opts = {"det": AdamW(model.detector_parameters(), lr=cfg.detector_lr_floor,
                             weight_decay=cfg.weight_decay),
                "cap": AdamW(model.caption_parameters(), lr=cfg.lr_init,
                             weight_decay=cfg.weight_decay)}
    else:
        opts = {"cap": AdamW(model.caption_head_parameters(), lr=cfg.lr_floor,
                             weight_decay=0.0)}
    if resume is not None and resume.config.stage == cfg.stage and resume.opt_state:
        _load_opt_states(opts, resume.opt_state)

    dfq_scst = None
    if cfg.stage == "scst":
        docs = []
        for sc in train_scenes:
            for inst in sc.instances:
                docs.append(inst.captions)
        dfq_scst = build_doc_freq(docs)

    for drop in _dropouts(model):
        drop.rng = streams["dropout"]
    class_ids = {c: i for i, c in enumerate(CLASS_NAMES)}
    dw = _det_weights(cfg)
    steps_per_epoch = max(1, (len(train_scenes) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    trainable = [p for opt in opts.values() for p in opt.params]

    scene_seeds = streams["fps"].integers(0, 2 ** 31, size=(len(train_scenes), 3))
    for epoch in range(start_epoch, cfg.epochs):
        order = streams["data"].permutation(len(train_scenes))
        if cfg.fps_reseed == "epoch":
            scene_seeds = streams["fps"].integers(0, 2 ** 31,
                                                  size=(len(train_scenes), 3))
        # scst decodes inside the step, so the whole stage runs in eval mode
        model.train(cfg.stage != "scst")
        for start in range(0, len(order), cfg.batch_size):
            idxs = order[start:start + cfg.batch_size]
            batch = [train_scenes[i] for i in idxs]
            seeds = scene_seeds[idxs]
            fw = model.forward_batch(batch, fps_seeds=seeds)

            report = LossReport(stage=cfg.stage,
                                beta=(cfg.beta_vote, cfg.beta_det, cfg.beta_cap))
            graph_terms = []

            vl = vote_loss(fw.votefield, [sc.instances for sc in batch],
                           normalize=cfg.vote_normalize)
            report.vote = float(vl.data)
            if cfg.stage != "scst":
                graph_terms.append(nd.mul(vl, cfg.beta_vote))

            assigns_last = []
            n_layers = fw.detection.n_layers
            part_sums = {"giou": 0.0, "cls": 0.0, "center": 0.0, "size": 0.0}
            for li in range(n_layers):
                layer_terms = []
                for b, scene in enumerate(batch):
                    det_b = _slice_detection(fw.detection, b)
                    lt, assign, parts = detection_loss(det_b, scene.instances, li,
                                                       class_ids, dw)
                    layer_terms.append(lt)
                    for k in part_sums:
                        part_sums[k] += parts[k]
                    if li == n_layers - 1:
                        assigns_last.append(assign)
                layer_loss = layer_terms[0]
                for t in layer_terms[1:]:
                    layer_loss = nd.add(layer_loss, t)
                layer_loss = nd.mul(layer_loss, 1.0 / len(batch))
                report.det_layers.append(float(layer_loss.data))
                if cfg.stage != "scst":
                    graph_terms.append(nd.mul(layer_loss, cfg.beta_det))
            report.det_parts = {k: v / (n_layers * len(batch))
                                for k, v in part_sums.items()}

            if cfg.stage == "mle":
                cap = _mle_caption_loss(model, fw, batch, assigns_last, vocab,
                                        streams["refs"])
                if cap is not None:
                    report.cap = float(cap.data)
                    graph_terms.append(nd.mul(cap, cfg.beta_cap))
            elif cfg.stage == "scst":
                cap = _scst_caption_loss(model, fw, batch, assigns_last, vocab,
                                         dfq_scst, streams["refs"])
                if cap is not None:
                    report.cap = float(cap.data)
                    graph_terms.append(nd.mul(cap, cfg.beta_cap))

            if not graph_terms:
                continue   # scst batch with no matched queries
            loss = graph_terms[0]
            for t in graph_terms[1:]:
                loss = nd.add(loss, t)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at step {step} (last finite step {step - 1})")

            for opt in opts.values():
                opt.zero_grad()
            nd.backward(loss)
            gnorm = clip_grad_global_norm(trainable, cfg.grad_clip)

            if cfg.stage == "pretrain":
                lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_floor,
                               cfg.warmup_frac)
                opts["det"].step(lr=lr)
                lrs = {"lr": lr}
            elif cfg.stage == "mle":
                lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_floor,
                               cfg.warmup_frac)
                opts["det"].step(lr=cfg.detector_lr_floor)
                opts["cap"].step(lr=lr)
                lrs = {"lr": lr, "lr_det": cfg.detector_lr_floor}
            else:
                opts["cap"].step(lr=cfg.lr_floor)
                lrs = {"lr": cfg.lr_floor}
            step += 1

            if log_fn is not None:
                rec = {"step": step, "epoch": epoch, "grad_norm": round(gnorm, 6),
                       "loss_total": round(float(total_loss(report)), 6),
                       "loss_vote": round(report.vote, 6),
                       "loss_det": round(report.det_total, 6),
                       "loss_cap": round(report.cap, 6)}
                rec.update({f"det_{k}": round(v, 6) for k, v in report.det_parts.items()})
                rec.update({k: round(v, 8) for k, v in lrs.items()})
                log_fn(rec)

        if eval_scenes and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            metrics = _eval_split(model, eval_scenes, cfg)
            key = "mAP25" if cfg.stage == "pretrain" else "C25"
            if log_fn is not None:
                rec = {"step": step, "epoch": epoch, "eval": 1}
                rec.update({k: round(v, 6) for k, v in metrics.items()})
                log_fn(rec)
            if not best or metrics[key] > best.get("value", -1.0):
                best = {"metric": key, "value": metrics[key], "epoch": epoch + 1}
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "checkpoint_best.bin"),
                                    _to_checkpoint(cfg, vocab, model, opts, streams,
                                                   epoch + 1, step, best))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                            _to_checkpoint(cfg, vocab, model, opts, streams,
                                           epoch + 1, step, best))

    final = _to_checkpoint(cfg, vocab, model, opts, streams,
                           max(cfg.epochs, start_epoch), step, best)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), final)
    return final


def _dropouts(model):
    out = []
    stack = [model]
    while stack:
        m = stack.pop()
        if m.__class__.__name__ == "Dropout":
            out.append(m)
        stack.extend(m._modules.values())
    return out


def _slice_detection(det, b):
    """One scene's view of a batched DetectionOutput."""
    from .heads import DetectionOutput
    return DetectionOutput(
        centers=[c[b] for c in det.centers],
        sizes=[s[b] for s in det.sizes],
        logits=[l[b] for l in det.logits],
        n_classes=det.n_classes)


def _eval_split(model, scenes, cfg):
    if cfg.stage == "pretrain":
        # captions are untrained here; detection metrics only
        proposals = {sc.scene_id: model.proposals_for(sc, decode_captions=False)
                     for sc in scenes}
        from .evalkit import map_ar
        gt = {sc.scene_id: [(inst.box, CLASS_NAMES.index(inst.class_label))
                            for inst in sc.instances] for sc in scenes}
        m, a = map_ar(proposals, gt, 0.25)
        return {"mAP25": m, "AR25": a}
    proposals = {sc.scene_id: model.proposals_for(sc) for sc in scenes}
    report = evaluate_proposals(proposals, scenes, thresholds=(0.25,))
    return {"C25": report.captioning[("C", 0.25)],
            "B425": report.captioning[("B4", 0.25)],
            "mAP25": report.map_ar[("mAP", 0.25)],
            "AR25": report.map_ar[("AR", 0.25)]}


def _to_checkpoint(cfg, vocab, model, opts, streams, epoch, step, best):
    opt_state = {}
    for tag, opt in opts.items():
        for name, arr in opt.state_arrays().items():
            opt_state[f"{tag}.{name}"] = arr
    return Checkpoint(config=cfg, vocab=vocab, params=snapshot_params(model),
                      opt_state=opt_state, rng_states=_stream_states(streams),
                      epoch=epoch, step=step, best=best)


def _load_opt_states(opts, opt_state):
    for tag, opt in opts.items():
        arrays = {}
        prefix = tag + "."
        for name, arr in opt_state.items():
            if name.startswith(prefix):
                arrays[name[len(prefix):]] = arr
        if arrays:
            opt.load_state_arrays(arrays)
