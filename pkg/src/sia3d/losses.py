"""Set-prediction losses: Hungarian assignment, detection, caption MLE, SCST.

Loss weights follow the fixed convention
    detection: alpha = (10, 1, 5, 1) over (giou, class, center, size)
    total:     beta  = (10, 1, 10) over (vote, per-layer detection, caption)
and the matching cost mirrors the detection weights.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ndtensor as nd
from .ndtensor import Tensor

__all__ = ["Assignment", "LossReport", "DetWeights", "hungarian",
           "detection_loss", "mle_loss", "scst_loss", "total_loss",
           "BETA_VOTE", "BETA_DET", "BETA_CAP"]

BETA_VOTE, BETA_DET, BETA_CAP = 10.0, 1.0, 10.0


@dataclass
class DetWeights:
    giou: float = 10.0
    cls: float = 1.0
    center: float = 5.0
    size: float = 1.0
    no_object: float = 0.2   # CE down-weight for unmatched proposals


@dataclass
class Assignment:
    """Injective proposal->ground-truth pairing; unmatched proposals are
    implicitly "no object"."""

    pairs: list   # sorted list of (proposal index, gt index)

    def proposal_to_gt(self):
        return dict(self.pairs)


def hungarian(cost):
    """Exact minimum-cost assignment on an n x m matrix.

    Solved with the Jonker-Volgenant solver behind scipy; among equal-cost
    optima the lexicographically smallest assignment vector is returned
    (exact canonicalization for n*m <= 64, where ties realistically occur;
    larger float-valued matrices from model outputs have almost surely
    unique optima and keep the solver's deterministic output).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"hungarian: cost must be 2-d, got shape {cost.shape}")
    if cost.size == 0:
        return Assignment(pairs=[])
    if np.isnan(cost).any():
        raise ValueError("hungarian: cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("hungarian: cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    baseline = sorted(zip(rows.tolist(), cols.tolist()))
    if cost.size <= 64:
        pairs = _lexmin_assignment(cost, float(cost[rows, cols].sum()), baseline)
    else:
        pairs = baseline
    return Assignment(pairs=[(int(r), int(c)) for r, c in pairs])


def _solve_total(cost):
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def _lexmin_assignment(cost, best_total, baseline, tol=1e-9):
    """Fix rows in ascending order to the smallest column keeping the optimum.

    Falls back to the solver's own assignment if float tolerance ever breaks
    the search (optimality is never traded for tie-break order).
    """
    n, m = cost.shape
    need = min(n, m)
    scale = max(1.0, float(np.abs(cost).max()))
    eps = tol * scale * max(1, need)
    pairs = []
    free_cols = list(range(m))
    total_left = best_total
    for row in range(n):
        if len(pairs) == need:
            break
        rest_rows = list(range(row + 1, n))
        chosen = None
        for c in free_cols:
            rest_cols = [x for x in free_cols if x != c]
            if len(pairs) + 1 + min(len(rest_rows), len(rest_cols)) < need:
                continue  # would leave too few rows/columns to finish
            sub_total = _solve_total(cost[np.ix_(rest_rows, rest_cols)])
            if abs(cost[row, c] + sub_total - total_left) <= eps:
                chosen = c
                break
        if chosen is None:
            # row stays unmatched; only possible with more rows than columns
            if len(pairs) + min(len(rest_rows), len(free_cols)) < need:
                return baseline
            continue
        pairs.append((row, chosen))
        free_cols.remove(chosen)
        total_left -= cost[row, chosen]
    if len(pairs) != need:
        return baseline
    total = sum(cost[r, c] for r, c in pairs)
    if abs(total - best_total) > eps:
        return baseline
    return sorted(pairs)


def _giou_tensor(center_a, size_a, boxes):
    """Differentiable GIoU of predicted (P,3)/(P,3) tensors vs constant boxes."""
    gt = np.asarray([b.as_array() for b in boxes])
    gmin = Tensor((gt[:, :3] - 0.5 * gt[:, 3:]).astype(center_a.dtype))
    gmax = Tensor((gt[:, :3] + 0.5 * gt[:, 3:]).astype(center_a.dtype))
    pmin = nd.sub(center_a, nd.mul(size_a, 0.5))
    pmax = nd.add(center_a, nd.mul(size_a, 0.5))

    def _min(a, b):
        return nd.sub(a, nd.relu(nd.sub(a, b)))

    def _max(a, b):
        return nd.add(a, nd.relu(nd.sub(b, a)))

    inter_ext = nd.relu(nd.sub(_min(pmax, gmax), _max(pmin, gmin)))
    hull_ext = nd.sub(_max(pmax, gmax), _min(pmin, gmin))
    inter = _prod3(inter_ext)
    hull = _prod3(hull_ext)
    vol_p = _prod3(nd.sub(pmax, pmin))
    vol_g = Tensor(np.prod(gt[:, 3:], axis=1).astype(center_a.dtype))
    union = nd.sub(nd.add(vol_p, vol_g), inter)
    iou = nd.div(inter, union)
    return nd.sub(iou, nd.div(nd.sub(hull, union), hull))


def _prod3(ext):
    return nd.mul(nd.mul(ext[..., 0], ext[..., 1]), ext[..., 2])


def detection_loss(det, gt_instances, layer, class_ids, weights: DetWeights = None):
    """Matched detection loss for one decoder layer of one scene.

    det holds (M,3)/(M,3)/(M,C+1) tensors per layer; gt_instances is the
    scene's instance list and class_ids maps class label -> id.  Returns
    (scalar tensor, Assignment, parts dict of floats).
    """
    w = weights or DetWeights()
    centers = det.centers[layer]
    sizes = det.sizes[layer]
    logits = det.logits[layer]
    m = centers.shape[0]
    ncls = det.n_classes
    no_obj = ncls

    gt_boxes = [inst.box for inst in gt_instances]
    gt_cls = np.asarray([class_ids[inst.class_label] for inst in gt_instances], dtype=np.int64)
    n_gt = len(gt_boxes)

    if n_gt == 0:
        targets = np.full(m, no_obj, dtype=np.int64)
        ce = nd.cross_entropy_with_logits(logits, targets)
        cls_loss = nd.mean_over_set(ce, axis=0)
        total = nd.mul(cls_loss, w.cls * w.no_object)
        parts = {"giou": 0.0, "cls": float(cls_loss.data) * w.no_object,
                 "center": 0.0, "size": 0.0}
        return total, Assignment(pairs=[]), parts

    # matching cost mirrors the loss weights
    probs = _softmax_np(logits.data)
    cn = centers.data.astype(np.float64)
    sz = np.maximum(sizes.data.astype(np.float64), 1e-6)
    gt_arr = np.asarray([b.as_array() for b in gt_boxes])
    giou_mat = _giou_np(cn, sz, gt_arr)
    c_l1 = np.abs(cn[:, None, :] - gt_arr[None, :, :3]).sum(-1)
    s_l1 = np.abs(sz[:, None, :] - gt_arr[None, :, 3:]).sum(-1)
    cost = (w.giou * (1.0 - giou_mat) + w.cls * (1.0 - probs[:, gt_cls])
            + w.center * c_l1 + w.size * s_l1)
    assign = hungarian(cost)
    rows = np.asarray([r for r, _ in assign.pairs], dtype=np.int64)
    cols = [c for _, c in assign.pairs]

    matched_boxes = [gt_boxes[c] for c in cols]
    mc = nd.gather(centers, rows, axis=0)
    ms = nd.gather(sizes, rows, axis=0)
    giou = _giou_tensor(mc, ms, matched_boxes)
    giou_loss = nd.mean_over_set(nd.sub(1.0, giou), axis=0)

    gt_centers = np.asarray([b.center for b in matched_boxes], dtype=centers.data.dtype)
    gt_sizes = np.asarray([b.size for b in matched_boxes], dtype=centers.data.dtype)
    center_loss = nd.mul(nd.l1_norm(nd.sub(mc, Tensor(gt_centers))), 1.0 / len(rows))
    size_loss = nd.mul(nd.l1_norm(nd.sub(ms, Tensor(gt_sizes))), 1.0 / len(rows))

    targets = np.full(m, no_obj, dtype=np.int64)
    targets[rows] = gt_cls[cols]
    ce = nd.cross_entropy_with_logits(logits, targets)
    wvec = np.where(targets == no_obj, w.no_object, 1.0).astype(ce.dtype)
    cls_loss = nd.div(nd.sum_(nd.mul(ce, Tensor(wvec))), float(wvec.sum()))

    total = nd.add(nd.add(nd.mul(giou_loss, w.giou), nd.mul(cls_loss, w.cls)),
                   nd.add(nd.mul(center_loss, w.center), nd.mul(size_loss, w.size)))
    parts = {"giou": float(giou_loss.data), "cls": float(cls_loss.data),
             "center": float(center_loss.data), "size": float(size_loss.data)}
    return total, assign, parts


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _giou_np(centers, sizes, gt_arr):
    """Vectorized GIoU of (M,3)+(M,3) predictions vs (G,6) boxes -> (M,G)."""
    pmin = (centers - 0.5 * sizes)[:, None, :]
    pmax = (centers + 0.5 * sizes)[:, None, :]
    gmin = (gt_arr[:, :3] - 0.5 * gt_arr[:, 3:])[None]
    gmax = (gt_arr[:, :3] + 0.5 * gt_arr[:, 3:])[None]
    inter = np.prod(np.maximum(np.minimum(pmax, gmax) - np.maximum(pmin, gmin), 0.0), axis=-1)
    hull = np.prod(np.maximum(pmax, gmax) - np.minimum(pmin, gmin), axis=-1)
    vol_p = np.prod(sizes, axis=-1)[:, None]
    vol_g = np.prod(gt_arr[:, 3:], axis=-1)[None]
    union = vol_p + vol_g - inter
    return inter / union - (hull - union) / hull


def mle_loss(head, prefix, slot_types, reference_tokens):
    """Teacher-forced negative log-likelihood of one caption, summed over
    positions including the EOS prediction."""
    refs = list(reference_tokens)
    if len(refs) > head.max_len:
        raise ValueError(f"reference length {len(refs)} exceeds max_len {head.max_len}")
    for t in refs:
        if not 0 <= t < head.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {head.vocab_size}")
    return mle_loss_batch(head, _as_batch(prefix), slot_types, [refs])


def mle_loss_batch(head, prefixes, slot_types, refs_list):
    """Mean over captions of the per-caption summed NLL (the batch average)."""
    b = prefixes.shape[0]
    if b != len(refs_list):
        raise ValueError("prefix batch and reference list sizes differ")
    lens = [len(r) + 1 for r in refs_list]          # +1 for the EOS prediction
    lmax = max(lens)
    text = np.full((b, lmax), 0, dtype=np.int64)    # PAD
    targets = np.full((b, lmax), 0, dtype=np.int64)
    mask = np.zeros((b, lmax), dtype=np.float64)
    for i, r in enumerate(refs_list):
        for t in r:
            if not 0 <= t < head.vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {head.vocab_size}")
        text[i, 0] = head.bos_id
        text[i, 1:len(r) + 1] = r
        targets[i, :len(r)] = r
        targets[i, len(r)] = head.eos_id
        mask[i, :len(r) + 1] = 1.0
    logits = head.forward_logits(prefixes, slot_types, text)
    ce = nd.cross_entropy_with_logits(logits, targets)
    masked = nd.mul(ce, Tensor(mask.astype(ce.dtype)))
    return nd.mul(nd.sum_(masked), 1.0 / b)


def _as_batch(prefix):
    if isinstance(prefix, np.ndarray):
        prefix = Tensor(prefix)
    if prefix.ndim == 2:
        prefix = nd.reshape(prefix, (1,) + prefix.shape)
    return prefix


def scst_loss(head, prefix, slot_types, references, beam_k, reward_fn,
              max_len=None):
    """Self-critical policy gradient for one caption sample.

    beam_k captions come from beam search, the greedy decode is the reward
    baseline, and the advantage scales each caption's length-normalized
    log-probability.  Rewards are constants; gradient flows only through the
    log-probabilities.  reward_fn(tokens, references) -> float.
    """
    from .heads import caption_beam, caption_greedy
    if beam_k < 1:
        raise ValueError(f"beam_k must be >= 1, got {beam_k}")
    if not references:
        raise ValueError("scst_loss: empty reference set")
    prefix_b = _as_batch(prefix)
    hyps = caption_beam(prefix_b, slot_types, head, beam_k, max_len=max_len)
    greedy = caption_greedy(prefix_b, slot_types, head, max_len=max_len)
    r_base = reward_fn(greedy, references)
    advantages = [reward_fn(toks, references) - r_base for toks, _ in hyps]
    if all(a == 0.0 for a in advantages):
        # exact zero loss, exact zero gradient
        return nd.mul(nd.sum_(head.prefix_proj.weight), 0.0)
    total = None
    for (toks, _), adv in zip(hyps, advantages):
        logp = _sequence_logprob(head, prefix_b, slot_types, toks)
        term = nd.mul(logp, -adv / max(1, len(toks)))
        total = term if total is None else nd.add(total, term)
    return total


def _sequence_logprob(head, prefix_b, slot_types, tokens):
    """Differentiable total log-prob of a token sequence (with its EOS)."""
    refs = list(tokens)
    text = np.asarray([[head.bos_id] + refs], dtype=np.int64)
    targets = np.asarray([refs + [head.eos_id]], dtype=np.int64)
    logits = head.forward_logits(prefix_b, slot_types, text)
    ce = nd.cross_entropy_with_logits(logits, targets)
    return nd.mul(nd.sum_(ce), -1.0)


@dataclass
class LossReport:
    """Float bookkeeping of every loss part for one step."""

    vote: float = 0.0
    det_layers: list = field(default_factory=list)   # stacked per decoder layer
    det_parts: dict = field(default_factory=dict)    # averaged giou/cls/center/size
    cap: float = 0.0
    stage: str = "pretrain"
    beta: tuple = (BETA_VOTE, BETA_DET, BETA_CAP)

    @property
    def det_total(self):
        return float(sum(self.det_layers))

    @property
    def total(self):
        return total_loss(self)


def total_loss(report: LossReport):
    """Recompute the staged objective from its parts.

    Pretraining omits the caption term; the SCST stage trains only the
    caption term (the detector is frozen, so the other parts are constants
    there and excluded from the optimized value).
    """
    b1, b2, b3 = report.beta
    if report.stage == "pretrain":
        return b1 * report.vote + b2 * report.det_total
    if report.stage == "scst":
        return b3 * report.cap
    return b1 * report.vote + b2 * report.det_total + b3 * report.cap
