"""Captioning metrics, detection metrics, and the IoU-gated scoring protocol.

Tokenization convention everywhere: captions are lists of lowercase tokens,
whitespace-split, with periods as their own tokens (exactly how the scene
templates emit them).

Caption metrics:
    bleu4        clipped modified n-gram precision, no smoothing
    rouge_l      LCS F-score with beta = 1.2, max over references
    meteor_lite  exact + Porter-stem unigram stages, fragmentation penalty
    cider        tf-idf n-gram cosine, n = 1..4, scaled by 10

Detection scoring assigns each annotated instance its max-IoU proposal and
gates the caption metric by IoU >= k; mAP uses all-point interpolation.
"""

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, iou_3d
from .stemmer import porter_stem

__all__ = [
    "DocFreq", "MetricReport", "bleu4", "rouge_l", "meteor_lite", "cider",
    "build_doc_freq", "assign_and_score", "map_ar", "Proposal",
    "write_predictions", "read_predictions", "metric_report_lines",
]


# -- n-gram helpers -----------------------------------------------------------

def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _ngram_counts(tokens, max_n=4):
    return [Counter(_ngrams(tokens, n)) for n in range(1, max_n + 1)]


# -- BLEU-4 -------------------------------------------------------------------

def bleu4(candidate, references):
    """Geometric mean of clipped 1..4-gram precisions times brevity penalty.

    Zero whenever any n-gram precision is zero (no smoothing); the brevity
    reference length is the closest one, shorter on ties.
    """
    if not references:
        raise ValueError("bleu4: empty reference list")
    if not candidate:
        return 0.0
    c = len(candidate)
    ref_lens = sorted((abs(len(r) - c), len(r)) for r in references)
    r = ref_lens[0][1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    logs = 0.0
    for n in range(1, 5):
        cand = Counter(_ngrams(candidate, n))
        total = max(0, c - n + 1)
        if total == 0:
            return 0.0
        maxref = Counter()
        for ref in references:
            for g, k in Counter(_ngrams(ref, n)).items():
                maxref[g] = max(maxref[g], k)
        clipped = sum(min(k, maxref.get(g, 0)) for g, k in cand.items())
        if clipped == 0:
            return 0.0
        logs += 0.25 * math.log(clipped / total)
    return bp * math.exp(logs)


# -- ROUGE-L ------------------------------------------------------------------

def _lcs_len(a, b):
    la, lb = len(a), len(b)
    dp = np.zeros((la + 1, lb + 1), dtype=np.int64)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            if a[i - 1] == b[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[la, lb])


def rouge_l(candidate, references, beta=1.2):
    """Max over references of the LCS F-measure with recall weight beta."""
    if not references:
        raise ValueError("rouge_l: empty reference list")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = _lcs_len(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


# -- METEOR (exact + stem stages only) ----------------------------------------

def _align(candidate, reference):
    """Greedy left-to-right alignment: exact stage then Porter-stem stage.

    Returns the list of (cand index, ref index) matches sorted by cand index.
    """
    matches = {}
    used = set()
    for ci, tok in enumerate(candidate):       # exact
        for ri, rtok in enumerate(reference):
            if ri in used:
                continue
            if tok == rtok:
                matches[ci] = ri
                used.add(ri)
                break
    cstems = [porter_stem(t) for t in candidate]
    rstems = [porter_stem(t) for t in reference]
    for ci, stok in enumerate(cstems):         # stem stage over the remainder
        if ci in matches:
            continue
        for ri, rtok in enumerate(rstems):
            if ri in used:
                continue
            if stok == rtok:
                matches[ci] = ri
                used.add(ri)
                break
    return sorted(matches.items())


def _chunks(pairs):
    chunks = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def meteor_lite(candidate, references):
    """Unigram F-mean (recall-weighted 9:1) with a fragmentation penalty."""
    if not references:
        raise ValueError("meteor_lite: empty reference list")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        pairs = _align(candidate, ref)
        m = len(pairs)
        if m == 0:
            continue
        p = m / len(candidate)
        r = m / len(ref)
        fmean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1.0 - penalty))
    return best


# -- CIDEr --------------------------------------------------------------------

@dataclass
class DocFreq:
    """Per-n n-gram document frequencies over a reference corpus.

    A "document" is one instance's reference set; idf = log(corpus / df),
    clipped at 0, and n-grams never seen in the corpus get idf 0.
    """

    corpus_size: int
    df: list = field(default_factory=lambda: [defaultdict(int) for _ in range(4)])

    def idf(self, ngram):
        n = len(ngram) - 1
        d = self.df[n].get(ngram, 0)
        if d == 0:
            return 0.0
        return max(0.0, math.log(self.corpus_size / d))


def build_doc_freq(documents):
    """documents: list of reference sets, each a list of token lists."""
    if not documents:
        raise ValueError("build_doc_freq: empty corpus")
    dfq = DocFreq(corpus_size=len(documents))
    for refs in documents:
        seen = set()
        for ref in refs:
            for n in range(1, 5):
                seen.update(_ngrams(ref, n))
        for g in seen:
            dfq.df[len(g) - 1][g] += 1
    return dfq


def _tfidf_vec(counts, dfq):
    return {g: k * dfq.idf(g) for g, k in counts.items()}


def _cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider(candidate, references, dfq: DocFreq):
    """10 * mean over n of the mean reference cosine of tf-idf vectors."""
    if not references:
        raise ValueError("cider: empty reference list")
    if not candidate:
        return 0.0
    cand = _ngram_counts(candidate)
    score = 0.0
    for n in range(4):
        u = _tfidf_vec(cand[n], dfq)
        s = 0.0
        for ref in references:
            v = _tfidf_vec(Counter(_ngrams(ref, n + 1)), dfq)
            s += _cosine(u, v)
        score += s / len(references)
    return 10.0 * score / 4.0


# -- detection-gated protocol ---------------------------------------------------

@dataclass
class Proposal:
    """One post-NMS prediction: box, detector confidence, class, caption."""

    scene_id: str
    box: Box3D
    confidence: float
    caption: list          # final caption tokens (strings)
    class_id: int = -1


@dataclass
class MetricReport:
    captioning: dict = field(default_factory=dict)   # (metric, k) -> value
    map_ar: dict = field(default_factory=dict)       # ("mAP"/"AR", k) -> value
    n_instances: int = 0


def assign_and_score(proposals_by_scene, references_by_scene, k, metric_fn):
    """IoU-gated average of metric_fn over all annotated instances.

    references_by_scene: scene_id -> list of (box, reference token lists);
    every annotated instance gets the proposal with max IoU against its box
    (ties to higher confidence) and contributes metric * [IoU >= k]; scenes
    with no proposals contribute zero for each of their instances.
    """
    total = 0.0
    n = 0
    for scene_id, gt_list in references_by_scene.items():
        props = proposals_by_scene.get(scene_id, [])
        for box, refs in gt_list:
            n += 1
            if not props:
                continue
            best, best_iou, best_conf = None, -1.0, -np.inf
            for p in props:
                v = iou_3d(p.box, box)
                if v > best_iou + 1e-12 or (abs(v - best_iou) <= 1e-12 and p.confidence > best_conf):
                    best, best_iou, best_conf = p, v, p.confidence
            if best_iou >= k:
                total += metric_fn(best.caption, refs)
    if n == 0:
        raise ValueError("assign_and_score: no annotated instances")
    return total / n


def map_ar(proposals_by_scene, gt_by_scene, k):
    """(mAP, AR) at IoU >= k.

    gt_by_scene: scene_id -> list of (box, class_id).  AP per class uses
    all-point interpolation over the confidence-ranked predictions; classes
    absent from the ground truth are excluded from the mean.  AR is recall
    with all proposals kept, averaged over the same classes.
    """
    classes = sorted({c for gts in gt_by_scene.values() for _, c in gts})
    if not classes:
        return 0.0, 0.0
    aps, ars = [], []
    for cls in classes:
        records = []   # (confidence, scene, box)
        total_gt = 0
        for scene_id, gts in gt_by_scene.items():
            total_gt += sum(1 for _, c in gts if c == cls)
        for scene_id, props in proposals_by_scene.items():
            for p in props:
                if p.class_id == cls:
                    records.append((p.confidence, scene_id, p.box))
        records.sort(key=lambda t: -t[0])
        matched = {sid: np.zeros(len(gt_by_scene.get(sid, [])), dtype=bool)
                   for sid in gt_by_scene}
        tp = np.zeros(len(records))
        fp = np.zeros(len(records))
        for i, (_, sid, box) in enumerate(records):
            gts = gt_by_scene.get(sid, [])
            best_j, best_iou = -1, k
            for j, (gbox, gcls) in enumerate(gts):
                if gcls != cls or matched[sid][j]:
                    continue
                v = iou_3d(box, gbox)
                if v >= best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0:
                matched[sid][best_j] = True
                tp[i] = 1
            else:
                fp[i] = 1
        if total_gt == 0:
            continue
        if not records:
            aps.append(0.0)
            ars.append(0.0)
            continue
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recall = ctp / total_gt
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        aps.append(_ap_all_points(recall, precision))
        ars.append(float(ctp[-1] / total_gt))
    if not aps:
        return 0.0, 0.0
    return float(np.mean(aps)), float(np.mean(ars))


def _ap_all_points(recall, precision):
    """Area under the precision envelope (all-point interpolation)."""
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


# -- prediction interchange files ------------------------------------------------

def write_predictions(path, proposals):
    """Tab-separated, one proposal per line:
    scene_id, cx, cy, cz, w, d, h, confidence, caption text."""
    lines = []
    for p in proposals:
        b = p.box
        fields = [p.scene_id] + [f"{v:.6f}" for v in (*b.center, *b.size)] \
            + [f"{p.confidence:.6f}", " ".join(p.caption)]
        lines.append("\t".join(fields))
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    import os
    os.replace(tmp, path)


def read_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 9:
                raise ValueError(f"bad prediction record on line {ln + 1}: expected 9 fields")
            vals = [float(v) for v in parts[1:8]]
            out.append(Proposal(
                scene_id=parts[0],
                box=Box3D(tuple(vals[0:3]), tuple(vals[3:6])),
                confidence=vals[6],
                caption=parts[8].split() if parts[8] else [],
            ))
    return out


def evaluate_proposals(proposals_by_scene, scenes, thresholds=(0.25, 0.5), dfq=None):
    """Score proposals against a scene list at each IoU threshold.

    Per-instance references are the composed final captions (attribute part
    joined with each relational/global part); CIDEr document frequencies are
    built over those references unless a frozen dfq is supplied.
    """
    from .scenegen import composed_references
    references_by_scene = {}
    gt_by_scene = {}
    docs = []
    for sc in scenes:
        refs = []
        gts = []
        for inst in sc.instances:
            comp = composed_references(inst)
            refs.append((inst.box, comp))
            gts.append((inst.box, _class_id(inst.class_label)))
            docs.append(comp)
        references_by_scene[sc.scene_id] = refs
        gt_by_scene[sc.scene_id] = gts
    if dfq is None:
        dfq = build_doc_freq(docs)

    report = MetricReport(n_instances=sum(len(v) for v in references_by_scene.values()))
    fns = {
        "C": lambda c, r: cider(c, r, dfq),
        "B4": bleu4,
        "M": meteor_lite,
        "R": rouge_l,
    }
    for k in thresholds:
        for name, fn in fns.items():
            report.captioning[(name, k)] = assign_and_score(
                proposals_by_scene, references_by_scene, k, fn)
        m, a = map_ar(proposals_by_scene, gt_by_scene, k)
        report.map_ar[("mAP", k)] = m
        report.map_ar[("AR", k)] = a
    return report


def _class_id(label):
    from .scenegen import CLASS_NAMES
    return CLASS_NAMES.index(label)


def metric_report_lines(report: MetricReport, thresholds):
    """Machine-readable key=value lines with the fixed key schema."""
    names = {"C": "C", "B4": "B4", "M": "M", "R": "R"}
    lines = []
    for metric in ("C", "B4", "M", "R"):
        for k in thresholds:
            suffix = f"{int(round(k * 100)):02d}"
            lines.append(f"{names[metric]}{suffix}={report.captioning[(metric, k)]:.6f}")
    for metric in ("mAP", "AR"):
        for k in thresholds:
            suffix = f"{int(round(k * 100)):02d}"
            lines.append(f"{metric}{suffix}={report.map_ar[(metric, k)]:.6f}")
    return lines
