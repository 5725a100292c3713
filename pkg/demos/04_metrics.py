"""Captioning metrics and the IoU-gated per-instance scoring protocol."""

from sia3d.evalkit import (Proposal, assign_and_score, bleu4, build_doc_freq,
                           cider, meteor_lite, rouge_l)
from sia3d.geometry import Box3D

cand = "this is a red chair .".split()
refs = ["this is a red chair .".split(), "it is next to the table .".split()]

docs = [refs, [["a", "blue", "sofa", "."]], [["the", "lamp", "is", "tall", "."]]]
dfq = build_doc_freq(docs)

print("BLEU-4  self vs cross: %.3f / %.3f" % (bleu4(cand, [refs[0]]), bleu4(cand, [refs[1]])))
print("ROUGE-L self vs cross: %.3f / %.3f" % (rouge_l(cand, [refs[0]]), rouge_l(cand, [refs[1]])))
print("METEOR  stems 'chairs'->'chair': %.3f" % meteor_lite(["chairs"], [["chair"]]))
print("CIDEr   self-match scores the maximum 10: %.3f" % cider(cand, [cand], dfq))

# detection-gated captioning: a correct caption only counts when its box
# overlaps the annotated instance at IoU >= k
box_good = Box3D((0, 0, 0), (1, 1, 1))
box_off = Box3D((0.8, 0.8, 0), (1, 1, 1))
references = {"scene": [(box_good, [cand])]}
for name, box in (("aligned", box_good), ("offset", box_off)):
    proposals = {"scene": [Proposal("scene", box, 0.9, cand)]}
    val = assign_and_score(proposals, references, k=0.5, metric_fn=bleu4)
    print(f"BLEU@0.5 with {name} box: {val:.3f}")
