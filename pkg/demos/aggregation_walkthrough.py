"""
Selective prototype aggregation for one class
=============================================

Builds one class's teacher text prototype from the synthetic benchmark and
prints every intermediate quantity: caption scores against the visual
prototype, robust z-scores, which captions are pruned, and how the flag
calibration shifts the softmax weights.
"""

import numpy as np

from protodistill.prototype import AggregationConfig, aggregate_class
from protodistill.rsflag import CaptionCandidate, annotate_corpus
from protodistill.synth import SynthSpec, generate

data = generate(SynthSpec(seed=0))
k = 2
train = (data.image_labels == k) & (np.array(data.image_splits) == "train")
feats = data.teacher_feats[train]

# flags come from the caption text alone
cands = annotate_corpus([CaptionCandidate(k, j, t, embedding=data.caption_embeddings[k][j])
                         for j, t in enumerate(data.captions[k])])
cfg = AggregationConfig()
proto = aggregate_class(feats, cands, cfg)

print(f"class {k} ({data.class_names[k]}): {len(cands)} captions, {len(feats)} images")
print(f"median score {proto.stats.median:.4f}, MAD {proto.stats.mad:.4f}\n")
baseline = proto.baseline_weights(cfg.beta)
print("  j  flag   score      z   kept  w(no flag)  w(calibrated)")
for j in np.argsort(-proto.scores):
    kept = j in proto.kept_indices
    print(f"{j:3d}  {int(proto.flags[j]):4d}  {proto.scores[j]:6.3f}  {proto.stats.zscores[j]:5.1f}  "
          f"{'yes' if kept else ' no':>4}  {baseline[j]:10.4f}  {proto.weights[j]:13.4f}")

pruned = sorted(set(range(len(cands))) - proto.kept_indices)
print(f"\npruned {pruned}; planted outliers {data.outlier_indices[k]}")
for j in pruned[:2]:
    print(f"  {data.captions[k][j]!r}")

# how far does the prototype sit from the true class direction?
mean_all = np.mean(data.caption_embeddings[k], axis=0)
mean_all /= np.linalg.norm(mean_all)
print(f"\ncosine to class centre: plain mean {mean_all @ data.centers[k]:.4f}, "
      f"selective {proto.prototype @ data.centers[k]:.4f}")
