"""
Pseudo-labels from a noisy mask provider
========================================

A synthetic two-object scene is segmented by a provider that wobbles object
boundaries, misses unprompted objects and hallucinates blobs. Averaging the
masks of twelve augmented views, weighting by entropy and scoring the image
shows how each refinement stage reacts to the noise.
"""
import numpy as np

from wscos.dataset import SceneSpec, generate_sample, sample_point_annotation
from wscos.evalkit import iou_score, mae
from wscos.provider import ConstantProvider, OracleConfig, OracleProvider
from wscos.pseudolabel import PipelineConfig, generate_pseudo_label

image, gt = generate_sample(SceneSpec((64, 64), n_objects=2, contrast=0.3, seed=4))
ann = sample_point_annotation(gt, np.random.default_rng(0))
print("prompts:", [(p.row, p.col, p.label) for p in ann.points])

noisy = OracleProvider({"scene": gt}, OracleConfig(boundary_jitter=2, dropout_rate=0.3, fp_rate=0.1, seed=1))

# one view, no refinement: whatever the provider returned
single = generate_pseudo_label(image, ann, noisy, PipelineConfig(fusion=False, pixel_weighting=False,
                                                                 image_selection=False), "scene")
# twelve views, fused and entropy weighted
full = generate_pseudo_label(image, ann, noisy, PipelineConfig(K=12), "scene")

for name, lab in (("single view", single), ("fused", full)):
    print(f"{name:12s} mask IoU {iou_score(lab.fused, gt):.3f}  MAE {mae(lab.fused, gt):.4f}")
print(f"weighted     mask IoU {iou_score(full.weighted_mask, gt):.3f}  MAE {mae(full.weighted_mask, gt):.4f}")
print(f"U_a = {full.stats.u_a:.3f}, U_r = {full.stats.u_r:.3f}, kept = {full.kept}")

# fused values are vote fractions k/12; only k in 4..8 counts as high uncertainty
votes = np.rint(full.fused * 12).astype(int)
print("vote histogram:", np.bincount(votes.ravel(), minlength=13).tolist())

# a provider that always answers 0.5 is maximally uncertain and gets rejected
flat = generate_pseudo_label(image, ann, ConstantProvider(0.5), PipelineConfig(), "scene")
print(f"constant provider: U_a = {flat.stats.u_a:.2f}, kept = {flat.kept}")
