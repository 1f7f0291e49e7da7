"""
Multi-scale feature grouping
============================

Features on an 8x8 grid are softly assigned to a handful of learnable
prototypes. Each assignment round normalises twice: every pixel spreads one
unit of attention over the prototypes, and every prototype then averages
the pixels it attracted. Two groupings (2 and 4 prototypes) are blended by a
per-pixel gate.
"""
import numpy as np

from wscos.mfg import feature_grouping, gate_map, init_grouping_params, init_mfg_params, mfg_forward
from wscos.tensor import Tensor

rng = np.random.default_rng(0)
F = Tensor(rng.normal(size=(8, 8, 32)))

params = init_grouping_params(rng, 8, 8, 32, 4, std=0.5)
trace = []
out = feature_grouping(F, params, T=3, trace=trace)
print("grouped features:", out.shape)
for t, (attn, weights) in enumerate(trace):
    print(f"round {t}: pixel rows sum to {attn.sum(-1).min():.6f}..{attn.sum(-1).max():.6f}, "
          f"prototype columns to {weights.sum(-2).min():.6f}..{weights.sum(-2).max():.6f}")

# which prototype wins each pixel after the last round
winner = trace[-1][0].reshape(8, 8, -1).argmax(-1)
print(winner)

mfg = init_mfg_params(rng, 8, 8, 32)          # scales (2, 4)
fused = mfg_forward(F, mfg)
g1 = feature_grouping(F, mfg.scale1)
g2 = feature_grouping(F, mfg.scale2)
gate = gate_map(g1, g2, mfg).data
print("MFG output:", fused.shape, f"gate in [{gate.min():.4f}, {gate.max():.4f}] (starts near 1/2)")
