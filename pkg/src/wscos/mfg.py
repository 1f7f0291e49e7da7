"""Multi-scale feature grouping.

``feature_grouping`` softly assigns every spatial feature to N learnable
prototypes and refines the prototypes with a GRU for T rounds; the refined
prototypes are painted back onto the grid, projected to C/N channels each
and concatenated. ``mfg_forward`` runs two groupings at different N and
blends them with a learned per-location gate:

    G1 = group_N1(F)
    G2 = group_N2(F + G1)
    out = F + a * G1 + (1 - a) * G2,   a = sigmoid([G1, G2] w + b)

Feature maps are (B, H, W, C) tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .tensor import GRUWeights, Tensor, parameter

INIT_STD = 0.02


@dataclass
class GroupingParams:
    prototypes: Tensor       # (N, C)
    pos_embed: Tensor        # (H, W, C)
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gru: GRUWeights
    projections: list        # N tensors of shape (C, C // N)

    @property
    def n_prototypes(self):
        return self.prototypes.shape[0]

    @property
    def channels(self):
        return self.prototypes.shape[1]

    def tensors(self):
        return [self.prototypes, self.pos_embed, self.w_q, self.w_k, self.w_v,
                *self.gru.tensors(), *self.projections]


@dataclass
class MFGParams:
    scale1: GroupingParams
    scale2: GroupingParams
    gate_w: Tensor           # (2C, 1)
    gate_b: Tensor           # (1,)

    def tensors(self):
        return [*self.scale1.tensors(), *self.scale2.tensors(), self.gate_w, self.gate_b]


def init_grouping_params(rng, H, W, C, N, std=INIT_STD):
    if C % N:
        raise ContractError(f"channels {C} not divisible by {N} prototypes")

    def normal(*shape):
        return parameter(rng.normal(0.0, std, shape))
    return GroupingParams(
        prototypes=normal(N, C),
        pos_embed=normal(H, W, C),
        w_q=normal(C, C),
        w_k=normal(C, C),
        w_v=normal(C, C),
        gru=GRUWeights.init(rng, C, std),
        projections=[normal(C, C // N) for _ in range(N)],
    )


def init_mfg_params(rng, H, W, C, n1=2, n2=4, std=INIT_STD):
    if n1 == n2:
        raise ContractError("the two grouping scales must differ")
    return MFGParams(
        scale1=init_grouping_params(rng, H, W, C, n1, std),
        scale2=init_grouping_params(rng, H, W, C, n2, std),
        gate_w=parameter(rng.normal(0.0, std, (2 * C, 1))),
        gate_b=parameter(np.zeros(1)),
    )


def _as_batched(F):
    F = tn.as_tensor(F)
    if F.ndim == 3:
        return F.reshape((1,) + F.shape), True
    if F.ndim != 4:
        raise ContractError(f"feature map must be (H, W, C) or (B, H, W, C), got {F.shape}")
    return F, False


def feature_grouping(F, params: GroupingParams, T=3, trace=None):
    """Group ``F`` with ``params``; output has the same shape as ``F``.

    If ``trace`` is a list, the per-iteration (softmaxed attention,
    spatially normalised weights) arrays are appended to it.
    """
    F, squeeze = _as_batched(F)
    B, H, W, C = F.shape
    N = params.n_prototypes
    if C != params.channels or C % N:
        raise ContractError(f"C={C} incompatible with {N} prototypes of width {params.channels}")
    if params.pos_embed.shape != (H, W, C):
        raise ContractError(f"positional embedding {params.pos_embed.shape} vs grid {(H, W, C)}")
    if T < 1:
        raise ContractError("T must be >= 1")

    fp = (F + params.pos_embed).reshape(B, H * W, C)
    keys = fp @ params.w_k
    values = fp @ params.w_v
    keys_t = tn.swapaxes(keys, 1, 2)                       # (B, C, HW)
    scale = 1.0 / math.sqrt(C)
    protos = params.prototypes.reshape(1, N, C) + tn.Tensor(np.zeros((B, 1, 1)))
    for _ in range(T):
        queries = protos @ params.w_q                       # (B, N, C)
        logits = tn.swapaxes(queries @ keys_t, 1, 2) * scale  # (B, HW, N)
        attn = tn.softmax_axis(logits, axis=2)              # each location sums to 1 over prototypes
        weights = attn / attn.sum(axis=1, keepdims=True)    # each prototype sums to 1 over locations
        if trace is not None:
            trace.append((attn.data.copy(), weights.data.copy()))
        updates = tn.swapaxes(weights, 1, 2) @ values       # (B, N, C)
        protos = tn.gru_cell(updates.reshape(B * N, C), protos.reshape(B * N, C),
                             params.gru).reshape(B, N, C)

    parts = []
    pe = params.pos_embed.reshape(1, H * W, C)
    for n in range(N):
        painted = protos[:, n:n + 1, :] + pe                # (B, HW, C)
        parts.append(painted @ params.projections[n])       # (B, HW, C/N)
    out = tn.concat(parts, axis=2).reshape(B, H, W, C)
    return out.reshape(H, W, C) if squeeze else out


def gate_map(g1, g2, params: MFGParams):
    both = tn.concat([g1, g2], axis=-1)
    return tn.sigmoid(both @ params.gate_w + params.gate_b)


def mfg_forward(F, params: MFGParams, T=3, trace=None):
    F, squeeze = _as_batched(F)
    C = F.shape[-1]
    if params.scale1.channels != C or params.scale2.channels != C:
        raise ContractError("grouping scales do not match the feature width")
    if params.scale1.n_prototypes == params.scale2.n_prototypes:
        raise ContractError("the two grouping scales must differ")
    t1 = t2 = None
    if trace is not None:
        t1, t2 = [], []
        trace.extend([t1, t2])
    g1 = feature_grouping(F, params.scale1, T, t1)
    g2 = feature_grouping(F + g1, params.scale2, T, t2)
    alpha = gate_map(g1, g2, params)
    out = F + alpha * g1 + (1.0 - alpha) * g2
    return out[0] if squeeze else out
