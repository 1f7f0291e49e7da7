"""Encoder / feature-grouping / decoder segmenter, its losses and training loop."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError, FormatError, TrainingError
from .mfg import MFGParams, init_mfg_params, mfg_forward
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)

EPS_PROB = 1e-7
IOU_SMOOTH = 1.0
ENC_WIDTHS = (1, 16, 32)
DEC_WIDTHS = (16, 8, 1)


@dataclass
class ModelConfig:
    channels: int = 32
    n1: int = 2
    n2: int = 4
    T: int = 3
    use_mfg: bool = True


@dataclass
class SegmenterParams:
    config: ModelConfig
    feat_dims: tuple
    encoder: list            # [(weight, bias)] * 3, stride-2 3x3 convs
    decoder: list            # [(weight, bias)] * 3, each after a 2x upsample
    mfg: Optional[MFGParams] = None

    def named_tensors(self):
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out += [(f"encoder.{i}.weight", w), (f"encoder.{i}.bias", b)]
        if self.mfg is not None:
            for scale in ("scale1", "scale2"):
                g = getattr(self.mfg, scale)
                out += [(f"mfg.{scale}.prototypes", g.prototypes),
                        (f"mfg.{scale}.pos_embed", g.pos_embed),
                        (f"mfg.{scale}.w_q", g.w_q), (f"mfg.{scale}.w_k", g.w_k),
                        (f"mfg.{scale}.w_v", g.w_v)]
                for k in ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"):
                    out.append((f"mfg.{scale}.gru.{k}", getattr(g.gru, k)))
                out += [(f"mfg.{scale}.proj.{n}", p) for n, p in enumerate(g.projections)]
            out += [("mfg.gate.weight", self.mfg.gate_w), ("mfg.gate.bias", self.mfg.gate_b)]
        for i, (w, b) in enumerate(self.decoder):
            out += [(f"decoder.{i}.weight", w), (f"decoder.{i}.bias", b)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def feat_dims_image(self):
        return (self.feat_dims[0] * 8, self.feat_dims[1] * 8)


def _conv_param(rng, cout, cin, std=None):
    std = math.sqrt(2.0 / (cin * 9)) if std is None else std
    return parameter(rng.normal(0.0, std, (cout, cin, 3, 3))), parameter(np.zeros(cout))


def init_segmenter(rng, image_dims, config: ModelConfig = ModelConfig()):
    h, w = image_dims
    if h % 8 or w % 8:
        raise ContractError(f"image dims {image_dims} must be divisible by 8")
    C = config.channels
    if config.use_mfg and (C % config.n1 or C % config.n2):
        raise ContractError(f"channels {C} must be divisible by {config.n1} and {config.n2}")
    widths = ENC_WIDTHS + (C,)
    encoder = [_conv_param(rng, widths[i + 1], widths[i]) for i in range(3)]
    dec_in = (C,) + DEC_WIDTHS[:-1]
    decoder = [_conv_param(rng, DEC_WIDTHS[i], dec_in[i]) for i in range(2)]
    decoder.append(_conv_param(rng, 1, dec_in[2], std=0.01))
    feat = (h // 8, w // 8)
    mfg = init_mfg_params(rng, feat[0], feat[1], C, config.n1, config.n2) if config.use_mfg else None
    return SegmenterParams(config, feat, encoder, decoder, mfg)


def forward_logits(params: SegmenterParams, images):
    """images: (B, H, W) or (H, W) array; returns (B, H, W) logits."""
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, H, W = x.shape
    if H % 8 or W % 8:
        raise ContractError(f"image dims {(H, W)} must be divisible by 8")
    if (H // 8, W // 8) != tuple(params.feat_dims):
        raise ContractError(f"model built for {params.feat_dims_image()} images, got {(H, W)}")
    h = Tensor(x.reshape(B, 1, H, W))
    for wt, b in params.encoder:
        h = tn.silu(tn.conv2d(h, wt, b, stride=2, padding=1))
    if params.mfg is not None:
        f = tn.transpose(h, (0, 2, 3, 1))
        f = mfg_forward(f, params.mfg, params.config.T)
        h = tn.transpose(f, (0, 3, 1, 2))
    for i, (wt, b) in enumerate(params.decoder):
        h = tn.conv2d(tn.upsample2x(h), wt, b, stride=1, padding=1)
        if i < len(params.decoder) - 1:
            h = tn.silu(h)
    return h.reshape(B, H, W)


def forward(params: SegmenterParams, images):
    """Foreground probabilities in (0, 1), shape (B, H, W)."""
    return tn.sigmoid(forward_logits(params, images))


def predict(params: SegmenterParams, images, batch_size=16):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = [forward(params, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    out = np.concatenate(out, axis=0)
    return out[0] if single else out


# -- losses --------------------------------------------------------------------
def _clipped(pred):
    return tn.clip(tn.as_tensor(pred), EPS_PROB, 1.0 - EPS_PROB)


def bce_map(pred, target):
    """Per-pixel -[t log p + (1 - t) log(1 - p)] with clipped p; soft t allowed."""
    p = _clipped(pred)
    t = np.asarray(target, dtype=np.float64)
    return -(tn.log(p) * t + tn.log(1.0 - p) * (1.0 - t))


def partial_ce(pred, ann_or_mask, target=None):
    """Mean cross-entropy over labelled pixels only.

    Accepts a ``SparseAnnotation`` or an explicit (mask, target) pair; batched
    inputs of shape (B, H, W) return one value per image.
    """
    pred = tn.as_tensor(pred)
    if target is None:
        mask, target = ann_or_mask.labeled_pixels(pred.shape[-2:])
    else:
        mask = np.asarray(ann_or_mask, dtype=bool)
    counts = mask.sum(axis=(-2, -1))
    if np.any(counts == 0):
        raise ContractError("partial cross-entropy needs at least one labelled pixel")
    ce = bce_map(pred, target) * mask.astype(np.float64)
    return ce.sum(axis=(-2, -1)) / counts.astype(np.float64)


def dense_ce(pred, target):
    return bce_map(pred, target).mean(axis=(-2, -1))


def soft_iou_loss(pred, target):
    pred = tn.as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ContractError(f"prediction {pred.shape} and target {t.shape} differ")
    inter = (pred * t).sum(axis=(-2, -1))
    union = pred.sum(axis=(-2, -1)) + t.sum(axis=(-2, -1)) - inter
    return 1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)


def total_loss(pred, ann, label):
    """Loss for one image: sparse term, plus the dense terms when the label is kept."""
    loss = partial_ce(pred, ann)
    if label is None or not label.kept:
        return loss
    return loss + dense_ce(pred, label.weighted_mask) + soft_iou_loss(pred, label.weighted_mask)


def batch_loss(pred, pce_mask, pce_target, dense_target, kept):
    """Batch mean of per-image losses; images with ``kept`` False get the sparse term only."""
    kept = np.asarray(kept, dtype=np.float64)
    loss = partial_ce(pred, pce_mask, pce_target)
    if kept.any():
        dense = dense_ce(pred, dense_target) + soft_iou_loss(pred, dense_target)
        loss = loss + dense * kept
    return loss.mean()


# -- optimisation ------------------------------------------------------------------
class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 40
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 80
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ContractError("batch_size, epochs and learning_rate must be positive")


@dataclass
class TrainItem:
    image: np.ndarray
    annotation: object       # SparseAnnotation
    label: object = None     # PseudoLabel or None for sparse-only training


def _stack(items):
    dims = items[0].image.shape
    images = np.stack([it.image for it in items])
    masks, targets = zip(*(it.annotation.labeled_pixels(dims) for it in items))
    dense = np.stack([it.label.weighted_mask if it.label is not None else np.zeros(dims)
                      for it in items])
    kept = np.array([it.label is not None and bool(it.label.kept) for it in items])
    return images, np.stack(masks), np.stack(targets), dense, kept


def train(items: Sequence[TrainItem], cfg: TrainConfig, params=None, callback=None):
    """Adam with step decay. Returns (params, history of per-epoch mean losses)."""
    items = list(items)
    if not items:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_segmenter(rng, items[0].image.shape, cfg.model)
    opt = Adam(params.tensors(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_interval)
        order = rng.permutation(len(items))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[j] for j in order[start:start + cfg.batch_size]]
            images, m, t, dense, kept = _stack(batch)
            opt.zero_grad()
            loss = batch_loss(forward(params, images), m, t, dense, kept)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("loss is not finite", epoch)
            loss.backward()
            opt.step()
            total += value * len(batch)
            seen += len(batch)
        history.append(total / seen)
        logger.debug("epoch %d loss %.5f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return params, history


# -- checkpoints -----------------------------------------------------------------------
MAGIC = b"WSCOSCKP"
VERSION = 1


def save_checkpoint(directory, params: SegmenterParams, extra=None):
    """Write ``model.ckpt`` (header + little-endian f64 blobs) and ``arch.json``."""
    os.makedirs(directory, exist_ok=True)
    named = params.named_tensors()
    with open(os.path.join(directory, "model.ckpt"), "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(named)))
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    arch = {
        "version": VERSION,
        "model": asdict(params.config),
        "image_dims": list(params.feat_dims_image()),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    if extra:
        arch["extra"] = extra
    with open(os.path.join(directory, "arch.json"), "w") as fh:
        json.dump(arch, fh, indent=2)


def load_checkpoint(directory):
    try:
        with open(os.path.join(directory, "arch.json")) as fh:
            arch = json.load(fh)
        config = ModelConfig(**arch["model"])
        dims = tuple(arch["image_dims"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{directory}: malformed arch.json") from exc
    params = init_segmenter(np.random.default_rng(0), dims, config)
    named = params.named_tensors()
    if [n for n, _ in named] != [t["name"] for t in arch["tensors"]]:
        raise FormatError(f"{directory}: tensor list does not match the architecture")
    with open(os.path.join(directory, "model.ckpt"), "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if head[:len(MAGIC)] != MAGIC:
            raise FormatError(f"{directory}: bad checkpoint magic")
        version, count = struct.unpack("<II", head[len(MAGIC):])
        if version != VERSION or count != len(named):
            raise FormatError(f"{directory}: checkpoint version {version} / {count} tensors unsupported")
        for _, t in named:
            n = t.data.size
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise FormatError(f"{directory}: truncated checkpoint")
            t.data = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(t.shape)
        if fh.read(1):
            raise FormatError(f"{directory}: trailing bytes in checkpoint")
    return params
