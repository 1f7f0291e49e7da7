"""Promptable mask providers.

A provider turns an image plus point prompts into a per-pixel foreground
probability grid of the same size. The real foundation model is reached
through :class:`FileMaskProvider`, which reads masks that were computed
offline; :class:`OracleProvider` corrupts ground truth in controlled ways and
stands in for it everywhere else.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .augment import IDENTITY, AugSpec, LabeledPoint, apply_grid
from .errors import ContractError, FormatError, MaskNotFoundError, ProviderError
from .pgm import read_pgm, write_pgm

_SQUARE = np.ones((3, 3), dtype=bool)


def check_prob_mask(mask, name="mask"):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or mask.size == 0:
        raise ContractError(f"{name} must be a non-empty 2-D grid")
    if not np.all((mask >= 0.0) & (mask <= 1.0)):
        raise ContractError(f"{name} values must lie in [0, 1]")
    return mask


def check_prompts(prompts: Sequence[LabeledPoint], dims):
    if not prompts:
        raise ContractError("at least one prompt is required")
    h, w = dims
    for p in prompts:
        if not (0 <= p.row < h and 0 <= p.col < w):
            raise ContractError(f"prompt ({p.row}, {p.col}) outside {h}x{w}")
    if not any(p.label == "fg" for p in prompts):
        raise ContractError("at least one foreground prompt is required")


@dataclass(frozen=True)
class OracleConfig:
    boundary_jitter: int = 0
    dropout_rate: float = 0.0
    fp_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.boundary_jitter < 0:
            raise ContractError("boundary_jitter must be >= 0")
        for name in ("dropout_rate", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self):
        return asdict(self)


def _spurious_blob(rng, occupied, dims):
    """Random ellipse that does not touch ``occupied``; None if nothing fits."""
    h, w = dims
    side = min(h, w)
    keep_out = ndimage.binary_dilation(occupied, _SQUARE, iterations=1)
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(50):
        ry = rng.uniform(0.04, 0.1) * side
        rx = rng.uniform(0.04, 0.1) * side
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        blob = ((rr - cy) / max(ry, 0.5)) ** 2 + ((cc - cx) / max(rx, 0.5)) ** 2 <= 1.0
        if blob.any() and not (blob & keep_out).any():
            return blob
    return None


def oracle_segment(gt, prompts: Sequence[LabeledPoint], cfg: OracleConfig, rng=None):
    """Noisy binary copy of ``gt``.

    Blobs holding a foreground prompt are never dropped; the others vanish
    with probability ``dropout_rate``. Each kept blob is dilated or eroded by
    a random radius up to ``boundary_jitter``. With probability ``fp_rate`` a
    spurious blob is added away from the true foreground.
    """
    gt = np.asarray(gt) > 0.5
    check_prompts(prompts, gt.shape)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    labels, n = ndimage.label(gt)
    protected = {labels[p.row, p.col] for p in prompts if p.label == "fg"} - {0}
    out = np.zeros_like(gt)
    for k in range(1, n + 1):
        blob = labels == k
        if k not in protected and rng.random() < cfg.dropout_rate:
            continue
        if cfg.boundary_jitter > 0:
            radius = int(rng.integers(0, cfg.boundary_jitter + 1))
            if radius > 0:
                morph = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
                blob = morph(blob, _SQUARE, iterations=radius)
        out |= blob
    if cfg.fp_rate > 0 and rng.random() < cfg.fp_rate:
        extra = _spurious_blob(rng, gt | out, gt.shape)
        if extra is not None:
            out |= extra
    return out.astype(np.float64)


def view_seed(seed, image_id, aug_index):
    return [int(seed), zlib.crc32(str(image_id).encode()), int(aug_index)]


class MaskProvider:
    """Base class; subclasses implement ``_segment``."""

    def segment(self, image, prompts, *, image_id=None, aug_index=0, spec: AugSpec = IDENTITY):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ContractError("image must be a 2-D grid")
        check_prompts(prompts, image.shape)
        mask = self._segment(image, list(prompts), image_id=image_id,
                             aug_index=aug_index, spec=spec)
        if mask.shape != image.shape:
            raise ProviderError(f"provider returned {mask.shape} for a {image.shape} image")
        return mask

    def _segment(self, image, prompts, *, image_id, aug_index, spec):
        raise NotImplementedError


class OracleProvider(MaskProvider):
    """Corrupted ground truth, deterministic per (seed, image id, view index)."""

    def __init__(self, gts: Mapping[str, np.ndarray], cfg: OracleConfig = OracleConfig()):
        self.gts = gts
        self.cfg = cfg

    def _segment(self, image, prompts, *, image_id, aug_index, spec):
        if image_id not in self.gts:
            raise ProviderError(f"no ground truth for image {image_id!r}")
        gt = apply_grid(self.gts[image_id], spec, "nearest")
        rng = np.random.default_rng(view_seed(self.cfg.seed, image_id, aug_index))
        return oracle_segment(gt, prompts, self.cfg, rng)


class ConstantProvider(MaskProvider):
    """Returns the same probability everywhere; a fully undecided segmenter."""

    def __init__(self, value=0.5):
        self.value = float(value)

    def _segment(self, image, prompts, **_):
        return np.full(image.shape, self.value)


# -- on-disk mask exchange ------------------------------------------------
def mask_path(store_dir, image_id, aug_index):
    return os.path.join(store_dir, str(image_id), f"aug_{int(aug_index)}.pgm")


def file_lookup(image_id, aug_index, store_dir):
    path = mask_path(store_dir, image_id, aug_index)
    if not os.path.exists(path):
        raise MaskNotFoundError(f"no stored mask for ({image_id!r}, {aug_index})")
    return read_pgm(path)


def store_mask(store_dir, image_id, aug_index, mask):
    os.makedirs(os.path.join(store_dir, str(image_id)), exist_ok=True)
    write_pgm(mask_path(store_dir, image_id, aug_index), check_prob_mask(mask))


def write_store_manifest(store_dir, entries):
    """``entries`` holds dicts with ``id``, ``dims``, ``augs`` and optional ``augspecs``."""
    os.makedirs(store_dir, exist_ok=True)
    with open(os.path.join(store_dir, "manifest.json"), "w") as fh:
        json.dump({"version": 1, "images": list(entries)}, fh, indent=2)


def read_store_manifest(store_dir):
    path = os.path.join(store_dir, "manifest.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
        images = doc["images"]
        return {e["id"]: e for e in images}
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed mask-store manifest") from exc


class FileMaskProvider(MaskProvider):
    """Masks precomputed offline, one P5 file per (image, view)."""

    def __init__(self, store_dir):
        self.store_dir = store_dir

    def _segment(self, image, prompts, *, image_id, aug_index, spec):
        mask = file_lookup(image_id, aug_index, self.store_dir)
        if mask.shape != image.shape:
            raise FormatError(
                f"stored mask for ({image_id!r}, {aug_index}) is {mask.shape}, view is {image.shape}")
        return mask
