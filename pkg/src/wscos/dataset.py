"""Synthetic concealed-object scenes, sparse-annotation samplers and on-disk layout.

A scene is a smooth-noise background texture with 1-3 objects cut from the
same texture family; ``contrast`` sets how far the object texture drifts
from the background (0 = indistinguishable on average). Object masks are
drawn at half resolution and upsampled, so every mask is constant on 2x2
blocks and survives a halve-then-double round trip unchanged.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .augment import LabeledPoint
from .errors import ContractError, FormatError, GenerationError
from .pgm import read_pgm, write_pgm
from .pseudolabel import BACKGROUND, FOREGROUND, UNKNOWN, SparseAnnotation

MIN_AREA, MAX_AREA = 0.03, 0.20


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple = (64, 64)
    n_objects: int = 1
    contrast: float = 0.3
    seed: int = 0

    def __post_init__(self):
        h, w = self.dims
        if h % 8 or w % 8 or h <= 0 or w <= 0:
            raise ContractError(f"dims {self.dims} must be positive multiples of 8")
        if not 1 <= self.n_objects <= 3:
            raise ContractError("n_objects must be 1, 2 or 3")
        if not 0.0 <= self.contrast <= 0.5:
            raise ContractError("contrast must be in [0, 0.5]")


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _blob(rng, shape, area, occupied):
    """One filled, simply connected blob of roughly ``area`` half-res pixels."""
    h, w = shape
    radius = np.sqrt(area / np.pi)
    rr, cc = np.mgrid[0:h, 0:w]
    cy = rng.uniform(radius + 1, h - radius - 1)
    cx = rng.uniform(radius + 1, w - radius - 1)
    dist = np.hypot(rr - cy, cc - cx) / radius
    score = dist + 0.35 * _smooth_noise(rng, shape, max(1.0, radius / 2))
    thr = np.partition(score.ravel(), int(area))[int(area)]
    labels, _ = ndimage.label(score < thr)
    seed_label = labels[np.unravel_index(np.argmin(score), shape)]
    if seed_label == 0:
        return None
    blob = ndimage.binary_fill_holes(labels == seed_label)
    border = np.zeros(shape, dtype=bool)
    border[[0, -1], :] = True
    border[:, [0, -1]] = True
    if (blob & border).any():
        return None
    if (ndimage.binary_dilation(blob, np.ones((3, 3), bool)) & occupied).any():
        return None
    return blob


def _object_masks(rng, spec: SceneSpec, max_tries=200, restarts=20):
    """Place the objects one by one; a crowded layout is discarded and redrawn whole."""
    h, w = spec.dims
    half = (h // 2, w // 2)
    total = h * w
    cap = min(MAX_AREA, 0.5 / spec.n_objects)
    for _ in range(restarts):
        occupied = np.zeros(half, dtype=bool)
        blobs = []
        for _ in range(spec.n_objects):
            for _ in range(max_tries):
                frac = rng.uniform(MIN_AREA * 1.1, cap * 0.9)
                blob = _blob(rng, half, frac * total / 4, occupied)
                if blob is None:
                    continue
                area = 4 * blob.sum() / total
                if MIN_AREA <= area <= MAX_AREA:
                    break
            else:
                break
            blobs.append(blob)
            occupied |= blob
        if len(blobs) == spec.n_objects:
            return [b.repeat(2, 0).repeat(2, 1) for b in blobs]
    raise GenerationError(f"could not place {spec.n_objects} objects in {h}x{w}")


def generate_sample(spec: SceneSpec, rng=None):
    """Return ``(image, gt)``; image values are multiples of 1/255 in [0, 1]."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    h, w = spec.dims
    gt = np.zeros((h, w))
    for blob in _object_masks(rng, spec):
        gt[blob] = 1.0

    bg_mean = rng.uniform(0.25, 0.6)
    bg_sigma = rng.uniform(1.0, 2.0)
    amp = 0.1
    background = bg_mean + amp * _smooth_noise(rng, (h, w), bg_sigma)
    fg_mean = bg_mean + 0.6 * spec.contrast
    fg_sigma = bg_sigma * (1.0 + 2.0 * spec.contrast)
    foreground = fg_mean + amp * _smooth_noise(rng, (h, w), fg_sigma)
    image = np.where(gt > 0.5, foreground, background)
    image = np.clip(np.rint(image * 255.0), 0, 255) / 255.0
    return image, gt


# -- sparse annotations ------------------------------------------------------
def sample_point_annotation(gt, rng):
    """One foreground and one background point drawn uniformly from the mask."""
    gt = np.asarray(gt) > 0.5
    fg, bg = np.argwhere(gt), np.argwhere(~gt)
    if len(fg) == 0 or len(bg) == 0:
        raise ContractError("ground truth needs both foreground and background pixels")
    r, c = fg[rng.integers(len(fg))]
    p_fg = LabeledPoint(int(r), int(c), "fg")
    r, c = bg[rng.integers(len(bg))]
    return SparseAnnotation(points=[p_fg, LabeledPoint(int(r), int(c), "bg")])


_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _walk(region, length, rng, attempts=200):
    cells = np.argwhere(region)
    if len(cells) < length:
        raise ContractError(f"region of {len(cells)} pixels cannot hold a {length}-pixel scribble")
    h, w = region.shape
    for _ in range(attempts):
        r, c = cells[rng.integers(len(cells))]
        path = [(int(r), int(c))]
        seen = {path[0]}
        while len(path) < length:
            r, c = path[-1]
            nxt = [(r + dr, c + dc) for dr, dc in _STEPS
                   if 0 <= r + dr < h and 0 <= c + dc < w
                   and region[r + dr, c + dc] and (r + dr, c + dc) not in seen]
            if not nxt:
                break
            step = nxt[rng.integers(len(nxt))]
            path.append(step)
            seen.add(step)
        if len(path) == length:
            return path
    raise ContractError(f"no self-avoiding {length}-pixel walk found")


def sample_scribble(gt, rng, length=20):
    """Self-avoiding random walks, one inside the object and one outside."""
    gt = np.asarray(gt) > 0.5
    grid = np.full(gt.shape, UNKNOWN, dtype=np.uint8)
    for region, code in ((gt, FOREGROUND), (~gt, BACKGROUND)):
        for r, c in _walk(region, length, rng):
            grid[r, c] = code
    return SparseAnnotation(scribble=grid)


# -- datasets ----------------------------------------------------------------------
@dataclass
class Sample:
    id: str
    image: np.ndarray
    gt: np.ndarray
    annotation: SparseAnnotation
    split: str = "train"
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list
    dims: tuple
    seed: Optional[int] = None

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def by_id(self):
        return {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)


def make_annotation(gt, rng, kind="points", scribble_length=20):
    if kind == "points":
        return sample_point_annotation(gt, rng)
    if kind == "scribble":
        return sample_scribble(gt, rng, scribble_length)
    raise ContractError(f"unknown annotation kind {kind!r}")


def generate_dataset(n_train=200, n_test=50, dims=(64, 64), seed=0, n_objects=None,
                     contrast=(0.2, 0.4), annotation="points", scribble_length=20):
    """Deterministic dataset; ``n_objects=None`` draws 1-3 objects per scene."""
    samples = []
    for split, count, code in (("train", n_train, 0), ("test", n_test, 1)):
        for i in range(count):
            rng = np.random.default_rng([int(seed), code, i])
            k = int(rng.integers(1, 4)) if n_objects is None else int(n_objects)
            lo, hi = contrast if isinstance(contrast, (tuple, list)) else (contrast, contrast)
            c = float(rng.uniform(lo, hi))
            spec = SceneSpec(tuple(dims), k, c, int(rng.integers(2**31)))
            image, gt = generate_sample(spec)
            ann = make_annotation(gt, rng, annotation, scribble_length)
            samples.append(Sample(f"{split}_{i:04d}", image, gt, ann, split,
                                  {"n_objects": k, "contrast": c}))
    return Dataset(samples, tuple(dims), seed)


def resample_points(dataset: Dataset, seed):
    """Fresh two-point annotations for the training split (variance studies)."""
    out = []
    for i, s in enumerate(dataset.samples):
        ann = s.annotation
        if s.split == "train":
            ann = sample_point_annotation(s.gt, np.random.default_rng([int(seed), 7, i]))
        out.append(Sample(s.id, s.image, s.gt, ann, s.split, dict(s.meta)))
    return Dataset(out, dataset.dims, dataset.seed)


# -- on-disk layout ------------------------------------------------------------------
def write_dataset(dataset: Dataset, root):
    for sub in ("images", "gt", "ann"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for s in dataset.samples:
        write_pgm(os.path.join(root, "images", f"{s.id}.pgm"), s.image)
        write_pgm(os.path.join(root, "gt", f"{s.id}.pgm"), s.gt)
        doc = {"points": [p.to_dict() for p in s.annotation.points], "scribble": None}
        if s.annotation.scribble is not None:
            rel = f"ann/{s.id}_scribble.pgm"
            write_pgm(os.path.join(root, rel), s.annotation.scribble, raw=True)
            doc["scribble"] = rel
        with open(os.path.join(root, "ann", f"{s.id}.json"), "w") as fh:
            json.dump(doc, fh)
    manifest = {
        "version": 1,
        "dims": list(dataset.dims),
        "seed": dataset.seed,
        "samples": [{"id": s.id, "split": s.split, **s.meta} for s in dataset.samples],
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def read_dataset(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        entries = manifest["samples"]
        dims = tuple(manifest["dims"])
    except FileNotFoundError as exc:
        raise FormatError(f"{root}: no manifest.json") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest") from exc
    samples = []
    for e in entries:
        sid = e["id"]
        files = [os.path.join(root, "images", f"{sid}.pgm"),
                 os.path.join(root, "gt", f"{sid}.pgm"),
                 os.path.join(root, "ann", f"{sid}.json")]
        for f in files:
            if not os.path.exists(f):
                raise FormatError(f"sample {sid!r}: missing {os.path.relpath(f, root)}")
        image, gt = read_pgm(files[0]), read_pgm(files[1])
        try:
            with open(files[2]) as fh:
                doc = json.load(fh)
            points = [LabeledPoint.from_dict(p) for p in doc["points"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"sample {sid!r}: malformed annotation") from exc
        scribble = None
        if doc.get("scribble"):
            spath = os.path.join(root, doc["scribble"])
            if not os.path.exists(spath):
                raise FormatError(f"sample {sid!r}: missing {doc['scribble']}")
            scribble = read_pgm(spath, raw=True)
        meta = {k: v for k, v in e.items() if k not in ("id", "split")}
        samples.append(Sample(sid, image, gt, SparseAnnotation(points, scribble),
                              e.get("split", "train"), meta))
    return Dataset(samples, dims, manifest.get("seed"))
