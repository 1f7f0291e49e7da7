"""Geometric augmentations with exact inverses for grids, masks and point prompts.

An :class:`AugSpec` is applied as flip, then rotation, then scaling; its
inverse undoes the steps in reverse. Rotations by +90 degrees map pixel
``(r, c)`` of an ``H x W`` grid to ``(c, H - 1 - r)``, so ``[[a, b], [c, d]]``
becomes ``[[c, a], [d, b]]``.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

FLIPS = ("none", "horizontal")
ROTATIONS = (0, 90, 180, 270)
SCALES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class AugSpec:
    flip: str = "none"
    rotation: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.flip not in FLIPS:
            raise ContractError(f"flip must be one of {FLIPS}, got {self.flip!r}")
        if self.rotation not in ROTATIONS:
            raise ContractError(f"rotation must be one of {ROTATIONS}, got {self.rotation!r}")
        if self.scale not in SCALES:
            raise ContractError(f"scale must be one of {SCALES}, got {self.scale!r}")

    @property
    def is_identity(self):
        return self.flip == "none" and self.rotation == 0 and self.scale == 1.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(flip=d["flip"], rotation=int(d["rotation"]), scale=float(d["scale"]))


IDENTITY = AugSpec()


def all_specs(scales: Sequence[float] = SCALES):
    return [AugSpec(f, r, s) for f, r, s in itertools.product(FLIPS, ROTATIONS, scales)]


@dataclass(frozen=True)
class LabeledPoint:
    row: int
    col: int
    label: str  # "fg" or "bg"

    def __post_init__(self):
        if self.label not in ("fg", "bg"):
            raise ContractError(f"point label must be 'fg' or 'bg', got {self.label!r}")

    def to_dict(self):
        return {"row": int(self.row), "col": int(self.col), "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["row"]), int(d["col"]), d["label"])


def sample_augspec(rng: np.random.Generator) -> AugSpec:
    flip = FLIPS[rng.integers(len(FLIPS))]
    rotation = ROTATIONS[rng.integers(len(ROTATIONS))]
    scale = SCALES[rng.integers(len(SCALES))]
    return AugSpec(flip, rotation, scale)


def augmented_dims(dims, spec: AugSpec):
    h, w = dims
    if spec.rotation in (90, 270):
        h, w = w, h
    if spec.scale == 0.5 and (h % 2 or w % 2):
        raise ContractError(f"cannot halve odd dims {dims}")
    return int(h * spec.scale), int(w * spec.scale)


def _rot_k(rotation):
    # np.rot90 turns the array counter-clockwise in display order; ours goes the other way
    return -(rotation // 90)


def _downscale(grid, interpolation):
    if interpolation == "nearest":
        return grid[::2, ::2].copy()
    # bilinear with half-pixel centres at factor 1/2 is exactly a 2x2 mean
    h, w = grid.shape
    return grid.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _upscale(grid, interpolation):
    if interpolation == "nearest":
        return grid.repeat(2, axis=0).repeat(2, axis=1)
    h, w = grid.shape
    out = grid
    for axis, n in ((0, h), (1, w)):
        src = (np.arange(2 * n) + 0.5) / 2 - 0.5
        src = np.clip(src, 0, n - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = src - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        shape = [1, 1]
        shape[axis] = -1
        frac = frac.reshape(shape)
        out = a * (1 - frac) + b * frac
    return out


def apply_grid(grid, spec: AugSpec, interpolation="nearest"):
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.size == 0:
        raise ContractError("apply_grid expects a non-empty 2-D grid")
    if interpolation not in ("nearest", "bilinear"):
        raise ContractError(f"unknown interpolation {interpolation!r}")
    augmented_dims(grid.shape, spec)  # validates halving
    out = grid[:, ::-1] if spec.flip == "horizontal" else grid
    out = np.rot90(out, _rot_k(spec.rotation))
    if spec.scale == 0.5:
        out = _downscale(out, interpolation)
    elif spec.scale == 2.0:
        out = _upscale(out, interpolation)
    return np.ascontiguousarray(out)


def invert_grid(grid, spec: AugSpec, dims=None, interpolation="nearest"):
    """Map a grid in the augmented frame back to the original frame."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ContractError("invert_grid expects a 2-D grid")
    if dims is not None and tuple(grid.shape) != augmented_dims(dims, spec):
        raise ContractError(
            f"grid dims {grid.shape} inconsistent with spec {spec} applied to {tuple(dims)}")
    out = grid
    if spec.scale == 2.0:
        if out.shape[0] % 2 or out.shape[1] % 2:
            raise ContractError(f"dims {out.shape} cannot come from a 2x upscale")
        out = _downscale(out, interpolation)
    elif spec.scale == 0.5:
        out = _upscale(out, interpolation)
    out = np.rot90(out, -_rot_k(spec.rotation))
    if spec.flip == "horizontal":
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def invert_mask(mask, spec: AugSpec, dims=None):
    return invert_grid(mask, spec, dims, interpolation="nearest")


def transform_point(row, col, spec: AugSpec, dims):
    h, w = dims
    if not (0 <= row < h and 0 <= col < w):
        raise ContractError(f"point ({row}, {col}) outside {h}x{w}")
    if spec.flip == "horizontal":
        col = w - 1 - col
    for _ in range(spec.rotation // 90):
        row, col = col, h - 1 - row
        h, w = w, h
    if spec.scale == 2.0:
        row, col = 2 * row, 2 * col
    elif spec.scale == 0.5:
        row, col = row // 2, col // 2
    return row, col


def transform_points(points: Sequence[LabeledPoint], spec: AugSpec, dims):
    augmented_dims(dims, spec)
    out = []
    for p in points:
        r, c = transform_point(p.row, p.col, spec, dims)
        out.append(LabeledPoint(r, c, p.label))
    return out
