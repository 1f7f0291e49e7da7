"""Pseudo-label refinement from sparse annotations.

For one training image: sample K geometric views, prompt the provider on each
view, map every mask back to the original frame and average them, weight the
average by one minus its per-pixel binary entropy, and decide from two
image-level uncertainty ratios whether the dense label is trustworthy.
"""
from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import IDENTITY, AugSpec, LabeledPoint, apply_grid, invert_mask, sample_augspec, transform_points
from .errors import ContractError, FormatError, PipelineError, ProviderError
from .pgm import read_pgm, write_pgm
from .provider import check_prob_mask, write_store_manifest

UNKNOWN, BACKGROUND, FOREGROUND = 0, 1, 2


@dataclass
class SparseAnnotation:
    points: list = field(default_factory=list)
    scribble: Optional[np.ndarray] = None  # UNKNOWN / BACKGROUND / FOREGROUND codes

    def validate(self, dims=None):
        has_fg = any(p.label == "fg" for p in self.points)
        if self.scribble is not None:
            s = np.asarray(self.scribble)
            if dims is not None and s.shape != tuple(dims):
                raise ContractError(f"scribble dims {s.shape} differ from image {tuple(dims)}")
            if not np.isin(s, (UNKNOWN, BACKGROUND, FOREGROUND)).all():
                raise ContractError("scribble codes must be 0, 1 or 2")
            has_fg = has_fg or bool((s == FOREGROUND).any())
        if not has_fg:
            raise ContractError("annotation needs at least one foreground cue")
        if dims is not None:
            h, w = dims
            for p in self.points:
                if not (0 <= p.row < h and 0 <= p.col < w):
                    raise ContractError(f"point ({p.row}, {p.col}) outside {h}x{w}")
        return self

    def labeled_pixels(self, dims):
        """(mask, target) grids over the pixels carrying a label."""
        mask = np.zeros(dims, dtype=bool)
        target = np.zeros(dims)
        if self.scribble is not None:
            s = np.asarray(self.scribble)
            mask |= s != UNKNOWN
            target[s == FOREGROUND] = 1.0
        for p in self.points:
            mask[p.row, p.col] = True
            target[p.row, p.col] = 1.0 if p.label == "fg" else 0.0
        return mask, target


@dataclass
class UncertaintyStats:
    u_a: float
    u_r: float
    high_count: int
    conf_fg_count: int


@dataclass
class PipelineConfig:
    K: int = 12
    tau_a: float = 0.1
    tau_r: float = 0.5
    theta_h: float = 0.9
    seed: int = 0
    # ablation switches for the three refinement stages
    fusion: bool = True
    pixel_weighting: bool = True
    image_selection: bool = True

    def __post_init__(self):
        if int(self.K) < 1:
            raise ContractError("K must be >= 1")
        for name in ("tau_a", "tau_r", "theta_h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ContractError(f"{name} must be in (0, 1], got {v}")


@dataclass
class PseudoLabel:
    weighted_mask: np.ndarray
    fused: np.ndarray
    entropy: np.ndarray
    kept: bool
    stats: Optional[UncertaintyStats] = None
    k_effective: int = 0
    augspecs: list = field(default_factory=list)

    def meta(self):
        s = self.stats
        return {
            "kept": bool(self.kept),
            "U_a": None if s is None else float(s.u_a),
            "U_r": None if s is None else float(s.u_r),
            "K_effective": int(self.k_effective),
            "augspecs": [spec.to_dict() for spec in self.augspecs],
        }


# -- per-pixel and per-image statistics ------------------------------------
def fuse(masks: Sequence[np.ndarray]):
    if len(masks) == 0:
        raise ContractError("fuse needs at least one mask")
    masks = [check_prob_mask(m) for m in masks]
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ContractError("all masks must share the same dims")
    return np.clip(np.mean(masks, axis=0), 0.0, 1.0)


def entropy_map(fused):
    """Binary entropy in bits, with 0 log 0 = 0."""
    p = np.asarray(fused, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    return np.clip(h, 0.0, 1.0) + 0.0   # + 0.0 turns -0.0 into 0.0


def uncertainty_stats(entropy, fused, theta_h=0.9):
    entropy = np.asarray(entropy)
    fused = np.asarray(fused)
    if entropy.shape != fused.shape:
        raise ContractError("entropy and fused mask dims differ")
    high = entropy > theta_h
    high_count = int(high.sum())
    conf_fg = int(((fused > 0.5) & ~high).sum())
    return UncertaintyStats(
        u_a=high_count / entropy.size,
        u_r=high_count / max(1, high_count + conf_fg),
        high_count=high_count,
        conf_fg_count=conf_fg,
    )


def select_image(stats: UncertaintyStats, cfg: PipelineConfig):
    return stats.u_a < cfg.tau_a and stats.u_r < cfg.tau_r


def refine(fused, entropy, kept, *, pixel_weighting=True):
    fused = np.asarray(fused, dtype=np.float64)
    entropy = np.asarray(entropy, dtype=np.float64)
    if fused.shape != entropy.shape:
        raise ContractError("fused and entropy dims differ")
    weighted = (1.0 - entropy) * fused if pixel_weighting else fused.copy()
    return PseudoLabel(weighted_mask=weighted, fused=fused, entropy=entropy, kept=bool(kept))


# -- prompts ------------------------------------------------------------------
def nine_box_points(scribble, label, rng):
    """One scribble pixel per occupied cell of a 3x3 split of the scribble's box."""
    code = {"fg": FOREGROUND, "bg": BACKGROUND}[label]
    rows, cols = np.nonzero(np.asarray(scribble) == code)
    if rows.size == 0:
        raise ContractError(f"scribble has no {label} pixels")
    r_edges = np.linspace(rows.min(), rows.max() + 1, 4)
    c_edges = np.linspace(cols.min(), cols.max() + 1, 4)
    r_cell = np.clip(np.searchsorted(r_edges, rows, side="right") - 1, 0, 2)
    c_cell = np.clip(np.searchsorted(c_edges, cols, side="right") - 1, 0, 2)
    cell = r_cell * 3 + c_cell
    points = []
    for k in range(9):
        idx = np.flatnonzero(cell == k)
        if idx.size:
            j = idx[rng.integers(idx.size)]
            points.append(LabeledPoint(int(rows[j]), int(cols[j]), label))
    return points


def annotation_prompts(ann: SparseAnnotation, rng):
    prompts = list(ann.points)
    if ann.scribble is not None:
        for label, code in (("fg", FOREGROUND), ("bg", BACKGROUND)):
            if (np.asarray(ann.scribble) == code).any():
                prompts.extend(nine_box_points(ann.scribble, label, rng))
    return prompts


# -- pipeline -------------------------------------------------------------------
def _image_rng(cfg: PipelineConfig, image_id, stream):
    return np.random.default_rng([int(cfg.seed), zlib.crc32(str(image_id).encode()), stream])


def view_specs(cfg: PipelineConfig, image_id):
    """The K views used for ``image_id``; a single identity view without fusion."""
    if not cfg.fusion:
        return [IDENTITY]
    rng = _image_rng(cfg, image_id, 0)
    return [sample_augspec(rng) for _ in range(int(cfg.K))]


def generate_pseudo_label(image, annotation: SparseAnnotation, provider, cfg: PipelineConfig,
                          image_id="image"):
    image = np.asarray(image, dtype=np.float64)
    annotation.validate(image.shape)
    prompts = annotation_prompts(annotation, _image_rng(cfg, image_id, 1))
    specs = view_specs(cfg, image_id)
    masks, used = [], []
    for k, spec in enumerate(specs):
        view = apply_grid(image, spec, "bilinear")
        view_prompts = transform_points(prompts, spec, image.shape)
        try:
            m = provider.segment(view, view_prompts, image_id=image_id, aug_index=k, spec=spec)
        except ProviderError:
            continue
        masks.append(invert_mask(m, spec, image.shape))
        used.append(spec)
    if not masks:
        raise PipelineError(f"every view failed for image {image_id!r}")
    fused = fuse(masks)
    ent = entropy_map(fused)
    stats = uncertainty_stats(ent, fused, cfg.theta_h)
    kept = select_image(stats, cfg) if cfg.image_selection else True
    label = refine(fused, ent, kept, pixel_weighting=cfg.pixel_weighting)
    label.stats = stats
    label.k_effective = len(masks)
    label.augspecs = used
    return label


def generate_all(samples, provider, cfg: PipelineConfig, jobs=1):
    """Pseudo-labels for ``(image_id, image, annotation)`` triples, in input order.

    Images whose views all fail map to a ``PipelineError`` instance instead of
    a label so one bad image does not abort the batch.
    """
    def run(item):
        image_id, image, ann = item
        try:
            return generate_pseudo_label(image, ann, provider, cfg, image_id)
        except PipelineError as exc:
            return exc

    items = list(samples)
    if jobs <= 1:
        results = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, items))
    return {it[0]: res for it, res in zip(items, results)}


# -- persistence ----------------------------------------------------------------
def write_pseudo_label(out_dir, image_id, label: PseudoLabel):
    d = os.path.join(out_dir, str(image_id))
    os.makedirs(d, exist_ok=True)
    write_pgm(os.path.join(d, "pseudo.pgm"), label.weighted_mask)
    write_pgm(os.path.join(d, "entropy.pgm"), label.entropy)
    write_pgm(os.path.join(d, "fused.pgm"), label.fused)
    with open(os.path.join(d, "meta.json"), "w") as fh:
        json.dump(label.meta(), fh, indent=2)


def read_pseudo_label(out_dir, image_id):
    d = os.path.join(out_dir, str(image_id))
    try:
        with open(os.path.join(d, "meta.json")) as fh:
            meta = json.load(fh)
        weighted = read_pgm(os.path.join(d, "pseudo.pgm"))
        ent = read_pgm(os.path.join(d, "entropy.pgm"))
        fused_path = os.path.join(d, "fused.pgm")
        fused = read_pgm(fused_path) if os.path.exists(fused_path) else weighted
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{d}: malformed pseudo-label") from exc
    stats = None
    if meta.get("U_a") is not None:
        stats = UncertaintyStats(meta["U_a"], meta["U_r"], -1, -1)
    return PseudoLabel(
        weighted_mask=weighted, fused=fused, entropy=ent, kept=bool(meta["kept"]),
        stats=stats, k_effective=int(meta.get("K_effective", 0)),
        augspecs=[AugSpec.from_dict(s) for s in meta.get("augspecs", [])],
    )


def export_requests(store_dir, samples, cfg: PipelineConfig):
    """Write the augmented views and prompts an external segmenter must answer.

    For each ``(image_id, image, annotation)`` this writes
    ``<store>/<id>/view_<k>.pgm`` and ``prompts_<k>.json`` and lists the views
    in the store manifest; answers go to ``aug_<k>.pgm`` in the view's frame.
    """
    entries = []
    for image_id, image, ann in samples:
        image = np.asarray(image, dtype=np.float64)
        prompts = annotation_prompts(ann.validate(image.shape), _image_rng(cfg, image_id, 1))
        specs = view_specs(cfg, image_id)
        d = os.path.join(store_dir, str(image_id))
        os.makedirs(d, exist_ok=True)
        for k, spec in enumerate(specs):
            write_pgm(os.path.join(d, f"view_{k}.pgm"), apply_grid(image, spec, "bilinear"))
            with open(os.path.join(d, f"prompts_{k}.json"), "w") as fh:
                json.dump([p.to_dict() for p in transform_points(prompts, spec, image.shape)], fh)
        entries.append({"id": str(image_id), "dims": list(image.shape),
                        "augs": list(range(len(specs))),
                        "augspecs": [s.to_dict() for s in specs]})
    write_store_manifest(store_dir, entries)
    return entries


def label_summary(labels):
    ok = [lb for lb in labels.values() if isinstance(lb, PseudoLabel)]
    kept = [lb for lb in ok if lb.kept]
    return {
        "images": len(labels),
        "failed": len(labels) - len(ok),
        "kept": len(kept),
        "rejected": len(ok) - len(kept),
        "mean_U_a": float(np.mean([lb.stats.u_a for lb in ok])) if ok else None,
        "mean_U_r": float(np.mean([lb.stats.u_r for lb in ok])) if ok else None,
    }


def config_dict(cfg: PipelineConfig):
    return asdict(cfg)
