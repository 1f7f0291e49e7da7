"""End-to-end runs: refine pseudo-labels, train, evaluate; plus the ablation arms."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, generate_dataset, resample_points
from .evalkit import MetricReport, evaluate
from .model import TrainConfig, TrainItem, predict, train
from .pseudolabel import PipelineConfig, PseudoLabel, generate_all
from .provider import OracleConfig, OracleProvider

logger = logging.getLogger(__name__)

# refinement stages switched on cumulatively, one arm per added stage
WSSAM_ARMS = {
    "baseline": dict(fusion=False, pixel_weighting=False, image_selection=False),
    "+fusion": dict(fusion=True, pixel_weighting=False, image_selection=False),
    "+pixel_weighting": dict(fusion=True, pixel_weighting=True, image_selection=False),
    "+image_selection": dict(fusion=True, pixel_weighting=True, image_selection=True),
}


@dataclass
class RunResult:
    report: MetricReport
    history: list
    label_summary: dict = field(default_factory=dict)
    params: object = None


def refine_dataset(dataset: Dataset, provider, cfg: PipelineConfig, jobs=1):
    train = dataset.split("train")
    return generate_all([(s.id, s.image, s.annotation) for s in train], provider, cfg, jobs)


def train_items(dataset: Dataset, labels):
    items = []
    for s in dataset.split("train"):
        lab = labels.get(s.id) if labels is not None else None
        items.append(TrainItem(s.image, s.annotation, lab if isinstance(lab, PseudoLabel) else None))
    return items


def evaluate_model(params, dataset: Dataset, split="test"):
    samples = dataset.split(split)
    preds = predict(params, np.stack([s.image for s in samples]))
    return evaluate(list(preds), [s.gt for s in samples], [s.id for s in samples])


def run_pipeline(dataset: Dataset, oracle: OracleConfig, pipeline: PipelineConfig,
                 train_cfg: TrainConfig, provider=None, jobs=1):
    from .pseudolabel import label_summary
    if provider is None:
        provider = OracleProvider({s.id: s.gt for s in dataset.samples}, oracle)
    labels = refine_dataset(dataset, provider, pipeline, jobs)
    params, history = train(train_items(dataset, labels), train_cfg)
    return RunResult(evaluate_model(params, dataset), history, label_summary(labels), params)


@dataclass
class BenchConfig:
    """Desk-scale benchmark used by the ablation studies."""

    n_train: int = 100
    n_test: int = 40
    dims: tuple = (64, 64)
    contrast: tuple = (0.2, 0.4)
    oracle: OracleConfig = field(default_factory=lambda: OracleConfig(2, 0.3, 0.1))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, learning_rate=3e-3))

    def dataset(self, seed):
        return generate_dataset(self.n_train, self.n_test, self.dims, seed, contrast=self.contrast)


def _seeded(bench: BenchConfig, seed):
    return (replace(bench.oracle, seed=seed), replace(bench.pipeline, seed=seed),
            replace(bench.train, seed=seed))


def run_arm(bench: BenchConfig, seed, pipeline_overrides=None, model_overrides=None, dataset=None):
    oracle, pipeline, tcfg = _seeded(bench, seed)
    if pipeline_overrides:
        pipeline = replace(pipeline, **pipeline_overrides)
    if model_overrides:
        tcfg = replace(tcfg, model=replace(tcfg.model, **model_overrides))
    ds = dataset if dataset is not None else bench.dataset(seed)
    result = run_pipeline(ds, oracle, pipeline, tcfg)
    logger.info("seed %d pipeline=%s model=%s -> MAE %.4f IoU %.4f", seed, pipeline_overrides,
                model_overrides, result.report.mae, result.report.iou)
    return result


def median_metrics(results):
    return {
        "mae": float(np.median([r.report.mae for r in results])),
        "f_beta": float(np.median([r.report.f_beta for r in results])),
        "iou": float(np.median([r.report.iou for r in results])),
    }


def wssam_ablation(bench: BenchConfig, seeds=(0, 1, 2)):
    out = {}
    for name, flags in WSSAM_ARMS.items():
        out[name] = median_metrics([run_arm(bench, s, flags) for s in seeds])
    return out


def mfg_ablation(bench: BenchConfig, seeds=(0, 1, 2)):
    return {
        "full": median_metrics([run_arm(bench, s) for s in seeds]),
        "w/o MFG": median_metrics([run_arm(bench, s, model_overrides={"use_mfg": False}) for s in seeds]),
    }


def k_sweep(bench: BenchConfig, ks=(1, 6, 12), seeds=(0, 1, 2)):
    return {k: median_metrics([run_arm(bench, s, {"K": k}) for s in seeds]) for k in ks}


def point_variance(bench: BenchConfig, repeats=5, seed=0):
    """Re-draw the two-point annotations ``repeats`` times; mean and std of test metrics."""
    base = bench.dataset(seed)
    results = [run_arm(bench, seed, dataset=resample_points(base, 1000 + r)) for r in range(repeats)]
    arr = np.array([[r.report.mae, r.report.f_beta, r.report.iou] for r in results])
    return {"mean": dict(zip(("mae", "f_beta", "iou"), arr.mean(0).tolist())),
            "std": dict(zip(("mae", "f_beta", "iou"), arr.std(0).tolist()))}
