"""Command-line front end: ``gen``, ``refine``, ``train``, ``eval`` and ``ablate``.

Every invocation creates a run directory (``runs/<timestamp>/`` unless
``--run-dir`` is given) holding the fully resolved config, the seeds, library
versions and the command's outputs. Feeding the echoed ``config.yaml`` back
through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import os
import platform
import sys
import numpy as np
import yaml

from . import __version__
from .dataset import generate_dataset, read_dataset, resample_points, write_dataset
from .errors import (ConfigError, ContractError, FormatError, GenerationError, PipelineError,
                     ProviderError, TrainingError, WscosError)
from .evalkit import evaluate
from .model import ModelConfig, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from .provider import ConstantProvider, FileMaskProvider, OracleConfig, OracleProvider
from .pseudolabel import (PipelineConfig, PseudoLabel, export_requests, generate_all, label_summary,
                          read_pseudo_label, write_pseudo_label)

logger = logging.getLogger("wscos")

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "n_train": 200, "n_test": 50, "dims": [64, 64], "n_objects": None,
        "contrast": [0.2, 0.4], "annotation": "points", "scribble_length": 20,
    },
    "pipeline": {
        "K": 12, "tau_a": 0.1, "tau_r": 0.5, "theta_h": 0.9,
        "fusion": True, "pixel_weighting": True, "image_selection": True,
        "provider": "oracle", "mask_store": None, "constant": 0.5, "jobs": 1,
        "oracle": {"boundary_jitter": 0, "dropout_rate": 0.0, "fp_rate": 0.0},
    },
    "mfg": {"use_mfg": True, "channels": 32, "n1": 2, "n2": 4, "T": 3},
    "train": {
        "batch_size": 8, "learning_rate": 1e-3, "epochs": 40,
        "lr_decay_factor": 0.1, "lr_decay_interval": 80,
    },
    "eval": {"split": "test"},
    "ablation": {
        "study": "wssam", "seeds": [0, 1, 2], "ks": [1, 6, 12], "repeats": 5,
        "n_train": 100, "n_test": 40, "epochs": 40, "learning_rate": 3e-3,
        "oracle": {"boundary_jitter": 2, "dropout_rate": 0.3, "fp_rate": 0.1},
    },
}

# exception class -> (exit code, category printed in the error line); first match wins
_EXIT = {
    ConfigError: (2, "config"),
    FileExistsError: (3, "refused"),
    FormatError: (4, "format"),
    FileNotFoundError: (4, "io"),
    ProviderError: (5, "provider"),
    PipelineError: (5, "pipeline"),
    GenerationError: (5, "generation"),
    TrainingError: (6, "training"),
    ContractError: (7, "contract"),
    WscosError: (1, "error"),
}


# -- configuration --------------------------------------------------------------------
def _check_type(path, default, value):
    # a None default accepts any scalar; everything else must keep its type
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            value = int(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def merge_config(base, override, path=""):
    """Recursively merge ``override`` into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = _check_type(where, base[key], value)
    return out


def apply_set(cfg, assignment):
    """Apply one ``key.path=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    override = value
    for part in reversed(path.strip().split(".")):
        override = {part: override}
    return merge_config(cfg, override)


def load_config(path=None, sets=()):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = merge_config(cfg, doc)
    for s in sets:
        cfg = apply_set(cfg, s)
    return cfg


def pipeline_config(cfg):
    p = cfg["pipeline"]
    return PipelineConfig(K=p["K"], tau_a=p["tau_a"], tau_r=p["tau_r"], theta_h=p["theta_h"],
                          seed=cfg["seed"], fusion=p["fusion"], pixel_weighting=p["pixel_weighting"],
                          image_selection=p["image_selection"])


def oracle_config(section, seed):
    return OracleConfig(seed=seed, **section)


def train_config(cfg, seed=None):
    t = cfg["train"]
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, model=ModelConfig(**cfg["mfg"]), **t)


# -- run directory ----------------------------------------------------------------------
def _versions():
    import scipy
    return {"wscos": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def make_run_dir(run_dir=None, root="runs"):
    if run_dir is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join(root, stamp)
        n = 1
        while os.path.exists(run_dir):
            run_dir = os.path.join(root, f"{stamp}-{n}")
            n += 1
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def echo_run(run_dir, command, cfg, argv):
    with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)
    _write_json(os.path.join(run_dir, "run.json"), {
        "command": command, "argv": list(argv), "seed": cfg["seed"], "versions": _versions(),
    })


def _ensure_empty(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise FileExistsError(f"{path} is not empty; pass --force to overwrite")


# -- commands -------------------------------------------------------------------------------
def _dataset_from_config(cfg, seed=None):
    d = cfg["dataset"]
    return generate_dataset(d["n_train"], d["n_test"], tuple(d["dims"]),
                            cfg["seed"] if seed is None else seed, d["n_objects"],
                            tuple(d["contrast"]), d["annotation"], d["scribble_length"])


def cmd_gen(args, cfg, run_dir):
    out = args.out or os.path.join(run_dir, "dataset")
    _ensure_empty(out, args.force)
    ds = _dataset_from_config(cfg)
    write_dataset(ds, out)
    summary = {"train": len(ds.split("train")), "test": len(ds.split("test")),
               "dims": list(ds.dims), "seed": ds.seed, "path": out}
    _write_json(os.path.join(run_dir, "gen_summary.json"), summary)
    print(f"wrote {summary['train']} train + {summary['test']} test samples "
          f"({ds.dims[0]}x{ds.dims[1]}, seed {ds.seed}) to {out}")
    return summary


def make_provider(cfg, dataset):
    p = cfg["pipeline"]
    kind = p["provider"]
    if kind == "oracle":
        return OracleProvider({s.id: s.gt for s in dataset.samples}, oracle_config(p["oracle"], cfg["seed"]))
    if kind == "file":
        if not p["mask_store"]:
            raise ConfigError("pipeline.mask_store is required for the file provider")
        return FileMaskProvider(p["mask_store"])
    if kind == "constant":
        return ConstantProvider(p["constant"])
    raise ConfigError(f"unknown provider {kind!r} (oracle, file, constant)")


def refine_labels(cfg, dataset, out_dir):
    pcfg = pipeline_config(cfg)
    provider = make_provider(cfg, dataset)
    samples = [(s.id, s.image, s.annotation) for s in dataset.split("train")]
    labels = generate_all(samples, provider, pcfg, cfg["pipeline"]["jobs"])
    os.makedirs(out_dir, exist_ok=True)
    skipped = {}
    for image_id, lab in labels.items():
        if isinstance(lab, PseudoLabel):
            write_pseudo_label(out_dir, image_id, lab)
        else:
            skipped[image_id] = str(lab)
    summary = label_summary(labels)
    summary["skipped"] = skipped
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return labels, summary


def cmd_refine(args, cfg, run_dir):
    dataset = read_dataset(args.data)
    if args.export_requests:
        pcfg = pipeline_config(cfg)
        entries = export_requests(args.export_requests,
                                  [(s.id, s.image, s.annotation) for s in dataset.split("train")], pcfg)
        print(f"exported {sum(len(e['augs']) for e in entries)} view requests for "
              f"{len(entries)} images to {args.export_requests}")
        return {"exported": len(entries)}
    out = args.out or os.path.join(run_dir, "labels")
    _, summary = refine_labels(cfg, dataset, out)
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"kept {summary['kept']} / rejected {summary['rejected']} / failed {summary['failed']} "
          f"of {summary['images']} images; mean U_a {fmt(summary['mean_U_a'])}, "
          f"mean U_r {fmt(summary['mean_U_r'])}")
    for image_id, why in summary["skipped"].items():
        print(f"skipped {image_id}: {why}")
    return summary


def _train_items(dataset, labels_dir):
    from .model import TrainItem
    items = []
    for s in dataset.split("train"):
        label = None
        if labels_dir and os.path.exists(os.path.join(labels_dir, s.id, "meta.json")):
            label = read_pseudo_label(labels_dir, s.id)
        items.append(TrainItem(s.image, s.annotation, label))
    return items


def _eval_split(params, dataset, split):
    samples = dataset.split(split)
    if not samples:
        raise ContractError(f"dataset has no {split!r} samples")
    preds = predict(params, np.stack([s.image for s in samples]))
    return evaluate(list(preds), [s.gt for s in samples], [s.id for s in samples])


def _report_rows(reports):
    rows = [f"{'run':<10}{'MAE':>9}{'F_beta':>9}{'IoU':>9}"]
    for name, m in reports:
        rows.append(f"{name:<10}{m['mae']:>9.4f}{m['f_beta']:>9.4f}{m['iou']:>9.4f}")
    return "\n".join(rows)


def _repeat_points(args, cfg, run_dir, dataset):
    """Retrain with freshly drawn point annotations; report mean and spread."""
    reports = []
    for r in range(args.repeat):
        ds = resample_points(dataset, 1000 + r)
        rdir = os.path.join(run_dir, f"repeat_{r}")
        refine_labels(cfg, ds, os.path.join(rdir, "labels"))
        params, history = train(_train_items(ds, os.path.join(rdir, "labels")), train_config(cfg))
        save_checkpoint(os.path.join(rdir, "model"), params)
        rep = _eval_split(params, ds, cfg["eval"]["split"])
        rep.write_json(os.path.join(rdir, "metrics.json"))
        reports.append(rep.to_dict())
    arr = np.array([[m["mae"], m["f_beta"], m["iou"]] for m in reports])
    keys = ("mae", "f_beta", "iou")
    doc = {"runs": [{k: m[k] for k in keys} for m in reports],
           "mean": dict(zip(keys, arr.mean(0).tolist())), "std": dict(zip(keys, arr.std(0).tolist()))}
    _write_json(os.path.join(run_dir, "variance.json"), doc)
    print(_report_rows([(f"run {i}", m) for i, m in enumerate(reports)]
                       + [("mean", doc["mean"]), ("std", doc["std"])]))
    return doc


def cmd_train(args, cfg, run_dir):
    dataset = read_dataset(args.data)
    if args.vary_points:
        return _repeat_points(args, cfg, run_dir, dataset)
    labels_dir = None if args.pce_only else args.labels
    if labels_dir is None and not args.pce_only:
        raise ConfigError("train needs --labels DIR (from refine) or --pce-only")
    items = _train_items(dataset, labels_dir)
    dense = sum(it.label is not None and it.label.kept for it in items)
    print(f"training on {len(items)} images ({dense} with kept pseudo-labels)")
    params, history = train(items, train_config(cfg),
                            callback=lambda e, v: logger.info("epoch %d loss %.5f", e, v))
    out = args.out or os.path.join(run_dir, "model")
    save_checkpoint(out, params, {"seed": cfg["seed"]})
    _write_json(os.path.join(out, "history.json"), {"loss": history})
    print(f"final loss {history[-1]:.5f}; checkpoint written to {out}" if history
          else f"checkpoint written to {out}")
    return {"history": history, "model": out}


def cmd_eval(args, cfg, run_dir):
    dataset = read_dataset(args.data)
    params = load_checkpoint(args.model)
    report = _eval_split(params, dataset, cfg["eval"]["split"])
    out = args.out or run_dir
    os.makedirs(out, exist_ok=True)
    report.write_json(os.path.join(out, "metrics.json"))
    table = report.table()
    with open(os.path.join(out, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return report


def cmd_ablate(args, cfg, run_dir):
    from .experiments import BenchConfig, k_sweep, mfg_ablation, point_variance, wssam_ablation
    a = cfg["ablation"]
    d = cfg["dataset"]
    bench = BenchConfig(
        n_train=a["n_train"], n_test=a["n_test"], dims=tuple(d["dims"]), contrast=tuple(d["contrast"]),
        oracle=oracle_config(a["oracle"], cfg["seed"]), pipeline=pipeline_config(cfg),
        train=TrainConfig(**{**cfg["train"], "epochs": a["epochs"], "learning_rate": a["learning_rate"]},
                          model=ModelConfig(**cfg["mfg"])),
    )
    study = "points" if args.vary_points else (args.study or a["study"])
    seeds = tuple(a["seeds"])
    if study == "wssam":
        result = wssam_ablation(bench, seeds)
    elif study == "mfg":
        result = mfg_ablation(bench, seeds)
    elif study == "k":
        result = {f"K={k}": m for k, m in k_sweep(bench, tuple(a["ks"]), seeds).items()}
    elif study == "points":
        result = point_variance(bench, args.repeat or a["repeats"], cfg["seed"])
    else:
        raise ConfigError(f"unknown ablation study {study!r} (wssam, mfg, k, points)")
    _write_json(os.path.join(run_dir, "ablation.json"), {"study": study, "results": result})
    table = _report_rows(list(result.items()))
    with open(os.path.join(run_dir, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return result


# -- argument parsing ---------------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--run-dir", help="run directory (default runs/<timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wscos", description="Weakly-supervised concealed-object segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", help="dataset directory (default <run>/dataset)")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.add_argument("--objects", type=int, choices=(1, 2, 3), help="objects per scene")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--scribbles", action="store_true", help="scribble instead of point annotations")

    r = sub.add_parser("refine", parents=[common], help="build pseudo-labels for the training split")
    r.add_argument("--data", required=True)
    r.add_argument("--out", help="label directory (default <run>/labels)")
    r.add_argument("--mask-store", help="read provider masks from this store (file provider)")
    r.add_argument("--export-requests", metavar="DIR",
                   help="write view images and prompts for an external segmenter, then stop")
    r.add_argument("--jobs", type=int)
    _ablation_flags(r)

    t = sub.add_parser("train", parents=[common], help="train the segmenter")
    t.add_argument("--data", required=True)
    t.add_argument("--labels", help="label directory written by refine")
    t.add_argument("--pce-only", action="store_true", help="train on the sparse annotations alone")
    t.add_argument("--out", help="checkpoint directory (default <run>/model)")
    t.add_argument("--mfg", choices=("on", "off"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--repeat", type=int, default=5, help="runs for --vary-points")
    t.add_argument("--vary-points", action="store_true",
                   help="redraw point annotations per run, refine and train each; report spread")
    _ablation_flags(t)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", help="report directory (default the run directory)")
    e.add_argument("--split", choices=("train", "test"))

    a = sub.add_parser("ablate", parents=[common], help="run an ablation study")
    a.add_argument("--study", choices=("wssam", "mfg", "k", "points"))
    a.add_argument("--mfg", choices=("on", "off"))
    a.add_argument("--repeat", type=int)
    a.add_argument("--vary-points", action="store_true")
    _ablation_flags(a)
    return parser


def _ablation_flags(p):
    p.add_argument("--no-fusion", action="store_true", help="single identity view")
    p.add_argument("--no-plw", action="store_true", help="skip entropy pixel weighting")
    p.add_argument("--no-ils", action="store_true", help="keep every image")


def _flag_overrides(args):
    """Translate convenience flags into config overrides."""
    sets = []
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    flag = lambda name: getattr(args, name, None)
    if flag("objects"):
        sets.append(f"dataset.n_objects={args.objects}")
    if flag("n_train") is not None:
        sets.append(f"dataset.n_train={args.n_train}")
    if flag("n_test") is not None:
        sets.append(f"dataset.n_test={args.n_test}")
    if flag("scribbles"):
        sets.append("dataset.annotation=scribble")
    if flag("mask_store"):
        sets += ["pipeline.provider=file", f"pipeline.mask_store={args.mask_store}"]
    if flag("jobs") is not None:
        sets.append(f"pipeline.jobs={args.jobs}")
    for name, key in (("no_fusion", "fusion"), ("no_plw", "pixel_weighting"), ("no_ils", "image_selection")):
        if flag(name):
            sets.append(f"pipeline.{key}=false")
    if flag("mfg"):
        sets.append(f"mfg.use_mfg={'true' if args.mfg == 'on' else 'false'}")
    if flag("epochs") is not None:
        sets.append(f"train.epochs={args.epochs}")
    if flag("split"):
        sets.append(f"eval.split={args.split}")
    return sets


COMMANDS = {"gen": cmd_gen, "refine": cmd_refine, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, list(args.set) + _flag_overrides(args))
        run_dir = make_run_dir(args.run_dir)
        echo_run(run_dir, args.command, cfg, argv)
        COMMANDS[args.command](args, cfg, run_dir)
    except tuple(_EXIT) as exc:
        for cls, (code, category) in _EXIT.items():
            if isinstance(exc, cls):
                print(f"error [{category}]: {exc}", file=sys.stderr)
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
