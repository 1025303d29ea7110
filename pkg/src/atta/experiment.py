"""Experiment grids: methods x splits x seeds, ablations, and result files."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import statistics
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import kernels
from .adaptation import AdaptConfig, adapt_image, adapt_stream
from .metrics import evaluate
from .nn import load_checkpoint, save_checkpoint
from .scenes import CorruptionSpec, SceneSpec, build_dataset, load_split
from .trainer import TrainConfig, calibrate_domain_detector, train

SPLIT_DIRS = {"clean": "test_clean", "corrupt": "test_corrupt"}

# method name -> AdaptConfig overrides
METHODS = {
    "frozen": {"use_sbn": False, "use_ast": False},
    "atta": {},
    "sbn_only": {"use_ast": False},
    "ast_only": {"use_sbn": False},
    "tbn_only": {"bn_mode": "batch_only", "use_ast": False},
    "tent_like": {"bn_mode": "batch_only", "entropy_mode": "seen_only"},
}

# one row per studied variant; the first four form the module on/off grid
ABLATIONS = {
    "neither": {"use_sbn": False, "use_ast": False},
    "sbn_only": {"use_ast": False},
    "ast_only": {"use_sbn": False},
    "sbn+ast": {},
    "bn=train_only": {"bn_mode": "train_only"},
    "bn=batch_only": {"bn_mode": "batch_only"},
    "entropy=seen_only": {"entropy_mode": "seen_only"},
    "calib=zscore": {"calib_mode": "zscore"},
    "stream=continue": {"stream_mode": "continue"},
    "class_weight=one": {"class_weight": "one"},
}

RESULT_FIELDS = ["method", "split", "seed", "auroc", "ap", "fpr95", "miou", "macc", "mean_ms_per_image"]


def worker_count():
    try:
        return max(1, int(os.environ.get("ATTA_THREADS", "1")))
    except ValueError:
        return 1


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def environment():
    import numba
    return {"python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__,
            "kernel_backend": kernels.BACKEND, "machine": platform.machine()}


def method_config(name, registry=METHODS, **base):
    if name not in registry:
        raise KeyError(f"unknown method {name!r}; known: {', '.join(registry)}")
    return AdaptConfig(**{**base, **registry[name]})


def run_method(ckpt, scenes, config, workers=1):
    """Adapt every scene and evaluate. Returns ``(report, per_image_ms, results)``."""
    images = [s.image for s in scenes]
    timings = []
    if config.stream_mode == "continue" or workers > 1:
        t0 = time.perf_counter()
        results = adapt_stream(ckpt, images, config, workers)
        per = (time.perf_counter() - t0) * 1e3 / len(images)
        timings = [per] * len(images)
    else:
        results = []
        for img in images:
            t0 = time.perf_counter()
            results.extend(adapt_stream(ckpt, [img], config))
            timings.append((time.perf_counter() - t0) * 1e3)
    preds = [r.F_out.argmax(axis=-1) + 1 for r in results]
    report = evaluate([r.G_out for r in results], preds, scenes)
    return report, timings, results


def write_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _csv_text(rows, fields):
    import io
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_results(path):
    """Parse ``results.csv`` back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["seed"] = int(row["seed"])
            for k in RESULT_FIELDS[3:]:
                row[k] = float(row[k])
            rows.append(row)
    return rows


def run_grid(ckpt, data_dir, out_dir, methods, splits=("clean", "corrupt"), seeds=(0,),
             score_kinds=("energy",), registry=METHODS, base=None, workers=None, bins=50):
    """Evaluate a method grid and write ``results.csv``, ``details.json`` and histograms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    base = dict(base or {})
    scenes = {split: load_split(data_dir, SPLIT_DIRS[split]) for split in splits}
    rows, details = [], []
    for kind in score_kinds:
        for name in methods:
            label = name if kind == "energy" else f"{name}[{kind}]"
            for split in splits:
                for seed in seeds:
                    cfg = method_config(name, registry, **{**base, "score_kind": kind, "seed": seed})
                    report, timings, results = run_method(ckpt, scenes[split], cfg, workers)
                    rows.append({"method": label, "split": split, "seed": seed, **report.summary(),
                                 "mean_ms_per_image": float(np.mean(timings))})
                    details.append({
                        "method": label, "split": split, "seed": seed, "config": asdict(cfg),
                        "aggregate": report.summary(), "median_ms_per_image": float(np.median(timings)),
                        "per_image": [dict(row, ms=ms, failed=r.failed, diagnostic=r.diagnostic,
                                           shift_probability=(r.domain_estimate.probability
                                                              if r.domain_estimate else None),
                                           kl_sum=(r.domain_estimate.kl_sum if r.domain_estimate else None),
                                           loss_trace=r.loss_trace, pseudo_labels=r.pseudo_label_stats)
                                      for row, ms, r in zip(report.per_image, timings, results)]})
                    if seed == seeds[0]:
                        h = report.histogram
                        lines = ["bin_lo,bin_hi,inlier,outlier"] + [
                            f"{lo!r},{hi!r},{a},{b}" for lo, hi, a, b in
                            zip(h["edges"][:-1], h["edges"][1:], h["inlier"], h["outlier"])]
                        write_atomic(out / f"hist_{label}_{split}.csv", "\n".join(lines) + "\n")
    record = {"config_hash": config_hash({"methods": list(methods), "splits": list(splits),
                                          "seeds": list(seeds), "score_kinds": list(score_kinds),
                                          "base": base, "checkpoint": ckpt.meta.get("probe_feature_sha256")}),
              "environment": environment(), "runs": details}
    write_atomic(out / "results.csv", _csv_text(rows, RESULT_FIELDS))
    write_atomic(out / "details.json", json.dumps(record, indent=1, default=float))
    return rows


def ablation_table(rows, split="corrupt"):
    """Markdown table of seed-averaged metrics per variant on one split."""
    by = {}
    for r in rows:
        if r["split"] == split:
            by.setdefault(r["method"], []).append(r)
    lines = [f"Ablations on the {split} split (mean over seeds)", "",
             "| variant | SBN | AST | AUROC | AP | FPR95 | mIoU |", "|---|---|---|---|---|---|---|"]
    for name in ABLATIONS:
        if name not in by:
            continue
        cfg = AdaptConfig(**ABLATIONS[name])
        m = {k: statistics.fmean(r[k] for r in by[name]) for k in ("auroc", "ap", "fpr95", "miou")}
        lines.append(f"| {name} | {'x' if cfg.use_sbn else ''} | {'x' if cfg.use_ast else ''} | "
                     f"{100 * m['auroc']:.2f} | {100 * m['ap']:.2f} | {100 * m['fpr95']:.2f} | {m['miou']:.3f} |")
    return "\n".join(lines) + "\n"


def run_ablations(ckpt, data_dir, out_dir, seeds=(0,), splits=("clean", "corrupt"), workers=None):
    rows = run_grid(ckpt, data_dir, out_dir, list(ABLATIONS), splits, seeds, registry=ABLATIONS,
                    workers=workers)
    text = "\n".join(ablation_table(rows, s) for s in splits)
    write_atomic(Path(out_dir) / "ablation_summary.md", text)
    return rows, text


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------


def build_data(out_dir, seed=0, n_train=200, n_test=50, ood_range=(0.02, 0.10), corruption=None):
    train_spec = SceneSpec(seed=seed, ood_area_fraction_range=ood_range)
    test_spec = SceneSpec(seed=seed, ood_area_fraction_range=ood_range,
                          corruption=corruption or CorruptionSpec())
    return build_dataset(train_spec, test_spec, out_dir, n_train, n_test)


def train_model(data_dir, out_path, config=None, calib_sigmas=3.0, progress=None):
    scenes = load_split(data_dir, "train")
    ckpt = train(scenes, config or TrainConfig(), progress)
    ckpt, summary = calibrate_domain_detector(ckpt, [s.image for s in scenes], calib_sigmas)
    save_checkpoint(ckpt, out_path)
    return ckpt, summary


def run_pipeline(work_dir, seed=0, n_train=200, n_test=50, train_config=None, workers=None):
    """build-data, train, eval and ablate for one seed under ``work_dir``."""
    work = Path(work_dir)
    timings = {}
    t0 = time.perf_counter()
    build_data(work / "data", seed, n_train, n_test)
    timings["build_data_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    cfg = train_config or TrainConfig(seed=seed)
    ckpt, summary = train_model(work / "data", work / "model", cfg)
    timings["train_s"] = time.perf_counter() - t0
    ckpt = load_checkpoint(work / "model")
    t0 = time.perf_counter()
    eval_rows = run_grid(ckpt, work / "data", work / "eval", list(METHODS), seeds=(seed,), workers=workers)
    timings["eval_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    abl_rows, table = run_ablations(ckpt, work / "data", work / "ablate", seeds=(seed,), workers=workers)
    timings["ablate_s"] = time.perf_counter() - t0
    return {"seed": seed, "eval": eval_rows, "ablate": abl_rows, "ablation_table": table,
            "timings": timings, "train_accuracy": ckpt.meta["train_accuracy"],
            "kl_summary": summary, "checkpoint": ckpt}


def shift_probabilities(ckpt, scenes):
    cfg = AdaptConfig(use_ast=False)
    return np.array([adapt_image(ckpt, s.image, cfg).domain_estimate.probability for s in scenes])


__all__ = ["METHODS", "ABLATIONS", "run_grid", "run_ablations", "run_pipeline", "build_data",
           "train_model", "read_results", "ablation_table",
           "write_atomic"]
