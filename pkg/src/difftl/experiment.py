"""Experiment orchestration: backbone -> data -> surgery -> training -> metrics -> persistence.

Every run directory holds ``config.snapshot``, ``metrics.jsonl``, ``record.json``,
``best.ckpt`` (+ plan sidecar) and ``activations/*.actv``. Searches and
detections write one such directory per finetuning run plus a JSON summary.
A failing stage leaves ``failure.json`` naming the stage next to whatever was
already written.
"""
from __future__ import annotations

import contextlib
import json
import logging
import re
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, save_snapshot
from .graph import block_boundaries, count_macs
from .metrics import MetricsReport, time_inference, write_comparison
from .search import DetectionResult, SearchResult, detect_truncation, two_stage_search
from .surgery import StrategyConfig, build_model, load_model, lwft_depth
from .svcca import correlation_report, save_reports, svcca, with_baseline
from .synthetic import pretrain_backbone, task_tensors
from .training import (
    ExperimentRecord,
    SplitData,
    augmentation,
    extract_activations,
    finetune,
    load_images,
    make_split,
    read_manifest,
    split_datasets,
)
from .zoo import Backbone, build_backbone, load_backbone

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str, out: Path | None):
    """Run a block as a named stage; on failure write ``failure.json`` and raise ExperimentError."""
    try:
        yield
    except ExperimentError:
        raise
    except Exception as err:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "failure.json").write_text(json.dumps({
                "stage": name, "error": f"{type(err).__name__}: {err}",
                "traceback": traceback.format_exc(),
            }, indent=1))
        raise ExperimentError(name, err) from err


# --- inputs -------------------------------------------------------------------

def resolve_backbone(cfg: ExperimentConfig, base: Path | None = None) -> Backbone:
    m = cfg.model
    if m.checkpoint:
        path = Path(m.checkpoint)
        return load_backbone(path if path.is_absolute() or base is None else base / path)
    if m.pretrain is not None:
        return pretrain_backbone(m.pretrain, m.cache_dir)
    return build_backbone({"name": m.name, **m.options})


def load_dataset(cfg: ExperimentConfig, base: Path | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    d = cfg.data
    if d.synthetic is not None:
        return task_tensors(d.synthetic, channels=d.channels)
    path = Path(d.manifest)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_images(read_manifest(path), d.image_size, d.channels)


def prepare_data(cfg: ExperimentConfig, base: Path | None = None) -> SplitData:
    x, y = load_dataset(cfg, base)
    split = make_split(y.tolist(), cfg.data.split_seed)
    t = cfg.training
    return split_datasets(x, y, split, augmentation(x.shape[-1], t.crop_padding, t.rotation))


def probe_images(cfg: ExperimentConfig, data: SplitData) -> torch.Tensor:
    return data.val.images[: cfg.data.probe_images]


# --- single run -----------------------------------------------------------------

def train_one(cfg: ExperimentConfig, backbone: Backbone, data: SplitData, out: Path,
              timing_repeats: int = 3) -> ExperimentRecord:
    """Surgery, training, metrics and activations for one strategy config, written under ``out``."""
    return train_model(cfg, backbone, data, out, timing_repeats)[0]


def train_model(cfg: ExperimentConfig, backbone: Backbone, data: SplitData, out: Path,
                timing_repeats: int = 3):
    """As :func:`train_one`, also returning the trained (best-validation) model."""
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(cfg, out)
    with stage("surgery", out):
        model, plan = build_model(backbone, cfg.strategy)
    with stage("training", out):
        record = finetune(model, plan, data, cfg.training, out_dir=out, record_config=cfg.to_dict())
    with stage("metrics", out):
        graph = model.graph()
        record.params = model.num_params()
        record.macs = count_macs(graph)
        timing = time_inference(model, backbone.input_shape, repeats=timing_repeats, device="cpu")
        record.extra["cpu_ms"] = timing.mean_ms
        record.extra["cpu_ms_std"] = timing.std_ms
        record.extra["timing_repeats"] = timing.repeats
        record.extra["label"] = strategy_label(cfg.strategy)
    with stage("activations", out):
        cutoffs = block_boundaries(graph)
        mats = extract_activations(model, cutoffs, probe_images(cfg, data), out / "activations")
        record.extra["activations"] = [m.layer_tag for m in mats]
    record.save(out)
    return record, model


def strategy_label(s: StrategyConfig) -> str:
    return s.kind if s.cutoff is None else f"{s.kind}-k{s.cutoff}"


def run_experiment(cfg: ExperimentConfig, base: Path | None = None) -> ExperimentRecord:
    out = Path(cfg.out)
    with stage("backbone", out):
        backbone = resolve_backbone(cfg, base)
    with stage("data", out):
        data = prepare_data(cfg, base)
    return train_one(cfg, backbone, data, out)


# --- search ---------------------------------------------------------------------

def strategy_at(cfg: ExperimentConfig, backbone: Backbone, kind: str, point) -> StrategyConfig:
    kind = kind.upper()
    cutoff = lwft_depth(backbone, point) if kind == "LWFT" else point.layer_index
    return replace(cfg.strategy, kind=kind, cutoff=cutoff)


def run_search(cfg: ExperimentConfig, kind: str = "TTL", search_stage: str | None = None,
               base: Path | None = None) -> SearchResult:
    out = Path(cfg.out)
    with stage("backbone", out):
        backbone = resolve_backbone(cfg, base)
    with stage("data", out):
        data = prepare_data(cfg, base)
    test_scores: dict[int, float | None] = {}

    def evaluate(point) -> float:
        run_cfg = replace(cfg, strategy=strategy_at(cfg, backbone, kind, point),
                          out=str(out / "candidates" / f"k{point.layer_index}"))
        rec = train_one(run_cfg, backbone, data, Path(run_cfg.out))
        if rec.aborted or rec.best_val_auprc is None:
            raise RuntimeError(rec.stop_reason or "no validation score")
        test_scores[point.layer_index] = rec.test.get("auprc")
        return rec.best_val_auprc

    result = two_stage_search(backbone.graph(), evaluate, kind, search_stage or cfg.search.stage)
    doc = result.to_dict()
    doc["test_auprc"] = {str(k): v for k, v in sorted(test_scores.items())}
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(cfg, out)
    (out / "search.json").write_text(json.dumps(doc, indent=1))
    return result


# --- detection ------------------------------------------------------------------

def detect_on_data(cfg: ExperimentConfig, backbone: Backbone, data: SplitData, out: Path,
                   tau: float | None = None) -> tuple[DetectionResult, dict[str, ExperimentRecord]]:
    """One FTL run, SVCCA at every cutoff, one TTL run at the detected point."""
    runs: dict[str, ExperimentRecord] = {}
    tau = cfg.svcca.tau if tau is None else tau

    def ftl(before):
        run_cfg = replace(cfg, strategy=replace(cfg.strategy, kind="FTL", cutoff=None), out=str(out / "ftl"))
        runs["ftl"], model = train_model(run_cfg, before, data, out / "ftl")
        return model

    def ttl(point):
        run_cfg = replace(cfg, strategy=replace(cfg.strategy, kind="TTL", cutoff=point.layer_index),
                          out=str(out / "ttl"))
        runs["ttl"] = train_one(run_cfg, backbone, data, out / "ttl")
        return runs["ttl"].test.get("auprc")

    s = cfg.svcca
    with stage("detection", out):
        result = detect_truncation(backbone, probe_images(cfg, data), ftl, tau, ttl_fn=ttl,
                                   variance_keep=s.variance_keep, ridge=s.ridge,
                                   baseline_seeds=s.baseline_seeds, max_rows=s.max_rows)
    doc = result.to_dict()
    doc["ftl_test_auprc"] = runs["ftl"].test.get("auprc")
    doc["ttl_test_auprc"] = runs["ttl"].test.get("auprc")
    out.mkdir(parents=True, exist_ok=True)
    (out / "detection.json").write_text(json.dumps(doc, indent=1))
    return result, runs


def run_detection(cfg: ExperimentConfig, tau: float | None = None, base: Path | None = None) -> DetectionResult:
    out = Path(cfg.out)
    save_snapshot(cfg, out)
    with stage("backbone", out):
        backbone = resolve_backbone(cfg, base)
    with stage("data", out):
        data = prepare_data(cfg, base)
    return detect_on_data(cfg, backbone, data, out, tau)[0]


# --- svcca ----------------------------------------------------------------------

def run_svcca(cfg: ExperimentConfig, after_checkpoint: str | Path, mode: str = "horizontal",
              base: Path | None = None) -> list:
    """Compare the configured backbone with a finetuned checkpoint (or within it, vertically)."""
    out = Path(cfg.out)
    with stage("backbone", out):
        backbone = resolve_backbone(cfg, base)
        after, _ = load_model(after_checkpoint)
    with stage("data", out):
        probe = probe_images(cfg, prepare_data(cfg, base))
    s = cfg.svcca
    with stage("svcca", out):
        if mode == "horizontal":
            pts = [p for p in block_boundaries(backbone.graph())
                   if backbone.unit_index(p) < len(after.units)]
            reports = correlation_report(backbone, after, pts, probe, "horizontal", s.variance_keep,
                                         s.ridge, s.baseline_seeds, s.max_rows)
        else:
            pts = block_boundaries(after.graph())
            pairs = list(zip(pts[:-1], pts[1:]))
            reports = correlation_report(None, after, pairs, probe, "vertical", s.variance_keep,
                                         s.ridge, s.baseline_seeds, s.max_rows)
    out.mkdir(parents=True, exist_ok=True)
    save_reports(reports, out / "svcca.json")
    return reports


def svcca_from_actv(path_a: str | Path, path_b: str | Path, variance_keep: float = 0.99,
                    ridge: float = 0.0, seeds: int = 5):
    from .actv import read_actv

    a, b = read_actv(path_a), read_actv(path_b)
    report = svcca(a, b, variance_keep=variance_keep, ridge=ridge, tag=f"{Path(path_a).stem}~{Path(path_b).stem}")
    return with_baseline(report, seeds)


# --- reporting ------------------------------------------------------------------

RECORD_FIELDS = ("best_val_auprc", "test", "params", "macs")


def _row(run_dir: Path, problems: list[str]) -> MetricsReport | None:
    path = run_dir / "record.json"
    if not path.exists():
        problems.append(f"{run_dir}: no record.json")
        return None
    rec = json.loads(path.read_text())
    missing = [f for f in RECORD_FIELDS if rec.get(f) in (None, {})]
    if missing:
        problems.append(f"{run_dir}: missing {', '.join(missing)}")
    extra = rec.get("extra") or {}
    test = rec.get("test") or {}
    std = {"cpu_ms": extra["cpu_ms_std"]} if extra.get("cpu_ms_std") is not None else {}
    return MetricsReport(
        extra.get("label") or run_dir.name,
        auroc=test.get("auroc"), auprc=test.get("auprc"),
        params_m=None if rec.get("params") is None else rec["params"] / 1e6,
        macs_g=None if rec.get("macs") is None else rec["macs"] / 1e9,
        cpu_ms=extra.get("cpu_ms"), repeats=extra.get("timing_repeats", 1) if std else 1, std=std,
    )


def _plot_search(doc: dict, path: Path) -> None:
    import matplotlib.pyplot as plt

    scores = {int(k): v for k, v in {**doc["stage1_scores"], **doc["stage2_scores"]}.items()}
    ks = sorted(scores)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ks, [scores[k] for k in ks], "o-", label="validation AUPRC")
    test = {int(k): v for k, v in doc.get("test_auprc", {}).items() if v is not None}
    if test:
        tk = sorted(test)
        ax.plot(tk, [test[k] for k in tk], "s--", alpha=0.6, label="test AUPRC")
    best = doc["chosen"]["layer_index"]
    ax.annotate("peak", (best, scores[best]), xytext=(0, 25), textcoords="offset points",
                ha="center", arrowprops={"arrowstyle": "->"})
    ax.set_xlabel("cutoff (layer index)")
    ax.set_ylabel("AUPRC")
    ax.set_title(f"{doc['strategy']} search")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_detection(doc: dict, path: Path) -> None:
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ks = [c["layer_index"] for c in doc["cutoffs"]]
    det = doc["detected"]["layer_index"]
    ax1.plot(ks, doc["gaps"], "o-", color="tab:gray")
    ax1.axhline(doc["tau"], ls=":", color="tab:red", label=f"tau={doc['tau']}")
    ax1.plot([det], [doc["gaps"][ks.index(det)]], "o", ms=11, mfc="none", color="tab:green",
             label="detected" + (" (fallback)" if doc["fallback_used"] else ""))
    ax1.set_xlabel("cutoff (layer index)")
    ax1.set_ylabel("auc gap")
    ax1.legend()
    for r in doc.get("reports", []):
        c = np.asarray(r["coefficients"])
        if c.size == 0:
            continue
        x = np.linspace(0, 1, c.size)
        k = int(r["tag"].lstrip("k"))
        style = {"color": "tab:green", "lw": 2.5} if k == det else {"color": "tab:blue", "alpha": 0.35}
        ax2.plot(x, c, **style)
        if r.get("baseline") is not None:
            ax2.plot(x, r["baseline"], ls="--", color="tab:red", alpha=0.3)
    ax2.set_xlabel("normalized coefficient index")
    ax2.set_ylabel("CCA coefficient")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _write_curve_csv(path: Path, header: list[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _natural(path: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", str(path))]


def _run_dirs(d: Path) -> list[Path]:
    if (d / "record.json").exists() or (d / "failure.json").exists():
        return [d]
    return sorted((p.parent for p in d.rglob("record.json")), key=_natural)


def emit_report(dirs, out: str | Path) -> list[str]:
    """Write comparison tables and plots for the given experiment directories.

    Returns the list of problems found (missing records or fields); callers
    treat a non-empty list as failure, though everything available is still written.
    """
    import matplotlib

    matplotlib.use("Agg")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problems: list[str] = []
    rows: list[MetricsReport] = []
    for d in map(Path, dirs):
        if not d.exists():
            problems.append(f"{d}: does not exist")
            continue
        if (d / "search.json").exists():
            doc = json.loads((d / "search.json").read_text())
            _plot_search(doc, out / f"{d.name}_search.png")
            scores = {**doc["stage1_scores"], **doc["stage2_scores"]}
            _write_curve_csv(out / f"{d.name}_search.csv", ["cutoff", "val_auprc", "test_auprc", "stage"], [
                [k, v, doc.get("test_auprc", {}).get(k), 1 if k in doc["stage1_scores"] else 2]
                for k, v in sorted(scores.items(), key=lambda kv: int(kv[0]))])
        if (d / "detection.json").exists():
            doc = json.loads((d / "detection.json").read_text())
            _plot_detection(doc, out / f"{d.name}_detection.png")
            _write_curve_csv(out / f"{d.name}_detection.csv", ["cutoff", "auc_gap", "detected"], [
                [c["layer_index"], g, int(c["layer_index"] == doc["detected"]["layer_index"])]
                for c, g in zip(doc["cutoffs"], doc["gaps"])])
        runs = _run_dirs(d)
        if not runs and not any((d / f).exists() for f in ("search.json", "detection.json")):
            problems.append(f"{d}: no experiment records found")
        for r in runs:
            if (r / "failure.json").exists() and not (r / "record.json").exists():
                fail = json.loads((r / "failure.json").read_text())
                problems.append(f"{r}: failed in stage {fail['stage']}")
                continue
            row = _row(r, problems)
            if row is not None:
                rows.append(row)
    if rows:
        write_comparison(rows, out)
    if problems:
        (out / "problems.txt").write_text("\n".join(problems) + "\n")
    return problems


__all__ = [
    "ExperimentError", "detect_on_data", "emit_report", "load_dataset", "prepare_data", "resolve_backbone",
    "run_detection", "run_experiment", "run_search", "run_svcca", "svcca_from_actv", "train_model", "train_one",
]
