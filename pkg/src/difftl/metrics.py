"""Classification and segmentation scores, inference timing, and comparison tables."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be binary 0/1")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted half via midranks."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at each distinct score threshold, descending."""
    s, y = _binary(scores, labels)
    if not y.any():
        raise MetricError("precision-recall needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last position of every run of tied scores
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[cut]
    pred = cut + 1
    return tp / y.sum(), tp / pred


def auprc(scores, labels) -> float:
    """Area under the interpolated precision-recall curve.

    Precision is replaced by its interpolated envelope
    ``p(r) = max_{r' >= r} precision(r')``; the envelope starts at recall 0
    and is integrated over recall with straight segments between thresholds.
    All-equal scores give the positive prevalence; a perfect ranking gives 1.
    """
    recall, precision = pr_curve(scores, labels)
    # one point per recall level, keeping its best precision
    starts = np.r_[0, np.flatnonzero(np.diff(recall)) + 1]
    recall = recall[starts]
    precision = np.maximum.reduceat(precision, starts)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r = np.r_[0.0, recall]
    p = np.r_[envelope[0], envelope]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))


def dice_jaccard(pred_mask, true_mask) -> tuple[float, float]:
    """Dice and Jaccard overlap. Two empty masks score (1.0, 1.0) by convention."""
    a = np.asarray(pred_mask)
    b = np.asarray(true_mask)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise MetricError("masks must be binary")
    a, b = a.astype(bool), b.astype(bool)
    inter = int(np.logical_and(a, b).sum())
    total = int(a.sum() + b.sum())
    union = total - inter
    if total == 0:
        return 1.0, 1.0
    return 2 * inter / total, inter / union


@dataclass
class Timing:
    mean_ms: float | None
    std_ms: float | None
    repeats: int
    device: str
    skipped: bool = False
    reason: str = ""


def time_callable(fn: Callable[[], object], repeats: int = 10, warmup: int = 2,
                  sync: Callable[[], None] | None = None, device: str = "cpu") -> Timing:
    """Wall-clock mean/std (ms) over ``repeats`` calls, after ``warmup`` untimed calls."""
    if repeats < 3:
        raise MetricError("timing needs repeats >= 3")
    for _ in range(warmup):
        fn()
    if sync:
        sync()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        if sync:
            sync()
        samples.append((time.perf_counter() - t0) * 1e3)
    return Timing(statistics.fmean(samples), statistics.stdev(samples), repeats, device)


def time_inference(model, input_shape: Sequence[int], repeats: int = 10, device: str = "cpu",
                   batch_size: int = 1, warmup: int = 2) -> Timing:
    """Time a single forward pass of ``model`` on a random batch."""
    import torch

    if device.startswith("cuda") and not torch.cuda.is_available():
        return Timing(None, None, repeats, device, skipped=True, reason="CUDA unavailable")
    model = model.to(device).eval()
    x = torch.randn(batch_size, *input_shape, device=device)
    sync = torch.cuda.synchronize if device.startswith("cuda") else None

    def forward():
        with torch.no_grad():
            model(x)

    return time_callable(forward, repeats=repeats, warmup=warmup, sync=sync, device=device)


@dataclass
class MetricsReport:
    name: str
    auroc: float | None = None
    auprc: float | None = None
    dice: float | None = None
    jaccard: float | None = None
    params_m: float | None = None
    macs_g: float | None = None
    cpu_ms: float | None = None
    gpu_ms: float | None = None
    repeats: int = 1
    std: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key in ("auroc", "auprc", "dice", "jaccard"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{key}={v} outside [0, 1]")
        if self.dice is not None and self.jaccard is not None and self.jaccard > self.dice + 1e-12:
            raise MetricError("jaccard cannot exceed dice")
        if self.std and self.repeats < 3:
            raise MetricError("std reported from fewer than 3 repeats")


TABLE_COLUMNS = ("auroc", "auprc", "params_m", "macs_g", "cpu_ms", "gpu_ms")
_HEADERS = {"auroc": "AUROC", "auprc": "AUPRC", "params_m": "Params(M)", "macs_g": "MACs(G)",
            "cpu_ms": "CPU(ms)", "gpu_ms": "GPU(ms)", "dice": "Dice", "jaccard": "Jaccard"}


def comparison_table(reports: Sequence[MetricsReport], columns=TABLE_COLUMNS) -> tuple[str, str]:
    """Render rows of strategies as (csv_text, aligned_text). Missing values print as '-'."""
    def cell(r, c):
        v = getattr(r, c)
        if v is None:
            return "-"
        s = f"{v:.3f}" if c in ("auroc", "auprc", "dice", "jaccard") else f"{v:.3g}"
        if c in r.std:
            s += f" ± {r.std[c]:.3f}"
        return s

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Method"] + [_HEADERS[c] for c in columns])
    rows = [[r.name] + [cell(r, c) for c in columns] for r in reports]
    writer.writerows(rows)
    header = ["Method"] + [_HEADERS[c] for c in columns]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = [" | ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [header] + rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return buf.getvalue(), "\n".join(lines)


def write_comparison(reports: Sequence[MetricsReport], out_dir: str | Path, stem: str = "comparison") -> None:
    csv_text, txt = comparison_table(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(csv_text)
    (out / f"{stem}.txt").write_text(txt + "\n")


def report_dict(report: MetricsReport) -> dict:
    return asdict(report)
