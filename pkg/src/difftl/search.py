"""Cutoff selection: block-then-layer search, LWFT incremental selection, SVCCA detection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .graph import LayerGraph, TruncationPoint, block_boundaries, enumerate_truncation_points
from .svcca import CcaReport, correlation_report

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


def _best(scores: dict[int, float]) -> int:
    """Key with the highest score; ties go to the smallest key."""
    return min(scores, key=lambda k: (-scores[k], k))


@dataclass
class SearchResult:
    strategy: str
    stage1_scores: dict[int, float]
    stage2_scores: dict[int, float]
    chosen: TruncationPoint
    total_trainings: int
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def scores(self) -> dict[int, float]:
        return {**self.stage1_scores, **self.stage2_scores}

    @property
    def chosen_score(self) -> float:
        return self.scores[self.chosen.layer_index]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "stage1_scores": {str(k): v for k, v in sorted(self.stage1_scores.items())},
            "stage2_scores": {str(k): v for k, v in sorted(self.stage2_scores.items())},
            "chosen": self.chosen.to_dict(),
            "chosen_score": self.chosen_score,
            "total_trainings": self.total_trainings,
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def stage2_candidates(graph: LayerGraph, winner: int) -> list[TruncationPoint]:
    """Valid cutoffs strictly between the block boundaries on either side of ``winner``."""
    ends = [p.layer_index for p in block_boundaries(graph)]
    lower = max((e for e in ends if e < winner), default=0)
    upper = min((e for e in ends if e > winner), default=len(graph) + 1)
    return [p for p in enumerate_truncation_points(graph)
            if lower < p.layer_index < upper and p.layer_index != winner]


def two_stage_search(graph: LayerGraph, eval_fn: Callable[[TruncationPoint], float],
                     strategy: str = "TTL", stage: str | int = "both") -> SearchResult:
    """Evaluate every block boundary, then refine around the best one.

    ``eval_fn`` builds and finetunes a model at the given cutoff and returns its
    validation AUPRC. A candidate whose evaluation raises is logged and skipped.
    """
    stage = str(stage)
    if stage not in ("1", "2", "both"):
        raise SearchError(f"stage must be 1, 2 or both, got {stage!r}")
    failures: dict[int, str] = {}
    runs = 0

    def run(points: Sequence[TruncationPoint]) -> dict[int, float]:
        nonlocal runs
        out = {}
        for p in sorted(points, key=lambda p: p.layer_index):
            runs += 1
            try:
                out[p.layer_index] = float(eval_fn(p))
            except Exception as err:  # noqa: BLE001 - any candidate failure is recorded and skipped
                log.warning("candidate k=%d failed: %s", p.layer_index, err)
                failures[p.layer_index] = f"{type(err).__name__}: {err}"
        return out

    s1 = run(block_boundaries(graph))
    if not s1:
        raise SearchError("every stage-1 candidate failed")
    s2 = run(stage2_candidates(graph, _best(s1))) if stage in ("2", "both") else {}
    chosen = _best({**s1, **s2})
    return SearchResult(strategy.upper(), s1, s2, graph.point(chosen), runs, failures)


def exhaustive_search(graph: LayerGraph, eval_fn: Callable[[TruncationPoint], float]) -> tuple[int, float]:
    """Argmax over every valid cutoff (reference for the two-stage search)."""
    scores = {p.layer_index: float(eval_fn(p)) for p in enumerate_truncation_points(graph)}
    k = _best(scores)
    return k, scores[k]


@dataclass(frozen=True)
class StopRule:
    """Stop after ``patience`` consecutive increments without a gain above ``min_delta``,
    or as soon as a score reaches ``target``."""

    min_delta: float = 0.002
    patience: int = 2
    target: float | None = None


@dataclass
class LwftResult:
    chosen_k: int
    trace: list[float]
    stop_reason: str

    def to_dict(self) -> dict:
        return {"chosen_k": self.chosen_k, "trace": self.trace, "stop_reason": self.stop_reason}


def lwft_incremental(n_layers: int, eval_fn: Callable[[int], float], stop_rule: StopRule | None = None
                     ) -> LwftResult:
    """Grow the number of finetuned top layers from 1 until the stop rule fires.

    ``eval_fn(k)`` must start from the pretrained weights on every call.
    Returns the best-scoring ``k`` seen (smallest on ties) and the full trace.
    """
    rule = stop_rule or StopRule()
    if n_layers < 1:
        raise SearchError("need at least one layer")
    trace: list[float] = []
    best = float("-inf")
    stale = 0
    reason = f"reached k = N = {n_layers}"
    for k in range(1, n_layers + 1):
        score = float(eval_fn(k))
        trace.append(score)
        if rule.target is not None and score >= rule.target:
            reason = f"target {rule.target} met at k={k}"
            break
        if score > best + rule.min_delta:
            stale = 0
        else:
            stale += 1
        best = max(best, score)
        if stale >= rule.patience:
            reason = f"no gain above {rule.min_delta} for {rule.patience} increments"
            break
    chosen = min(range(len(trace)), key=lambda i: (-trace[i], i)) + 1
    return LwftResult(chosen, trace, reason)


@dataclass
class DetectionResult:
    gaps: list[float]
    cutoffs: list[TruncationPoint]
    tau: float
    detected: TruncationPoint
    fallback_used: bool
    finetune_runs: int
    reports: list[CcaReport] = field(default_factory=list)
    ttl_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "gaps": self.gaps,
            "cutoffs": [c.to_dict() for c in self.cutoffs],
            "tau": self.tau,
            "detected": self.detected.to_dict(),
            "fallback_used": self.fallback_used,
            "finetune_runs": self.finetune_runs,
            "ttl_score": self.ttl_score,
            "reports": [r.to_dict() for r in self.reports],
        }


def locate_overlap(gaps: Sequence[float], tau: float) -> tuple[int, bool]:
    """Index of the cutoff to truncate at, and whether the fallback was used.

    The first cutoff whose gap is at most ``tau`` marks where features stop
    being reused; truncation keeps everything before it, so the candidate
    just below is returned (or the first one when it already overlaps).
    With no overlap anywhere the deepest cutoff is returned with the fallback flag.
    """
    for i, g in enumerate(gaps):
        if g <= tau:
            return max(i - 1, 0), False
    return len(gaps) - 1, True


def detect_truncation(
    before_model,
    probe_data,
    finetune_fn: Callable,
    tau: float = 0.05,
    cutoffs: Sequence[TruncationPoint] | None = None,
    ttl_fn: Callable[[TruncationPoint], float] | None = None,
    variance_keep: float = 0.99,
    ridge: float = 0.0,
    baseline_seeds=5,
    max_rows: int | None = 20000,
) -> DetectionResult:
    """Low-cost cutoff detection from one full finetune.

    1. ``finetune_fn(before_model)`` runs full transfer learning and returns the tuned model.
    2-3. SVCCA before vs after at every candidate cutoff, each with a shape-matched random baseline.
    4. The cutoff is located from the auc_gap curve (see :func:`locate_overlap`).
    5. ``ttl_fn(point)`` runs one truncated finetune at the detected cutoff, if given.
    """
    if not 0 <= tau <= 1:
        raise SearchError("tau must lie in [0, 1]")
    graph = before_model.graph()
    points = list(cutoffs) if cutoffs is not None else enumerate_truncation_points(graph)
    points.sort(key=lambda p: p.layer_index)
    after_model = finetune_fn(before_model)
    runs = 1
    reports = correlation_report(before_model, after_model, points, probe_data, "horizontal",
                                 variance_keep, ridge, baseline_seeds, max_rows)
    gaps = [float(r.auc_gap) for r in reports]
    i, fallback = locate_overlap(gaps, tau)
    detected = points[i]
    score = None
    if ttl_fn is not None:
        score = float(ttl_fn(detected))
        runs += 1
    return DetectionResult(gaps, points, tau, detected, fallback, runs, reports, score)
