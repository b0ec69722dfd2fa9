"""CCA coefficients, SVCCA, random-feature baselines and per-cutoff correlation reports.

CCA coefficients are the singular values of the whitened cross-covariance
``Sxx^{-1/2} Sxy Syy^{-1/2}`` built from finite-sample covariances. Columns are
standardized first (CCA is invariant to per-feature scaling), and the inverse
square roots come from a symmetric eigendecomposition whose eigenvalues are
floored at ``eig_floor * trace / dim`` so that null directions stay finite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class CcaError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationMatrix:
    """``n x p`` sample-by-feature matrix taken at one truncation point."""

    data: np.ndarray
    layer_tag: str = ""
    centered: bool = False

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise CcaError(f"activation matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 2:
            raise CcaError("activation matrix needs at least 2 rows")
        if not np.all(np.isfinite(data)):
            raise CcaError(f"non-finite entries in activations {self.layer_tag!r}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def center(self) -> "ActivationMatrix":
        if self.centered:
            return self
        return ActivationMatrix(self.data - self.data.mean(axis=0), self.layer_tag, True)


@dataclass(frozen=True)
class CovarianceTriple:
    sxx: np.ndarray
    syy: np.ndarray
    sxy: np.ndarray
    ridge: float = 0.0


@dataclass
class CcaReport:
    coefficients: np.ndarray
    n: int
    dims: tuple[int, int]
    baseline: np.ndarray | None = None
    auc_gap: float | None = None
    tag: str = ""
    ridge: float = 0.0
    eig_floor: float = 1e-6
    variance_keep: float | None = None
    feature_dims: tuple[int, int] | None = None  # raw channel counts before PCA

    @property
    def k(self) -> int:
        return int(self.coefficients.size)

    def summary(self) -> dict:
        c = self.coefficients
        if c.size == 0:
            return {"mean": None, "q1": None, "median": None, "q3": None}
        q1, med, q3 = np.percentile(c, [25, 50, 75])
        return {"mean": float(c.mean()), "q1": float(q1), "median": float(med), "q3": float(q3)}

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "k": self.k,
            "n": self.n,
            "dims": list(self.dims),
            "feature_dims": list(self.feature_dims) if self.feature_dims else None,
            "coefficients": self.coefficients.tolist(),
            "baseline": None if self.baseline is None else self.baseline.tolist(),
            "auc_gap": self.auc_gap,
            "summary": self.summary(),
            "ridge": self.ridge,
            "eig_floor": self.eig_floor,
            "variance_keep": self.variance_keep,
        }


def _as_matrix(a) -> np.ndarray:
    if isinstance(a, ActivationMatrix):
        return a.data
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise CcaError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise CcaError("non-finite entries in input matrix")
    return m


def _standardize(m: np.ndarray) -> tuple[np.ndarray, int]:
    """Center and scale columns to unit variance; return data and numerical rank."""
    m = m - m.mean(axis=0)
    scale = np.sqrt((m * m).sum(axis=0))
    live = scale > 0
    m = m[:, live] / scale[live]
    if m.shape[1] == 0:
        return m, 0
    s = np.linalg.svd(m, compute_uv=False)
    tol = s[0] * max(m.shape) * np.finfo(np.float64).eps
    return m, int((s > tol).sum())


def covariances(x: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> CovarianceTriple:
    n = x.shape[0]
    sxx = x.T @ x / (n - 1)
    syy = y.T @ y / (n - 1)
    sxy = x.T @ y / (n - 1)
    if ridge > 0:
        sxx = sxx + ridge * np.trace(sxx) / sxx.shape[0] * np.eye(sxx.shape[0])
        syy = syy + ridge * np.trace(syy) / syy.shape[0] * np.eye(syy.shape[0])
    return CovarianceTriple(sxx, syy, sxy, ridge)


def inv_sqrt(sym: np.ndarray, eig_floor: float = 1e-6) -> np.ndarray:
    """Symmetric inverse square root with eigenvalues floored at ``eig_floor * trace / dim``."""
    vals, vecs = np.linalg.eigh((sym + sym.T) / 2)
    floor = eig_floor * max(np.trace(sym) / sym.shape[0], np.finfo(np.float64).tiny)
    vals = np.maximum(vals, floor)
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca_coefficients(X, Y, ridge: float = 0.0, eig_floor: float = 1e-6, tag: str = "") -> CcaReport:
    """Descending CCA coefficients of two views sharing their rows.

    ``ridge`` (relative to trace/dim) is added to both auto-covariances; it is
    required when ``n <= max(p, q)``. Returns ``min(rank X, rank Y)`` values.
    """
    x, y = _as_matrix(X), _as_matrix(Y)
    if x.shape[0] != y.shape[0]:
        raise CcaError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    if n <= max(x.shape[1], y.shape[1]) and ridge <= 0:
        raise CcaError(
            f"n={n} <= max(p, q)={max(x.shape[1], y.shape[1])}: covariances are singular; "
            "reduce dimensions with svcca (PCA) or pass ridge > 0"
        )
    xs, rank_x = _standardize(x)
    ys, rank_y = _standardize(y)
    k = min(rank_x, rank_y)
    if k == 0:
        return CcaReport(np.zeros(0), n, (x.shape[1], y.shape[1]), tag=tag, ridge=ridge, eig_floor=eig_floor)
    cov = covariances(xs, ys, ridge)
    whitened = inv_sqrt(cov.sxx, eig_floor) @ cov.sxy @ inv_sqrt(cov.syy, eig_floor)
    s = np.linalg.svd(whitened, compute_uv=False)[:k]
    if s.size and s[0] > 1 + 1e-6:
        raise CcaError(f"CCA coefficient {s[0]:.9f} > 1: ill-conditioned input")
    coefs = np.clip(s, 0.0, 1.0)
    return CcaReport(coefs, n, (x.shape[1], y.shape[1]), tag=tag, ridge=ridge, eig_floor=eig_floor)


def pca_project(X, variance_keep: float = 0.99) -> np.ndarray:
    """Project centered ``X`` onto its fewest top principal components holding ``variance_keep``."""
    if not 0.0 < variance_keep <= 1.0:
        raise CcaError(f"variance_keep={variance_keep} must lie in (0, 1]")
    x = _as_matrix(X)
    x = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return x[:, :0]
    tol = s[0] * max(x.shape) * np.finfo(np.float64).eps
    rank = int((s > tol).sum())
    var = s[:rank] ** 2
    cum = np.cumsum(var) / var.sum()
    dims = int(np.searchsorted(cum, variance_keep * (1 - 1e-12)) + 1)
    dims = min(dims, rank)
    return u[:, :dims] * s[:dims]


def svcca(X, Y, variance_keep: float = 0.99, ridge: float = 0.0, eig_floor: float = 1e-6,
          tag: str = "") -> CcaReport:
    """PCA each view down to ``variance_keep`` of its variance, then run CCA."""
    x, y = _as_matrix(X), _as_matrix(Y)
    px = pca_project(x, variance_keep)
    py = pca_project(y, variance_keep)
    report = cca_coefficients(px, py, ridge=ridge, eig_floor=eig_floor, tag=tag)
    report.variance_keep = variance_keep
    report.feature_dims = (x.shape[1], y.shape[1])
    return report


def _seed_list(seeds) -> list[int]:
    if isinstance(seeds, int):
        if seeds < 1:
            raise CcaError("need at least one baseline seed")
        return list(range(seeds))
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise CcaError("need at least one baseline seed")
    return seeds


def random_baseline(shape_x: tuple[int, int], shape_y: tuple[int, int], seeds=5,
                    variance_keep: float = 1.0, ridge: float = 0.0) -> np.ndarray:
    """Mean descending SVCCA coefficients between i.i.d. standard normal matrices.

    ``seeds`` is a count (seeds ``0..count-1``) or an explicit list. When PCA
    keeps different dimensions for different seeds, curves are cut to the
    shortest before averaging.
    """
    if shape_x[0] != shape_y[0]:
        raise CcaError("baseline shapes must share the row count")
    curves = []
    for seed in _seed_list(seeds):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(shape_x)
        y = rng.standard_normal(shape_y)
        curves.append(svcca(x, y, variance_keep=variance_keep, ridge=ridge).coefficients)
    k = min(c.size for c in curves)
    return np.mean([c[:k] for c in curves], axis=0)


def auc_gap(coefficients, baseline) -> float:
    """Area between a coefficient curve and its baseline, indices normalized to [0, 1]."""
    c = np.asarray(coefficients, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if c.shape != b.shape:
        raise CcaError(f"curve lengths differ: {c.size} vs {b.size}")
    if c.size == 0:
        return 0.0
    return float(np.mean(c - b))


def with_baseline(report: CcaReport, seeds=5) -> CcaReport:
    """Attach a baseline drawn at the report's (post-PCA) feature sizes, plus the auc gap."""
    dx, dy = report.dims
    base = random_baseline((report.n, dx), (report.n, dy), seeds=seeds, ridge=report.ridge)
    base = base[: report.k]
    if base.size < report.k:
        base = np.pad(base, (0, report.k - base.size))
    return replace(report, baseline=base, auc_gap=auc_gap(report.coefficients, base))


# --- activations from models ----------------------------------------------

def feature_rows(fmap) -> np.ndarray:
    """(N, C, *spatial) -> (N * prod(spatial), C), rows ordered by image then position."""
    arr = fmap.detach().cpu().double().numpy() if hasattr(fmap, "detach") else np.asarray(fmap, np.float64)
    if arr.ndim == 2:
        return arr
    c = arr.shape[1]
    return np.moveaxis(arr, 1, -1).reshape(-1, c)


def _subsample(n: int, max_rows: int | None, seed: int = 0) -> np.ndarray | None:
    if max_rows is None or n <= max_rows:
        return None
    return np.sort(np.random.default_rng(seed).choice(n, size=max_rows, replace=False))


def _align(fa, fb):
    """Average-pool the finer of two feature maps onto the coarser spatial grid."""
    import torch.nn.functional as F

    sa, sb = tuple(fa.shape[2:]), tuple(fb.shape[2:])
    if sa == sb:
        return fa, fb
    if all(a >= b for a, b in zip(sa, sb)):
        return F.adaptive_avg_pool2d(fa, sb), fb
    if all(b >= a for a, b in zip(sa, sb)):
        return fa, F.adaptive_avg_pool2d(fb, sa)
    raise CcaError(f"cannot align spatial grids {sa} and {sb}")


def correlation_report(
    before_model,
    after_model,
    cutoffs: Sequence,
    probe_data,
    mode: str = "horizontal",
    variance_keep: float = 0.99,
    ridge: float = 0.0,
    baseline_seeds=5,
    max_rows: int | None = 20000,
    batch_size: int = 128,
) -> list[CcaReport]:
    """Per-cutoff SVCCA reports with shape-matched random baselines.

    ``horizontal``: each cutoff compares ``before_model`` with ``after_model``.
    ``vertical``: ``cutoffs`` holds (lower, upper) pairs compared inside
    ``after_model`` (or ``before_model`` when ``after_model`` is None), the
    finer map average-pooled to the coarser grid.
    """
    from .training import collect_feature_maps

    if mode not in ("horizontal", "vertical"):
        raise CcaError(f"unknown mode {mode!r}")
    reports = []
    if mode == "horizontal":
        if after_model is None:
            raise CcaError("horizontal mode needs both models")
        # cutoffs are located in the before model and matched by unit position,
        # so after models whose layers differ above a cutoff still line up
        idx = [before_model.unit_index(c) for c in cutoffs]
        if idx and max(idx) >= len(after_model.units):
            raise CcaError(f"after model has only {len(after_model.units)} units; cutoff needs {max(idx) + 1}")
        maps_b = collect_feature_maps(before_model, idx, probe_data, batch_size)
        maps_a = collect_feature_maps(after_model, idx, probe_data, batch_size)
        for cut, i in zip(cutoffs, idx):
            reports.append(_pair_report(maps_b[i], maps_a[i], _tag(cut), variance_keep, ridge,
                                        baseline_seeds, max_rows))
        return reports
    model = after_model if after_model is not None else before_model
    flat = sorted({c for pair in cutoffs for c in pair}, key=_key)
    index = {_key(c): model.unit_index(c) for c in flat}
    maps = collect_feature_maps(model, sorted(set(index.values())), probe_data, batch_size)
    for lo, hi in cutoffs:
        fa, fb = _align(maps[index[_key(lo)]], maps[index[_key(hi)]])
        reports.append(_pair_report(fa, fb, f"({_tag(lo)},{_tag(hi)})", variance_keep, ridge,
                                    baseline_seeds, max_rows))
    return reports


def _key(cut) -> int:
    return cut.layer_index if hasattr(cut, "layer_index") else int(cut)


def _tag(cut) -> str:
    return f"k{_key(cut)}"


def _pair_report(fa, fb, tag, variance_keep, ridge, seeds, max_rows) -> CcaReport:
    xa, xb = feature_rows(fa), feature_rows(fb)
    rows = _subsample(xa.shape[0], max_rows)
    if rows is not None:
        xa, xb = xa[rows], xb[rows]
    report = svcca(xa, xb, variance_keep=variance_keep, ridge=ridge, tag=tag)
    return with_baseline(report, seeds)


def save_reports(reports: Sequence[CcaReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1))
