import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftl.metrics import (
    MetricError,
    MetricsReport,
    auprc,
    auroc,
    comparison_table,
    dice_jaccard,
    pr_curve,
    time_callable,
    time_inference,
    write_comparison,
)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    """Interpolated precision p(r) = max precision at recall >= r, trapezoids from recall 0."""
    scores, labels = list(scores), list(labels)
    n_pos = sum(labels)
    pts = []
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        pts.append((sum(sel) / n_pos, sum(sel) / len(sel)))
    recalls = sorted({r for r, _ in pts})

    def interp(r):
        return max(p for rr, p in pts if rr >= r)

    area, prev_r, prev_p = 0.0, 0.0, interp(recalls[0])
    for r in recalls:
        p = interp(r)
        area += (r - prev_r) * (p + prev_p) / 2
        prev_r, prev_p = r, p
    return area


# --- examples -----------------------------------------------------------------------------

def test_auroc_hand_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auprc_hand_example():
    assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(11 / 12, abs=1e-15)


def test_dice_jaccard_hand_example():
    a = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    b = np.array([0, 0, 1, 1, 1, 1, 0, 0])
    d, j = dice_jaccard(a, b)
    assert d == 0.5 and j == pytest.approx(1 / 3, abs=1e-15)


def test_perfect_and_trivial_cases():
    s, y = [0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]
    assert auroc(s, y) == 1.0 and auprc(s, y) == 1.0
    assert auprc([0.5] * 10, [1, 0, 0, 1, 0, 0, 0, 0, 1, 0]) == pytest.approx(0.3)
    assert auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5


def test_identical_and_disjoint_masks():
    m = np.eye(4, dtype=int)
    assert dice_jaccard(m, m) == (1.0, 1.0)
    assert dice_jaccard(m, 1 - m) == (0.0, 0.0)
    assert dice_jaccard(np.zeros(5), np.zeros(5)) == (1.0, 1.0)


def test_auroc_near_half_for_independent_labels():
    rng = np.random.default_rng(0)
    assert auroc(rng.random(20000), rng.integers(0, 2, 20000)) == pytest.approx(0.5, abs=0.02)


def test_pr_curve_points():
    r, p = pr_curve([0.9, 0.8, 0.7], [1, 0, 1])
    np.testing.assert_allclose(r, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(p, [1.0, 0.5, 2 / 3])


# --- errors -------------------------------------------------------------------------------

def test_metric_errors():
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auprc([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        dice_jaccard(np.zeros(3), np.zeros(4))
    with pytest.raises(MetricError):
        auroc([0.1, np.nan], [0, 1])
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [0, 2])


# --- properties ---------------------------------------------------------------------------

labelled_scores = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(lambda v: v / 6), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
))


@settings(max_examples=200, deadline=None)
@given(labelled_scores)
def test_auroc_matches_pair_count(data):
    s, y = data
    if 0 < sum(y) < len(y):
        assert auroc(s, y) == pytest.approx(brute_auroc(s, y), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(labelled_scores)
def test_auprc_matches_brute_force(data):
    s, y = data
    if sum(y):
        assert auprc(s, y) == pytest.approx(brute_auprc(s, y), abs=1e-12)
        assert 0.0 <= auprc(s, y) <= 1.0


@settings(max_examples=100, deadline=None)
@given(labelled_scores, st.sampled_from([np.exp, lambda v: v ** 3 + 2, lambda v: np.log1p(v) * 7]))
def test_auroc_invariant_under_monotone_maps(data, f):
    s, y = data
    if 0 < sum(y) < len(y):
        assert auroc(f(np.asarray(s)), y) == pytest.approx(auroc(s, y), abs=1e-12)


def test_auprc_above_prevalence_for_informative_scores():
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = rng.integers(0, 2, 200)
        y[0] = 1
        s = y + rng.normal(0, 0.8, 200)
        assert auprc(s, y) >= y.mean()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n), st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_dice_jaccard_identity(masks):
    d, j = dice_jaccard(*masks)
    assert 0 <= j <= d <= 1
    assert abs(d - 2 * j / (1 + j)) <= 1e-12


def test_metrics_are_pure():
    s, y = [0.3, 0.1, 0.7, 0.7], [0, 1, 1, 0]
    assert auprc(s, y) == auprc(s, y) and auroc(s, y) == auroc(s, y)


# --- timing -------------------------------------------------------------------------------

def test_timing_needs_three_repeats():
    with pytest.raises(MetricError):
        time_callable(lambda: None, repeats=2)


def test_fixed_sleep_stub_has_small_std():
    t = time_callable(lambda: time.sleep(0.01), repeats=3, warmup=1)
    assert t.mean_ms == pytest.approx(10, abs=5)
    assert t.std_ms < 2


def test_warmup_calls_are_excluded():
    calls = []

    def stub():
        time.sleep(0.2 if not calls else 0.001)
        calls.append(1)

    with_warmup = time_callable(stub, repeats=3, warmup=1)
    assert with_warmup.mean_ms < 20
    calls.clear()
    without = time_callable(stub, repeats=3, warmup=0)
    assert without.mean_ms > with_warmup.mean_ms


def test_cuda_unavailable_is_skipped():
    import torch

    if torch.cuda.is_available():
        pytest.skip("CUDA present")
    t = time_inference(torch.nn.Identity(), (3, 4, 4), repeats=3, device="cuda")
    assert t.skipped and t.mean_ms is None


def test_truncated_model_is_faster():
    import torch

    from difftl.graph import block_boundaries
    from difftl.surgery import StrategyConfig, build_model
    from difftl.zoo import torchvision_resnet

    torch.manual_seed(0)
    bb = torchvision_resnet("resnet18", image_size=96)
    full, _ = build_model(bb, StrategyConfig("FTL"))
    block2_end = block_boundaries(bb.graph())[2].layer_index
    ttl, _ = build_model(bb, StrategyConfig("TTL", block2_end))
    t_full = time_inference(full, bb.input_shape, repeats=7)
    t_ttl = time_inference(ttl, bb.input_shape, repeats=7)
    assert t_ttl.mean_ms <= t_full.mean_ms


# --- reporting ----------------------------------------------------------------------------

def test_report_validation():
    with pytest.raises(MetricError):
        MetricsReport("x", auroc=1.2)
    with pytest.raises(MetricError):
        MetricsReport("x", dice=0.5, jaccard=0.6)
    with pytest.raises(MetricError):
        MetricsReport("x", auroc=0.9, std={"auroc": 0.01}, repeats=2)


def test_comparison_table(tmp_path):
    rows = [MetricsReport("FTL", 0.9, 0.8, params_m=23.5, macs_g=4.12),
            MetricsReport("TTL-1", 0.91, 0.85, params_m=8.55, macs_g=3.31, repeats=3, std={"auroc": 0.01})]
    csv_text, txt = comparison_table(rows)
    assert csv_text.splitlines()[0] == "Method,AUROC,AUPRC,Params(M),MACs(G),CPU(ms),GPU(ms)"
    assert "0.910 ± 0.010" in txt and "-" in txt
    write_comparison(rows, tmp_path)
    assert (tmp_path / "comparison.csv").read_text() == csv_text
