import numpy as np
import pytest
from scipy import stats

from critgen.envs import (
    IntersectionConfig,
    standard_four_mode_landscape,
    symmetric_four_mode_landscape,
)
from critgen.errors import EvaluationError
from critgen.evalharness import (
    MethodResult,
    collision_fraction,
    collision_rate,
    comparison_report,
    mode_coverage,
    risk_loglik_correlation,
    write_comparison_csv,
)
from critgen.flow import build_flow
from critgen.numerics import RandomSource
from critgen.training import TrainConfig, WeightedSample, train_prior


# ---------------------------------------------------------------------------
# mode_coverage
# ---------------------------------------------------------------------------

def test_coverage_single_cluster():
    ls = symmetric_four_mode_landscape()
    X = ls.centers[0] + RandomSource(1).standard_normal(400).reshape(200, 2) * 0.05
    report = mode_coverage(X, ls)
    assert report.covered == 1
    assert report.total == 4


def test_coverage_equal_quarters():
    ls = symmetric_four_mode_landscape()
    rng = RandomSource(2)
    parts = [c + rng.standard_normal(200).reshape(100, 2) * 0.05
             for c in ls.centers]
    report = mode_coverage(np.concatenate(parts), ls)
    assert report.covered == 4


def test_coverage_matches_brute_force_membership():
    ls = standard_four_mode_landscape()
    X = RandomSource(3).uniform(4000, -1.0, 1.0).reshape(2000, 2)
    report = mode_coverage(X, ls)
    for frac, center, std in zip(report.per_mode_fraction, ls.centers, ls.stds):
        count = 0
        for x in X:
            if np.sqrt(((x - center) ** 2).sum()) <= 3.0 * std:
                count += 1
        assert frac == count / len(X)
    # uniform box samples: expected fraction is the 3-sigma ball area over 4
    expected = np.pi * (3.0 * ls.stds[0]) ** 2 / 4.0
    assert np.allclose(report.per_mode_fraction, expected, atol=0.02)


def test_coverage_rejects_empty():
    with pytest.raises(EvaluationError):
        mode_coverage(np.zeros((0, 2)), standard_four_mode_landscape())


# ---------------------------------------------------------------------------
# collision_rate
# ---------------------------------------------------------------------------

def away_moving_prior(seed=11):
    """Prior trained on cyclists far from the intersection moving outward."""
    cfg = IntersectionConfig()
    rng = RandomSource(seed)
    n = 1500
    ang = rng.uniform(n, 0.0, 2.0 * np.pi)
    rad = rng.uniform(n, 14.0, 19.0)
    pos = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    speed = rng.uniform(n, 2.0, 5.0)
    vel = pos / np.linalg.norm(pos, axis=1, keepdims=True) * speed[:, None]
    data = np.stack([cfg.encode_scenario(np.concatenate([p, v]))
                     for p, v in zip(pos, vel)])
    return train_prior(data, TrainConfig(epochs=20, batch_size=256, seed=seed),
                       ranges=cfg.scenario_ranges()), cfg


def test_away_moving_generator_rarely_collides():
    model, cfg = away_moving_prior()
    mean, std, per_route = collision_rate(
        model, cfg.condition_catalog(), 200, 0.5, cfg, seed=5)
    assert mean < 0.05


def test_collision_rate_refuses_empty():
    model, cfg = away_moving_prior()
    with pytest.raises(EvaluationError):
        collision_rate(model, cfg.condition_catalog(), 0, 0.5, cfg)


def test_collision_rate_deterministic():
    model, cfg = away_moving_prior()
    a = collision_rate(model, cfg.condition_catalog(), 50, 0.5, cfg, seed=7)
    b = collision_rate(model, cfg.condition_catalog(), 50, 0.5, cfg, seed=7)
    assert a == b


def test_collision_fraction_threshold():
    cfg = IntersectionConfig()
    cut = np.exp(-cfg.collision_radius)
    samples = [WeightedSample(x=np.zeros(4), y=np.zeros(0), risk=r, weight=r)
               for r in (cut * 0.5, cut * 1.01, cut * 2.0)]
    assert collision_fraction(samples, cfg) == pytest.approx(2.0 / 3.0)


# ---------------------------------------------------------------------------
# risk / log-likelihood correlation
# ---------------------------------------------------------------------------

def _samples_with(risks, xs):
    return [WeightedSample(x=np.asarray(x, dtype=float), y=np.zeros(0),
                           risk=float(r), weight=float(r))
            for r, x in zip(risks, xs)]


def test_correlation_exact_affine_relation():
    # build a sample set where log_prob is exactly affine in risk: identity
    # model has log p = -||x||^2/2 - log(2 pi); choose x on a circle of
    # varying radius so that log p = a * risk + b
    model = build_flow(2, 0, zero_init=True)
    risks = np.linspace(0.1, 0.9, 40)
    radii = np.sqrt(2.0 * risks)  # log p = -risk - log(2 pi)
    xs = [(r, 0.0) for r in radii]
    pearson, slope, intercept = risk_loglik_correlation(
        model, _samples_with(risks, xs))
    assert pearson == pytest.approx(-1.0, abs=1e-9)
    assert slope == pytest.approx(-1.0, abs=1e-9)
    assert intercept == pytest.approx(-np.log(2 * np.pi), abs=1e-9)


def test_correlation_matches_textbook_oracle():
    model = build_flow(2, 0, zero_init=True)
    rng = RandomSource(9)
    xs = rng.uniform(200, -1.0, 1.0).reshape(100, 2)
    risks = rng.uniform(100, 0.0, 1.0)
    samples = _samples_with(risks, xs)
    pearson, slope, intercept = risk_loglik_correlation(model, samples)
    from critgen.flow import log_prob
    lp = log_prob(model, xs)
    ref = stats.pearsonr(risks, lp)
    lin = stats.linregress(risks, lp)
    assert pearson == pytest.approx(ref.statistic, abs=1e-9)
    assert slope == pytest.approx(lin.slope, abs=1e-9)
    assert intercept == pytest.approx(lin.intercept, abs=1e-9)


def test_correlation_shuffled_risks_is_near_zero():
    model = build_flow(2, 0, zero_init=True)
    rng = RandomSource(10)
    xs = rng.uniform(1000, -1.0, 1.0).reshape(500, 2)
    risks = rng.uniform(500, 0.0, 1.0)  # independent of position
    pearson, _, _ = risk_loglik_correlation(model, _samples_with(risks, xs))
    assert abs(pearson) < 0.2


def test_correlation_requires_spread():
    model = build_flow(2, 0, zero_init=True)
    xs = RandomSource(11).uniform(100, -1.0, 1.0).reshape(50, 2)
    with pytest.raises(EvaluationError):
        risk_loglik_correlation(model, _samples_with(np.full(50, 0.5), xs))


def test_correlation_requires_thirty_samples():
    model = build_flow(2, 0, zero_init=True)
    xs = RandomSource(12).uniform(20, -1.0, 1.0).reshape(10, 2)
    with pytest.raises(EvaluationError):
        risk_loglik_correlation(model, _samples_with(np.linspace(0, 1, 10), xs))


# ---------------------------------------------------------------------------
# comparison report
# ---------------------------------------------------------------------------

def test_comparison_rows_sorted_by_queries():
    rows = comparison_report([
        MethodResult("grid", 10_000, (1.0, 1.0)),
        MethodResult("adaptive", 3_000, (0.9, 0.8)),
        MethodResult("uniform", 5_000, (0.05, 0.02)),
    ])
    assert [r.name for r in rows] == ["adaptive", "uniform", "grid"]
    assert rows[0].rate_mean == pytest.approx(0.85)


def test_comparison_report_bytes_deterministic(tmp_path):
    rows = comparison_report([MethodResult("a", 10, (0.5, 0.25)),
                              MethodResult("b", 5, (0.125,))])
    p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    write_comparison_csv(p1, rows)
    write_comparison_csv(p2, rows)
    assert p1.read_bytes() == p2.read_bytes()


def test_comparison_rejects_bad_rates():
    with pytest.raises(Exception):
        comparison_report([MethodResult("x", 1, (1.5,))])
