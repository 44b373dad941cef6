import numpy as np
import pytest

from critgen.envs import (
    far_separated_two_mode_landscape,
    gmm_risk_fn,
    rare_event_landscape,
    single_mode_landscape,
    standard_four_mode_landscape,
    symmetric_four_mode_landscape,
)
from critgen.errors import BudgetExceededError, DimensionMismatchError
from critgen.evalharness import mode_coverage
from critgen.flow import build_flow, log_prob
from critgen.numerics import RandomSource
from critgen.search import (
    HmcConfig,
    QueryLedger,
    ReinforceConfig,
    SamplerConfig,
    adaptive_step,
    exploration_value,
    grid_search,
    hmc_sampler,
    nes_gradient,
    read_replay,
    reinforce_search,
    run_adaptive_sampler,
    uniform_sampler,
    write_replay,
)
from critgen.training import TrainConfig, train_generator


def counting(risk_fn):
    calls = {"n": 0}

    def wrapped(x, y):
        calls["n"] += 1
        return risk_fn(x, y)

    return wrapped, calls


# ---------------------------------------------------------------------------
# exploration_value
# ---------------------------------------------------------------------------

def test_exploration_value_gamma_zero_is_risk():
    ledger = QueryLedger()
    c = exploration_value(np.zeros(2), None, lambda x, y: 0.42, None, 0.0, ledger)
    assert c == 0.42
    assert ledger.count == 1


def test_exploration_value_subtracts_density():
    # identity flow has density 1/(2 pi) at the origin
    gen = build_flow(2, 0, zero_init=True)
    c = exploration_value(np.zeros(2), None, lambda x, y: 0.9, gen, 1.0)
    assert np.isclose(c, 0.9 - 1.0 / (2 * np.pi))


def test_exploration_value_prefers_fresh_mode():
    # generator fit on mode A only; equal-risk centers then rank B above A
    landscape = symmetric_four_mode_landscape()
    risk_fn = gmm_risk_fn(landscape)
    rng = RandomSource(7)
    from critgen.training import WeightedSample

    center_a = landscape.centers[0]
    center_b = landscape.centers[2]
    X = center_a + rng.standard_normal(2400).reshape(1200, 2) * 0.12
    samples = [WeightedSample(x=x, y=np.zeros(0), risk=1.0, weight=1.0) for x in X]
    gen = train_generator(samples, TrainConfig(epochs=25, batch_size=256, seed=1))
    c_a = exploration_value(center_a, np.zeros(0), risk_fn, gen, 0.25)
    c_b = exploration_value(center_b, np.zeros(0), risk_fn, gen, 0.25)
    assert c_a < c_b


# ---------------------------------------------------------------------------
# nes_gradient
# ---------------------------------------------------------------------------

def test_nes_quadratic_gradient_accuracy():
    for i in range(20):
        x = RandomSource(100 + i).uniform(2, -1.0, 1.0)
        g = nes_gradient(x, None, lambda p, y: -float(p @ p), 0.01, 1000,
                         RandomSource(200 + i))
        true = -2.0 * x
        cos = float(g @ true / (np.linalg.norm(g) * np.linalg.norm(true)))
        assert cos > 0.95
        assert np.linalg.norm(g - true) / np.linalg.norm(true) < 0.15


def test_nes_constant_gives_exact_zero():
    g = nes_gradient(np.array([0.3, -0.2]), None, lambda p, y: 5.0, 0.1, 64,
                     RandomSource(3))
    assert np.array_equal(g, np.zeros(2))


def test_nes_linear_unbiased():
    a = np.array([1.5, -2.0])
    ests = [nes_gradient(np.zeros(2), None, lambda p, y: float(a @ p), 0.1,
                         100, RandomSource(300 + i)) for i in range(10)]
    mean = np.mean(ests, axis=0)
    assert np.linalg.norm(mean - a) / np.linalg.norm(a) < 0.10


def test_nes_consumes_exactly_m_evals():
    fn, calls = counting(lambda x, y: float(x[0]))
    nes_gradient(np.zeros(2), None, lambda p, y: fn(p, y), 0.1, 48, RandomSource(1))
    assert calls["n"] == 48


def test_nes_validates_population():
    with pytest.raises(DimensionMismatchError):
        nes_gradient(np.zeros(2), None, lambda p, y: 0.0, 0.1, 7, RandomSource(0))
    with pytest.raises(DimensionMismatchError):
        nes_gradient(np.zeros(2), None, lambda p, y: 0.0, -0.1, 8, RandomSource(0))


# ---------------------------------------------------------------------------
# adaptive_step
# ---------------------------------------------------------------------------

def test_adaptive_step_zero_gradient():
    x = np.array([0.2, -0.7])
    assert np.array_equal(adaptive_step(x, np.zeros(2), 0.1), x)


def test_adaptive_step_clamps_to_box():
    out = adaptive_step(np.array([0.95, 0.0]), np.array([10.0, 0.0]), 0.01)
    assert np.array_equal(out, [1.0, 0.0])


def test_adaptive_step_basic_move():
    out = adaptive_step(np.zeros(2), np.array([1.0, -1.0]), 0.1)
    assert np.allclose(out, [0.1, -0.1])


# ---------------------------------------------------------------------------
# run_adaptive_sampler
# ---------------------------------------------------------------------------

def adaptive_run(seed, gamma, budget=3000):
    landscape = standard_four_mode_landscape()
    fn, calls = counting(gmm_risk_fn(landscape))
    cfg = SamplerConfig(gamma=gamma, seed=seed, iterations=130)
    tc = (TrainConfig(epochs=15, batch_size=256, learning_rate=3e-3, seed=seed)
          if gamma > 0 else None)
    res = run_adaptive_sampler(
        fn, [np.zeros(1)], cfg, d=2, train_config=tc,
        stop_condition=lambda it, r, l: l.count >= budget)
    return res, calls, landscape


def test_adaptive_sampler_covers_modes_with_feedback():
    res, calls, landscape = adaptive_run(seed=0, gamma=0.25)
    assert mode_coverage(res.samples, landscape).covered == 4
    assert res.ledger.count == calls["n"]
    assert res.ledger.count <= 3000 + 8 * 4


def test_adaptive_sampler_collapses_without_feedback():
    res, calls, landscape = adaptive_run(seed=0, gamma=0.0)
    assert mode_coverage(res.samples, landscape).covered <= 2
    assert res.ledger.count == calls["n"]


def test_adaptive_sampler_single_mode_convergence():
    landscape = single_mode_landscape()
    cfg = SamplerConfig(gamma=0.0, seed=3, iterations=40, init_spread=1.0)
    res = run_adaptive_sampler(gmm_risk_fn(landscape), [np.zeros(1)], cfg, d=2)
    late = np.stack([s.x for s in res.samples[-300:]])
    risky = late[np.array([s.risk for s in res.samples[-300:]]) > 0.2]
    assert len(risky) > 0
    assert np.linalg.norm(risky.mean(axis=0) - landscape.centers[0]) < 0.1


def test_adaptive_sampler_deterministic():
    a, _, _ = adaptive_run(seed=5, gamma=0.25, budget=600)
    b, _, _ = adaptive_run(seed=5, gamma=0.25, budget=600)
    assert len(a.samples) == len(b.samples)
    assert np.array_equal(np.stack([s.x for s in a.samples]),
                          np.stack([s.x for s in b.samples]))
    assert [r.queries for r in a.report] == [r.queries for r in b.report]


def test_adaptive_sampler_emits_in_box_samples():
    res, _, _ = adaptive_run(seed=6, gamma=0.25, budget=600)
    X = np.stack([s.x for s in res.samples])
    assert np.all(np.abs(X) <= 1.0)


def test_adaptive_sampler_round_robin_conditions():
    conditions = [np.array([0.0]), np.array([1.0])]
    cfg = SamplerConfig(seed=1, iterations=2, particles=4, nes_population=4,
                        gamma=0.0)
    res = run_adaptive_sampler(gmm_risk_fn(standard_four_mode_landscape()),
                               conditions, cfg, d=2)
    ys = {float(s.y[0]) for s in res.samples}
    assert ys == {0.0, 1.0}


# ---------------------------------------------------------------------------
# uniform sampler
# ---------------------------------------------------------------------------

def test_uniform_zero_draws():
    samples, ledger = uniform_sampler(lambda x, y: 1.0, 0, 2, RandomSource(1))
    assert samples == [] and ledger.count == 0


def test_uniform_ledger_exact():
    fn, calls = counting(lambda x, y: 0.5)
    samples, ledger = uniform_sampler(fn, 1000, 2, RandomSource(2))
    assert ledger.count == 1000 == calls["n"] == len(samples)


def test_uniform_rare_event_hit_fraction():
    landscape = rare_event_landscape()
    fn = gmm_risk_fn(landscape)
    samples, _ = uniform_sampler(fn, 20_000, 2, RandomSource(3))
    frac = float(np.mean([s.risk > 0.5 for s in samples]))
    assert abs(frac - 0.01) < 0.007


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

def test_grid_exact_lattice():
    fn, calls = counting(lambda x, y: 0.0)
    samples, ledger = grid_search(fn, 3, 2)
    assert ledger.count == 9 == calls["n"]
    X = np.stack([s.x for s in samples])
    assert sorted(set(X[:, 0])) == [-1.0, 0.0, 1.0]


def test_grid_desk_scale_count():
    samples, ledger = grid_search(lambda x, y: 0.0, 10, 4, cap=10_001)
    assert ledger.count == 10_000


def test_grid_budget_guard():
    with pytest.raises(BudgetExceededError):
        grid_search(lambda x, y: 0.0, 101, 4, cap=1_000_000)


# ---------------------------------------------------------------------------
# HMC
# ---------------------------------------------------------------------------

def test_hmc_gaussian_target_moments():
    mu = np.array([0.2, -0.1])
    sig = 0.3

    def log_density_risk(x, y):
        z = (x - mu) / sig
        return float(-0.5 * (z @ z))

    cfg = HmcConfig(step_size=0.15, leapfrog_steps=8, tau=1.0, seed=3)
    res = hmc_sampler(log_density_risk, 5000, cfg, d=2)
    X = np.stack([s.x for s in res.samples])
    assert np.all(np.abs(X.mean(axis=0) - mu) < 0.1 * sig / 0.3 * 0.3 + 0.03)
    assert np.all(np.abs(X.var(axis=0) - sig ** 2) < 0.1 * sig ** 2)


def test_hmc_single_chain_concentrates_on_one_mode():
    landscape = far_separated_two_mode_landscape()
    risk_fn = gmm_risk_fn(landscape)
    ok = 0
    for seed in range(5):
        cfg = HmcConfig(step_size=0.03, leapfrog_steps=5, tau=0.1, seed=seed)
        res = hmc_sampler(risk_fn, 2000, cfg, d=2)
        X = np.stack([s.x for s in res.samples])
        near = [np.linalg.norm(X - c, axis=1) < 0.3 for c in landscape.centers]
        counts = np.array([m.sum() for m in near])
        if counts.sum() == 0:
            continue
        if counts.min() / counts.sum() < 0.2:
            ok += 1
    assert ok >= 4


def test_hmc_ledger_counts_gradient_queries():
    fn, calls = counting(lambda x, y: float(np.exp(-x @ x)))
    cfg = HmcConfig(step_size=0.05, leapfrog_steps=3, tau=1.0, seed=1)
    res = hmc_sampler(fn, 50, cfg, d=2)
    assert res.ledger.count == calls["n"]


def test_hmc_rejects_zero_step_size():
    with pytest.raises(DimensionMismatchError):
        HmcConfig(step_size=0.0)


# ---------------------------------------------------------------------------
# REINFORCE
# ---------------------------------------------------------------------------

def test_reinforce_single_mode_convergence():
    landscape = single_mode_landscape()
    res = reinforce_search(gmm_risk_fn(landscape), 150, ReinforceConfig(seed=2),
                           d=2)
    assert np.linalg.norm(res.mean - landscape.centers[0]) < 0.1


def test_reinforce_symmetric_landscape_covers_one_mode():
    landscape = symmetric_four_mode_landscape()
    risk_fn = gmm_risk_fn(landscape)
    exact_one = 0
    for seed in range(10):
        res = reinforce_search(risk_fn, 150, ReinforceConfig(seed=seed), d=2)
        rng = RandomSource(1000 + seed)
        X = np.clip(res.mean + res.std * rng.standard_normal(1000).reshape(500, 2),
                    -1.0, 1.0)
        if mode_coverage(X, landscape).covered == 1:
            exact_one += 1
    assert exact_one >= 8


def test_reinforce_zero_risk_mean_stays_put():
    res = reinforce_search(lambda x, y: 0.0, 80, ReinforceConfig(seed=0), d=2)
    assert np.linalg.norm(res.mean) < 0.05


def test_reinforce_ledger_exact():
    fn, calls = counting(lambda x, y: 0.3)
    res = reinforce_search(fn, 12, ReinforceConfig(population=10, seed=1), d=2)
    assert res.ledger.count == 120 == calls["n"]


def test_reinforce_validates_population():
    with pytest.raises(DimensionMismatchError):
        ReinforceConfig(population=1)


# ---------------------------------------------------------------------------
# Replay round trip
# ---------------------------------------------------------------------------

def test_replay_file_round_trip(tmp_path):
    samples, _ = uniform_sampler(
        gmm_risk_fn(standard_four_mode_landscape()), 50, 2, RandomSource(9),
        conditions=[np.array([0.3])])
    path = tmp_path / "replay.csv"
    write_replay(path, samples)
    loaded = read_replay(path)
    assert len(loaded) == 50
    assert np.array_equal(np.stack([s.x for s in loaded]),
                          np.stack([s.x for s in samples]))
    assert np.array_equal([s.risk for s in loaded], [s.risk for s in samples])
    assert np.array_equal([s.weight for s in loaded], [s.weight for s in samples])
