import numpy as np
import pytest

from critgen.errors import DimensionMismatchError
from critgen.flow import (
    FlowConfig,
    build_flow,
    forward_transform,
    from_physical,
    inverse_transform,
    log_prob,
    log_prob_and_param_grad,
    sample,
    to_physical,
)
from critgen.numerics import RandomSource
from critgen.training import TrainConfig, train_prior


def perturbed(model, seed, scale=0.1):
    return model.with_params(
        RandomSource(seed).standard_normal(model.n_params) * scale)


# ---------------------------------------------------------------------------
# Identity initialization
# ---------------------------------------------------------------------------

def test_zero_params_is_identity():
    m = build_flow(2, 0, zero_init=True)
    x = np.array([0.7, -0.2])
    z, ld = forward_transform(m, x)
    assert np.array_equal(z, x)
    assert ld == 0.0
    assert np.array_equal(inverse_transform(m, x), x)


def test_default_init_is_identity_with_random_hidden():
    m = build_flow(3, 2, seed=11)
    assert np.any(m.params != 0.0)
    x = np.array([0.3, -0.5, 0.9])
    z, ld = forward_transform(m, x, np.array([1.0, -1.0]))
    assert np.allclose(z, x, atol=1e-15)
    assert abs(ld) < 1e-15


def test_identity_log_prob_is_standard_normal():
    m = build_flow(2, 0, zero_init=True)
    assert np.isclose(log_prob(m, np.zeros(2)), -np.log(2 * np.pi))
    assert np.isclose(log_prob(m, np.array([1.0, 0.0])),
                      -np.log(2 * np.pi) - 0.5)


def test_inverse_of_zero_is_zero():
    m = build_flow(2, 0, zero_init=True)
    assert np.array_equal(inverse_transform(m, np.zeros(2)), np.zeros(2))


# ---------------------------------------------------------------------------
# Bijectivity
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d,k,seed", [(2, 0, 1), (4, 4, 2), (3, 1, 3)])
def test_round_trip_1000_points(d, k, seed):
    m = perturbed(build_flow(d, k, seed=seed), seed + 50, scale=0.3)
    rng = RandomSource(seed + 99)
    X = rng.uniform(1000 * d, -1.0, 1.0).reshape(1000, d)
    Y = rng.uniform(1000 * k, -1.0, 1.0).reshape(1000, k) if k else None
    Z, _ = forward_transform(m, X, Y)
    Xr = inverse_transform(m, Z, Y)
    assert np.max(np.abs(Xr - X)) < 1e-6
    Zr, _ = forward_transform(m, Xr, Y)
    assert np.max(np.abs(Zr - Z)) < 1e-6


# ---------------------------------------------------------------------------
# Exact likelihood
# ---------------------------------------------------------------------------

def fd_jacobian_logdet(model, x, y=None, h=1e-5):
    d = x.size
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        zp, _ = forward_transform(model, x + e, y)
        zm, _ = forward_transform(model, x - e, y)
        J[:, j] = (zp - zm) / (2 * h)
    return float(np.log(np.abs(np.linalg.det(J))))


@pytest.mark.parametrize("d,k", [(2, 0), (3, 0), (4, 2)])
def test_logdet_matches_fd_jacobian(d, k):
    m = perturbed(build_flow(d, k, seed=d), d + 7, scale=0.25)
    rng = RandomSource(d * 31)
    for _ in range(30):
        x = rng.uniform(d, -1.0, 1.0)
        y = rng.uniform(k, -1.0, 1.0) if k else None
        _, ld = forward_transform(m, x, y)
        assert abs(ld - fd_jacobian_logdet(m, x, y)) < 1e-4


def test_density_integrates_to_one():
    # a short-trained small flow on concentrated data; quadrature over a
    # padded grid captures essentially all mass
    rng = RandomSource(17)
    data = rng.standard_normal(3000).reshape(1500, 2) * 0.3
    model = train_prior(data, TrainConfig(epochs=8, batch_size=256, seed=4),
                        flow_config=FlowConfig(n_layers=1, hidden_dims=(16,)))
    grid = np.linspace(-3.0, 3.0, 241)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    dens = np.exp(log_prob(model, pts))
    cell = (grid[1] - grid[0]) ** 2
    integral = float(dens.sum() * cell)
    assert abs(integral - 1.0) < 0.02


# ---------------------------------------------------------------------------
# Sampling and temperature
# ---------------------------------------------------------------------------

def test_identity_sampling_moments():
    m = build_flow(2, 0, zero_init=True)
    X = sample(m, 100_000, 1.0, rng=RandomSource(5))
    assert np.all(np.abs(X.mean(axis=0)) < 0.02)
    assert np.all(np.abs(X.var(axis=0) - 1.0) < 0.03)


def test_low_temperature_variance_scaling():
    m = build_flow(2, 0, zero_init=True)
    X = sample(m, 100_000, 0.2, rng=RandomSource(6))
    assert np.all(np.abs(X.var(axis=0) - 0.04) < 0.005)


def test_temperature_concentrates_log_prob():
    rng = RandomSource(21)
    data = np.concatenate([
        rng.standard_normal(1600).reshape(800, 2) * 0.2 + np.array([0.4, 0.0]),
        rng.standard_normal(1600).reshape(800, 2) * 0.2 - np.array([0.4, 0.0]),
    ])
    model = train_prior(data, TrainConfig(epochs=15, batch_size=256, seed=9))
    means = []
    for i, temp in enumerate((1.0, 0.5, 0.2)):
        X = sample(model, 1000, temp, rng=RandomSource(100 + i))
        means.append(float(log_prob(model, X).mean()))
    assert means[0] <= means[1] <= means[2]


def test_temperature_validation():
    m = build_flow(2, 0, zero_init=True)
    for bad in (0.0, -0.5, 1.6):
        with pytest.raises(DimensionMismatchError):
            sample(m, 3, bad, rng=RandomSource(0))


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def test_identity_model_ignores_condition_value():
    m = build_flow(2, 2, zero_init=True)
    x = np.array([0.3, 0.4])
    assert log_prob(m, x, np.array([1.0, 0.0])) == log_prob(m, x, np.array([0.0, 1.0]))


def test_condition_reaches_conditioner_nets():
    m = perturbed(build_flow(2, 2, seed=2), 12, scale=0.2)
    x = np.array([0.3, 0.4])
    z1, _ = forward_transform(m, x, np.array([1.0, 0.0]))
    z2, _ = forward_transform(m, x, np.array([0.0, 1.0]))
    assert not np.allclose(z1, z2)


def test_conditional_model_requires_condition():
    m = build_flow(2, 2, zero_init=True)
    with pytest.raises(DimensionMismatchError):
        log_prob(m, np.zeros(2))
    with pytest.raises(DimensionMismatchError):
        log_prob(m, np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# Gradient plumbing
# ---------------------------------------------------------------------------

def test_param_grad_matches_fd_on_weighted_sum():
    m = perturbed(build_flow(2, 1, seed=8), 13, scale=0.1)
    rng = RandomSource(14)
    X = rng.uniform(10, -1.0, 1.0).reshape(5, 2)
    Y = rng.uniform(5, -1.0, 1.0).reshape(5, 1)
    coeff = rng.uniform(5, 0.2, 1.0)
    logp, grad = log_prob_and_param_grad(m, X, Y, coeff)
    assert np.allclose(logp, log_prob(m, X, Y))
    idx = RandomSource(15).integers(20, m.n_params)
    h = 1e-5
    for j in np.unique(idx):
        p = np.array(m.params)
        p[j] += h
        up = float(coeff @ log_prob(m.with_params(p), X, Y))
        p[j] -= 2 * h
        dn = float(coeff @ log_prob(m.with_params(p), X, Y))
        fd = (up - dn) / (2 * h)
        assert abs(grad[j] - fd) / max(abs(fd), abs(grad[j]), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# Physical units
# ---------------------------------------------------------------------------

def test_physical_round_trip_and_clamp():
    ranges = np.array([[-20.0, 20.0], [-7.0, 7.0]])
    m = build_flow(2, 0, zero_init=True, ranges=ranges)
    x = np.array([0.5, -1.0])
    phys = to_physical(m, x)
    assert np.allclose(phys, [10.0, -7.0])
    assert np.allclose(from_physical(m, phys), x)
    # out-of-box model values clamp at the edges
    assert np.allclose(to_physical(m, np.array([3.0, 0.0])), [20.0, 0.0])
