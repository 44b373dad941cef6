"""Sample collection from black-box risk landscapes.

The centerpiece is the adaptive sampler: a particle population ascends the
exploration value c(x|y) = r(x|y) - gamma * p(x|y) using gradients estimated
by Gaussian smoothing (antithetic perturbation pairs), while the generator
flow is periodically retrained on everything collected so far. High
generator density marks a mode as learned, drives c down there, and pushes
particles toward uncovered modes. Uniform, grid, Hamiltonian Monte Carlo,
and single-Gaussian REINFORCE searchers provide the baselines.

Every risk-function invocation is counted in a QueryLedger; reported counts
are exact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from .errors import BudgetExceededError, DimensionMismatchError
from .flow import FlowConfig, FlowModel, build_flow, log_prob
from .numerics import RandomSource
from .training import TrainConfig, WeightedSample, train_generator


class QueryLedger:
    """Exact count of black-box risk evaluations, broken down by phase.

    Increments are lock-protected so concurrent evaluation batches cannot
    drop counts.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._phases: dict[str, int] = {}

    def record(self, phase: str, n: int = 1) -> None:
        if n < 0:
            raise DimensionMismatchError("ledger increments must be non-negative")
        with self._lock:
            self._phases[phase] = self._phases.get(phase, 0) + n

    @property
    def count(self) -> int:
        with self._lock:
            return sum(self._phases.values())

    def breakdown(self) -> dict[str, int]:
        with self._lock:
            return dict(self._phases)


@dataclass(frozen=True)
class SamplerConfig:
    """Adaptive sampler hyperparameters.

    ``nes_sigma`` is the smoothing scale of the gradient estimator and is
    distinct from the flow's sampling temperature. ``nes_population`` must be
    even (antithetic pairs).
    """

    alpha: float = 0.35
    nes_sigma: float = 0.3
    nes_population: int = 4
    gamma: float = 0.25
    particles: int = 8
    iterations: int = 95
    retrain_every: int = 4
    seed: int = 0
    restart_percentile: float = 20.0
    restart_patience: int = 2
    init_spread: float = 0.15

    def __post_init__(self):
        if self.alpha <= 0 or self.nes_sigma <= 0:
            raise DimensionMismatchError("alpha and nes_sigma must be positive")
        if self.nes_population < 2 or self.nes_population % 2 != 0:
            raise DimensionMismatchError("nes_population must be an even integer >= 2")
        if self.particles < 1 or self.iterations < 0 or self.retrain_every < 1:
            raise DimensionMismatchError("particles/iterations/retrain_every invalid")
        if self.gamma < 0:
            raise DimensionMismatchError("gamma must be >= 0")
        if not (0.0 < self.init_spread <= 1.0):
            raise DimensionMismatchError("init_spread must lie in (0, 1]")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    best_risk: float
    mean_c: float
    queries: int


@dataclass
class AdaptiveResult:
    samples: list[WeightedSample]
    generator: FlowModel
    ledger: QueryLedger
    report: list[IterationRecord]


def exploration_value(x, y, risk_fn, generator: FlowModel | None, gamma: float,
                      ledger: QueryLedger | None = None,
                      phase: str = "exploration") -> float:
    """r(x|y) minus gamma times the current generator density at (x, y)."""
    r = float(risk_fn(x, y))
    if ledger is not None:
        ledger.record(phase)
    if generator is None or gamma == 0.0:
        return r
    return r - gamma * float(np.exp(log_prob(generator, x, y)))


def nes_gradient(x, y, c_fn, nes_sigma: float, M: int,
                 rng: RandomSource) -> np.ndarray:
    """Monte Carlo smoothed-gradient estimate of c at x.

    Uses M/2 antithetic pairs (eps, -eps); the estimate is
    (1 / (M * sigma)) * sum_i eps_i * c(x + sigma * eps_i), which is exactly
    zero for constant c and unbiased for linear c. Consumes exactly M
    evaluations of ``c_fn``.
    """
    if M < 2 or M % 2 != 0:
        raise DimensionMismatchError("M must be an even integer >= 2")
    if nes_sigma <= 0:
        raise DimensionMismatchError("nes_sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    half = M // 2
    eps = rng.standard_normal(half * d).reshape(half, d)
    acc = np.zeros(d)
    for i in range(half):
        c_plus = c_fn(x + nes_sigma * eps[i], y)
        c_minus = c_fn(x - nes_sigma * eps[i], y)
        acc += eps[i] * (c_plus - c_minus)
    return acc / (M * nes_sigma)


def adaptive_step(x, gradient, alpha: float, bound: float = 1.0) -> np.ndarray:
    """Ascend the exploration value and clamp to the scenario box."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(g))):
        raise DimensionMismatchError("non-finite input to adaptive_step")
    return np.clip(x + alpha * g, -bound, bound)


def run_adaptive_sampler(risk_fn, conditions, config: SamplerConfig, d: int,
                         train_config: TrainConfig | None = None,
                         flow_config: FlowConfig = FlowConfig(),
                         prior: FlowModel | None = None,
                         ledger: QueryLedger | None = None,
                         ranges: np.ndarray | None = None,
                         stop_condition=None) -> AdaptiveResult:
    """Full adaptive collection loop.

    Particles are assigned conditions round-robin from the catalog and
    ascend c via smoothed gradients; every perturbation evaluation enters
    the replay with its risk and WMLE weight. Every ``retrain_every``
    iterations the generator is refit on the complete replay (warm started),
    which refreshes c. Particles stuck below the population's
    ``restart_percentile`` of mean c for ``restart_patience`` consecutive
    iterations are resampled uniformly.

    ``stop_condition(iteration, samples, ledger)`` may return True to end
    the run early (used for budget-to-coverage comparisons).
    """
    conditions = [np.asarray(c, dtype=np.float64).ravel() for c in conditions]
    if len(conditions) == 0:
        raise DimensionMismatchError("need at least one condition")
    k = conditions[0].size
    if any(c.size != k for c in conditions):
        raise DimensionMismatchError("conditions must share one length")
    if ledger is None:
        ledger = QueryLedger()

    beta = train_config.beta if train_config is not None else 0.0
    floor = train_config.weight_floor if train_config is not None else 0.0
    if beta > 0 and prior is None:
        raise DimensionMismatchError("beta > 0 requires a prior model")

    root = RandomSource(config.seed)
    init_rng = root.split(0)
    # Particles start as a compact cluster at a random spot so exploration
    # must be earned by the generator feedback; init_spread=1.0 recovers a
    # uniform-box initialization.
    spread = config.init_spread
    center = init_rng.uniform(d, -1.0 + spread, 1.0 - spread)
    positions = center + init_rng.uniform(
        config.particles * d, -spread, spread).reshape(config.particles, d)
    particle_conditions = [conditions[i % len(conditions)]
                           for i in range(config.particles)]

    generator = build_flow(d, k, flow_config, seed=config.seed, ranges=ranges)
    generator_trained = False
    replay: list[WeightedSample] = []
    report: list[IterationRecord] = []
    streaks = np.zeros(config.particles, dtype=int)
    best_risk = 0.0

    def make_c_fn(collector):
        def c_fn(xp, yp):
            xp = np.clip(xp, -1.0, 1.0)
            r = float(risk_fn(xp, yp))
            ledger.record("nes")
            prior_density = (float(np.exp(log_prob(prior, xp)))
                             if prior is not None else 0.0)
            weight = max(r + beta * prior_density, floor)
            replay.append(WeightedSample(x=np.array(xp), y=np.array(yp), risk=r,
                                         prior_density=prior_density, weight=weight))
            c = r
            if generator_trained and config.gamma > 0.0:
                c -= config.gamma * float(np.exp(log_prob(generator, xp, yp)))
            collector.append((r, c))
            return c
        return c_fn

    for it in range(config.iterations):
        mean_c = np.zeros(config.particles)
        for p in range(config.particles):
            prng = root.split(1 + it * config.particles + p)
            evals: list[tuple[float, float]] = []
            grad = nes_gradient(positions[p], particle_conditions[p],
                                make_c_fn(evals), config.nes_sigma,
                                config.nes_population, prng)
            positions[p] = adaptive_step(positions[p], grad, config.alpha)
            best_risk = max(best_risk, max(r for r, _ in evals))
            mean_c[p] = float(np.mean([c for _, c in evals]))

        # Recycle particles parked where the generator already explains the
        # risk: exploration value below zero (density term dominates) and in
        # the worst percentile of the population. With gamma = 0 the value
        # never goes negative and particles are never recycled, which is the
        # mode-collapse failure this sampler exists to fix.
        threshold = min(float(np.percentile(mean_c, config.restart_percentile)), 0.0)
        for p in range(config.particles):
            if mean_c[p] < threshold:
                streaks[p] += 1
            else:
                streaks[p] = 0
            if streaks[p] >= config.restart_patience:
                rrng = root.split(1_000_003 + it * config.particles + p)
                positions[p] = rrng.uniform(d, -1.0, 1.0)
                streaks[p] = 0

        report.append(IterationRecord(it, best_risk, float(mean_c.mean()),
                                      ledger.count))

        if (train_config is not None and train_config.epochs > 0
                and (it + 1) % config.retrain_every == 0 and len(replay) > 1):
            cfg = replace(train_config,
                          batch_size=min(train_config.batch_size, len(replay)),
                          seed=train_config.seed + it + 1)
            generator = train_generator(replay, cfg, warm_start=generator,
                                        flow_config=flow_config, ranges=ranges)
            generator_trained = True

        if stop_condition is not None and stop_condition(it, replay, ledger):
            break

    return AdaptiveResult(samples=replay, generator=generator, ledger=ledger,
                          report=report)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def uniform_sampler(risk_fn, n: int, d: int, rng: RandomSource,
                    conditions=None, ledger: QueryLedger | None = None):
    """n i.i.d. scenario draws over the box, each evaluated once."""
    if n < 0:
        raise DimensionMismatchError("n must be >= 0")
    if ledger is None:
        ledger = QueryLedger()
    conds = ([np.asarray(c, dtype=np.float64).ravel() for c in conditions]
             if conditions else [np.zeros(0)])
    samples = []
    if n > 0:
        X = rng.uniform(n * d, -1.0, 1.0).reshape(n, d)
        for i in range(n):
            y = conds[i % len(conds)]
            r = float(risk_fn(X[i], y))
            ledger.record("uniform")
            samples.append(WeightedSample(x=X[i], y=y, risk=r, weight=r))
    return samples, ledger


def grid_search(risk_fn, steps_per_dim: int, d: int, y=None,
                cap: int = 1_000_000, ledger: QueryLedger | None = None):
    """Exhaustive Cartesian lattice over the box.

    Refuses to start when steps_per_dim ** d exceeds ``cap``.
    """
    if steps_per_dim < 2:
        raise DimensionMismatchError("steps_per_dim must be >= 2")
    total = steps_per_dim ** d
    if total > cap:
        raise BudgetExceededError(
            f"grid of {steps_per_dim}^{d} = {total} queries exceeds cap {cap}"
        )
    if ledger is None:
        ledger = QueryLedger()
    yv = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64).ravel()
    axes = [np.linspace(-1.0, 1.0, steps_per_dim)] * d
    samples = []
    for idx in np.ndindex(*([steps_per_dim] * d)):
        x = np.array([axes[j][idx[j]] for j in range(d)])
        r = float(risk_fn(x, yv))
        ledger.record("grid")
        samples.append(WeightedSample(x=x, y=yv, risk=r, weight=r))
    return samples, ledger


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.05
    leapfrog_steps: int = 5
    tau: float = 0.1
    fd_step: float = 0.01
    bound: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise DimensionMismatchError("step size must be positive")
        if self.leapfrog_steps < 1:
            raise DimensionMismatchError("leapfrog_steps must be >= 1")
        if self.tau <= 0 or self.fd_step <= 0:
            raise DimensionMismatchError("tau and fd_step must be positive")


@dataclass
class HmcResult:
    samples: list[WeightedSample]
    ledger: QueryLedger
    acceptance_rate: float
    low_acceptance_warning: bool


def hmc_sampler(risk_fn, n: int, config: HmcConfig, d: int, y=None,
                ledger: QueryLedger | None = None) -> HmcResult:
    """Single-chain HMC targeting the density proportional to exp(r/tau) on
    the box.

    Risk gradients come from central finite differences (2d queries per
    gradient, all counted). Proposals leaving the box are rejected. An
    acceptance rate below 1% over the run raises the diagnostic flag in the
    result.
    """
    if n < 1:
        raise DimensionMismatchError("n must be >= 1")
    if ledger is None:
        ledger = QueryLedger()
    yv = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64).ravel()
    rng = RandomSource(config.seed)

    def risk_at(x):
        ledger.record("hmc")
        return float(risk_fn(x, yv))

    def grad_risk(x):
        g = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = config.fd_step
            g[j] = (risk_at(x + e) - risk_at(x - e)) / (2.0 * config.fd_step)
        return g

    x = rng.uniform(d, -config.bound, config.bound)
    r_x = risk_at(x)
    samples = []
    accepted = 0
    for _ in range(n):
        p = rng.standard_normal(d)
        k0 = 0.5 * float(p @ p)
        xq = x.copy()
        p = p + 0.5 * config.step_size * grad_risk(xq) / config.tau
        for l in range(config.leapfrog_steps):
            xq = xq + config.step_size * p
            g = grad_risk(xq) / config.tau
            p = p + (config.step_size if l < config.leapfrog_steps - 1
                     else 0.5 * config.step_size) * g
        inside = bool(np.all(np.abs(xq) <= config.bound))
        if inside:
            r_q = risk_at(xq)
            k1 = 0.5 * float(p @ p)
            log_accept = (r_q - r_x) / config.tau + k0 - k1
            if np.log(rng.uniform(1)[0]) < log_accept:
                x, r_x = xq, r_q
                accepted += 1
        samples.append(WeightedSample(x=x.copy(), y=yv, risk=r_x, weight=r_x))
    rate = accepted / n
    return HmcResult(samples=samples, ledger=ledger, acceptance_rate=rate,
                     low_acceptance_warning=rate < 0.01)


@dataclass(frozen=True)
class ReinforceConfig:
    population: int = 16
    learning_rate: float = 0.3
    std_lr_scale: float = 0.5
    init_std: float = 0.5
    max_std: float = 1.0
    std_floor: float = 1e-4
    explore_floor: float = 0.05
    normalize_advantage: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise DimensionMismatchError("population must be >= 2")
        if self.learning_rate <= 0 or self.init_std <= 0:
            raise DimensionMismatchError("learning_rate and init_std must be positive")


@dataclass
class ReinforceResult:
    mean: np.ndarray
    std: np.ndarray
    samples: list[WeightedSample]
    ledger: QueryLedger
    converged: bool


def reinforce_search(risk_fn, n_iterations: int, config: ReinforceConfig, d: int,
                     y=None, ledger: QueryLedger | None = None) -> ReinforceResult:
    """Score-function search with a single diagonal Gaussian policy.

    Expected risk is ascended with a mean-reward baseline and (by default)
    advantage normalization so weak risk signals still steer the mean. The
    std floor is held up during the first two thirds of the run so the
    policy keeps exploring until the mean locks onto a mode; the policy can
    only ever represent one modality. Stops early with the converged flag
    once every std falls below ``std_floor``.
    """
    if ledger is None:
        ledger = QueryLedger()
    yv = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64).ravel()
    rng = RandomSource(config.seed)
    mean = np.zeros(d)
    log_std = np.full(d, np.log(config.init_std))
    samples = []
    converged = False
    explore_until = (2 * n_iterations) // 3
    for it in range(n_iterations):
        std = np.exp(log_std)
        eps = rng.standard_normal(config.population * d).reshape(config.population, d)
        xs = np.clip(mean + std * eps, -1.0, 1.0)
        rs = np.empty(config.population)
        for i in range(config.population):
            rs[i] = float(risk_fn(xs[i], yv))
            ledger.record("reinforce")
            samples.append(WeightedSample(x=xs[i].copy(), y=yv, risk=rs[i],
                                          weight=rs[i]))
        adv = rs - rs.mean()
        if config.normalize_advantage:
            spread = adv.std()
            if spread > 1e-12:
                adv = adv / spread
        # Mean step is scaled by the current std (score gradient times
        # sigma^2), keeping the step inside the exploration radius instead
        # of blowing up as the policy narrows.
        g_mean = (adv[:, None] * eps).mean(axis=0) * std
        g_log_std = (adv[:, None] * (eps * eps - 1.0)).mean(axis=0)
        mean = np.clip(mean + config.learning_rate * g_mean, -1.0, 1.0)
        log_std = np.clip(
            log_std + config.learning_rate * config.std_lr_scale * g_log_std,
            np.log(config.std_floor), np.log(config.max_std))
        if it < explore_until:
            log_std = np.maximum(log_std, np.log(config.explore_floor))
        if np.all(np.exp(log_std) < config.std_floor * (1.0 + 1e-9)):
            converged = True
            break
    return ReinforceResult(mean=mean, std=np.exp(log_std), samples=samples,
                           ledger=ledger, converged=converged)


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------

def write_run_report(path, records: list[IterationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,best_risk,mean_c,queries\n")
        for rec in records:
            fh.write(f"{rec.iteration},{rec.best_risk!r},{rec.mean_c!r},{rec.queries}\n")


def write_replay(path, samples: list[WeightedSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if samples:
            d = len(np.asarray(samples[0].x).ravel())
            k = len(np.asarray(samples[0].y).ravel())
        else:
            d = k = 0
        cols = [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(k)]
        fh.write(",".join(cols + ["risk", "weight"]) + "\n")
        for s in samples:
            vals = [*np.asarray(s.x).ravel(), *np.asarray(s.y).ravel(),
                    s.risk, s.weight]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def read_replay(path) -> list[WeightedSample]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        d = sum(1 for c in header if c.startswith("x"))
        k = sum(1 for c in header if c.startswith("y"))
        samples = []
        for line in fh:
            parts = [float(v) for v in line.strip().split(",")]
            samples.append(WeightedSample(
                x=np.array(parts[:d]), y=np.array(parts[d:d + k]),
                risk=parts[d + k], prior_density=0.0, weight=parts[d + k + 1]))
    return samples
