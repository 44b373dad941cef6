"""Quantitative evaluation: mode coverage, collision rates, query-efficiency
comparison rows, and the risk-versus-log-likelihood relation.

Coverage operationalizes the qualitative "covers all modes" judgement: a
mode counts as covered when at least a threshold fraction of samples lands
within three standard deviations of its center. Collision rates sample the
generator per route at a fixed temperature and roll each scenario through
the intersection simulator.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .envs import GmmLandscape, IntersectionConfig, simulate_intersection
from .errors import DimensionMismatchError, EvaluationError
from .flow import FlowModel, log_prob, sample
from .numerics import RandomSource
from .training import WeightedSample


@dataclass(frozen=True)
class CoverageReport:
    per_mode_fraction: tuple[float, ...]
    covered: int
    total: int
    threshold: float


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    queries: int
    rate_mean: float
    rate_std: float
    per_condition: tuple[float, ...]


def _positions(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples)
    if len(samples) == 0:
        raise EvaluationError("empty sample set")
    return np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])


def mode_coverage(samples, landscape: GmmLandscape,
                  threshold: float = 0.05, y=None) -> CoverageReport:
    """Fraction of samples inside each mode's 3-sigma ball; a mode is covered
    when its fraction reaches the threshold."""
    X = _positions(samples)
    if X.shape[0] == 0:
        raise EvaluationError("empty sample set")
    centers = landscape.centers + landscape.shift_for(y)
    fractions = []
    for c, s in zip(centers, landscape.stds):
        dist = np.linalg.norm(X - c, axis=1)
        fractions.append(float(np.mean(dist <= 3.0 * s)))
    covered = int(sum(f >= threshold for f in fractions))
    return CoverageReport(per_mode_fraction=tuple(fractions), covered=covered,
                          total=landscape.n_modes, threshold=threshold)


def _simulate_collisions(args):
    config, X, y = args
    return [simulate_intersection(config, x, y).collided for x in X]


def collision_rate(generator: FlowModel, conditions, n_per_condition: int,
                   temperature: float, sim_config: IntersectionConfig,
                   seed: int = 0, workers: int = 1):
    """Per-route collision fraction of generator samples, plus mean and std
    (population) across routes.

    ``conditions`` maps route names to condition vectors. Returns
    ``(mean, std, per_route)`` with per_route keyed like conditions.
    """
    if n_per_condition < 1:
        raise EvaluationError("n_per_condition must be >= 1: empty evaluation refused")
    items = sorted(conditions.items()) if isinstance(conditions, dict) else \
        [(f"c{i}", c) for i, c in enumerate(conditions)]
    root = RandomSource(seed)
    tasks = []
    for idx, (name, y) in enumerate(items):
        X = sample(generator, n_per_condition, temperature, y, rng=root.split(idx))
        tasks.append((sim_config, np.clip(X, -1.0, 1.0), np.asarray(y)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_simulate_collisions, tasks))
    else:
        outcomes = [_simulate_collisions(t) for t in tasks]
    per_route = {name: float(np.mean(col))
                 for (name, _), col in zip(items, outcomes)}
    rates = np.array(list(per_route.values()))
    return float(rates.mean()), float(rates.std()), per_route


def collision_fraction(samples, sim_config: IntersectionConfig) -> float:
    """Fraction of already-evaluated samples whose risk implies a collision.

    risk = exp(-min_distance), so collided iff risk > exp(-collision_radius).
    """
    if len(samples) == 0:
        raise EvaluationError("empty sample set")
    cutoff = float(np.exp(-sim_config.collision_radius))
    return float(np.mean([s.risk > cutoff for s in samples]))


def gaussian_policy_rates(mean, std, conditions, n_per_condition: int,
                          sim_config: IntersectionConfig, seed: int = 0):
    """Collision rate of a diagonal-Gaussian scenario policy per route."""
    if n_per_condition < 1:
        raise EvaluationError("n_per_condition must be >= 1")
    items = sorted(conditions.items()) if isinstance(conditions, dict) else \
        [(f"c{i}", c) for i, c in enumerate(conditions)]
    root = RandomSource(seed)
    per_route = {}
    for idx, (name, y) in enumerate(items):
        rng = root.split(idx)
        d = len(np.asarray(mean).ravel())
        eps = rng.standard_normal(n_per_condition * d).reshape(n_per_condition, d)
        X = np.clip(np.asarray(mean) + np.asarray(std) * eps, -1.0, 1.0)
        collided = [simulate_intersection(sim_config, x, y).collided for x in X]
        per_route[name] = float(np.mean(collided))
    return per_route


def risk_loglik_correlation(generator: FlowModel, samples,
                            min_spread: float = 0.2):
    """Pearson correlation and least-squares line of log_prob against risk.

    Requires at least 30 samples whose risks span ``min_spread``.
    """
    if len(samples) < 30:
        raise EvaluationError("need at least 30 samples with recorded risk")
    risks = np.array([s.risk for s in samples], dtype=np.float64)
    if risks.max() - risks.min() < min_spread:
        raise EvaluationError(
            f"risk spread {risks.max() - risks.min():.3f} below {min_spread}: "
            "degenerate evaluation"
        )
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
    if generator.k > 0:
        Y = np.stack([np.asarray(s.y, dtype=np.float64).ravel() for s in samples])
        lp = log_prob(generator, X, Y)
    else:
        lp = log_prob(generator, X)
    r_c = risks - risks.mean()
    l_c = lp - lp.mean()
    denom = np.sqrt((r_c * r_c).sum() * (l_c * l_c).sum())
    if denom == 0.0:
        raise EvaluationError("zero variance in risk or log-likelihood")
    pearson = float((r_c * l_c).sum() / denom)
    slope = float((r_c * l_c).sum() / (r_c * r_c).sum())
    intercept = float(lp.mean() - slope * risks.mean())
    return pearson, slope, intercept


@dataclass(frozen=True)
class MethodResult:
    """Input row for the comparison report: a searcher's query count plus its
    per-condition collision rates (computed by whichever evaluation fits the
    method)."""

    name: str
    queries: int
    per_condition_rates: tuple[float, ...]


def comparison_report(methods: list[MethodResult]) -> list[ComparisonRow]:
    """Assemble Table-style rows, sorted by query count."""
    rows = []
    for m in methods:
        rates = np.asarray(m.per_condition_rates, dtype=np.float64)
        if rates.size == 0 or np.any((rates < 0) | (rates > 1)):
            raise DimensionMismatchError(
                f"rates for {m.name!r} must be non-empty and within [0, 1]")
        rows.append(ComparisonRow(name=m.name, queries=m.queries,
                                  rate_mean=float(rates.mean()),
                                  rate_std=float(rates.std()),
                                  per_condition=tuple(float(r) for r in rates)))
    return sorted(rows, key=lambda row: (row.queries, row.name))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_comparison_csv(path, rows: list[ComparisonRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,queries,rate_mean,rate_std,per_condition\n")
        for r in rows:
            per = ";".join(repr(v) for v in r.per_condition)
            fh.write(f"{r.name},{r.queries},{r.rate_mean!r},{r.rate_std!r},{per}\n")


def write_correlation_csv(path, pearson: float, slope: float, intercept: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pearson,slope,intercept\n")
        fh.write(f"{pearson!r},{slope!r},{intercept!r}\n")


def write_scatter_csv(path, risks, logliks) -> None:
    """Plot-ready (risk, log_likelihood) series."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("risk,log_likelihood\n")
        for r, l in zip(risks, logliks):
            fh.write(f"{float(r)!r},{float(l)!r}\n")


def write_collision_csv(path, mean: float, std: float, per_route: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("route,rate\n")
        for name in sorted(per_route):
            fh.write(f"{name},{per_route[name]!r}\n")
        fh.write(f"MEAN,{mean!r}\n")
        fh.write(f"STD,{std!r}\n")


def write_coverage_series(path, series) -> None:
    """Plot-ready (queries, covered_modes) series."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("queries,covered\n")
        for q, c in series:
            fh.write(f"{int(q)},{int(c)}\n")
