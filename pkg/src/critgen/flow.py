"""Conditional normalizing flow built from affine coupling layers.

The same model class serves both roles in the pipeline: the unconditional
real-world prior (condition dim k=0) and the conditional scenario generator
(k>0). Coupling layers transform the unmasked half of the coordinates with
scale/shift networks fed by the masked half concatenated with the condition,
which keeps the Jacobian triangular and the log-determinant exact. Scale
outputs are squashed through tanh times ``s_max`` so inversion never
overflows.

Scenario vectors live in the normalized box [-1, 1]^d in model space; an
optional per-dimension affine range map converts to physical units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError, NumericOverflowError
from .numerics import (
    MlpSpec,
    ParamVector,
    RandomSource,
    mlp_backward_from_cache,
    mlp_forward_cached,
)

# Type conventions: a ScenarioVector is a float64 array of shape (d,), a
# ConditionVector one of shape (k,). Batched APIs accept (n, d) / (n, k).
ScenarioVector = np.ndarray
ConditionVector = np.ndarray

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FlowConfig:
    """Architecture hyperparameters for one flow model."""

    n_layers: int = 6
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    s_max: float = 2.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise DimensionMismatchError("n_layers must be >= 1")
        if self.s_max <= 0:
            raise DimensionMismatchError("s_max must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass(frozen=True)
class CouplingLayer:
    """One affine coupling step.

    ``mask`` marks the pass-through coordinates with 1. Both conditioner
    networks read ``concat(mask * x, y)`` and emit d values each; only the
    unmasked entries of those outputs are used.
    """

    mask: np.ndarray
    scale_spec: MlpSpec
    translate_spec: MlpSpec
    scale_span: tuple[int, int]
    translate_span: tuple[int, int]

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.sum() == 0 or mask.sum() == mask.size:
            raise DimensionMismatchError("coupling mask needs at least one 0 and one 1")
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class FlowModel:
    """Immutable coupling-layer stack with exact log-density.

    ``ranges`` optionally holds the physical [lo, hi] per dimension used by
    :func:`to_physical` / :func:`from_physical`; model-space computations
    never consult it.
    """

    d: int
    k: int
    layers: tuple[CouplingLayer, ...]
    params: np.ndarray
    s_max: float = 2.0
    ranges: np.ndarray | None = None

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        params.flags.writeable = False
        object.__setattr__(self, "params", params)
        if self.ranges is not None:
            ranges = np.asarray(self.ranges, dtype=np.float64)
            if ranges.shape != (self.d, 2):
                raise DimensionMismatchError(
                    f"ranges must have shape ({self.d}, 2), got {ranges.shape}"
                )
            ranges.flags.writeable = False
            object.__setattr__(self, "ranges", ranges)

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "FlowModel":
        if params.size != self.params.size:
            raise DimensionMismatchError(
                f"expected {self.params.size} params, got {params.size}"
            )
        return replace(self, params=np.array(params, dtype=np.float64))

    def param_vector(self) -> ParamVector:
        blocks = []
        for i, layer in enumerate(self.layers):
            for net, (start, stop) in (("scale", layer.scale_span),
                                       ("translate", layer.translate_span)):
                spec = layer.scale_spec if net == "scale" else layer.translate_spec
                for name, bs, be in spec.layout():
                    blocks.append((f"layer{i}.{net}.{name}", start + bs, start + be))
        return ParamVector(self.params, tuple(blocks))


def build_flow(d: int, k: int, config: FlowConfig = FlowConfig(), seed: int = 0,
               ranges: np.ndarray | None = None, zero_init: bool = False) -> FlowModel:
    """Construct a flow with alternating even/odd masks.

    The default init draws hidden-layer weights from a seeded source but
    zeroes every conditioner's output layer, so a fresh model is exactly the
    identity map (standard normal density) while still training cleanly.
    ``zero_init=True`` zeroes everything.
    """
    if d < 2:
        raise DimensionMismatchError("coupling flows need d >= 2")
    if k < 0:
        raise DimensionMismatchError("condition dim must be >= 0")
    net_spec = MlpSpec(input_dim=d + k, hidden_dims=config.hidden_dims,
                       output_dim=d, activation=config.activation)
    rng = RandomSource(seed)
    layers = []
    parts = []
    cursor = 0
    even = (np.arange(d) % 2 == 0).astype(np.float64)
    for i in range(config.n_layers):
        mask = even if i % 2 == 0 else 1.0 - even
        spans = []
        for j in range(2):
            n = net_spec.param_count()
            if zero_init:
                parts.append(np.zeros(n))
            else:
                parts.append(net_spec.init_params(rng.split(2 * i + j),
                                                  zero_last_layer=True))
            spans.append((cursor, cursor + n))
            cursor += n
        layers.append(CouplingLayer(mask=mask, scale_spec=net_spec,
                                    translate_spec=net_spec,
                                    scale_span=spans[0], translate_span=spans[1]))
    return FlowModel(d=d, k=k, layers=tuple(layers),
                     params=np.concatenate(parts), s_max=config.s_max,
                     ranges=ranges)


# ---------------------------------------------------------------------------
# Shape handling
# ---------------------------------------------------------------------------

def _as_batch(model: FlowModel, x, name: str = "x") -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.d:
        raise DimensionMismatchError(
            f"{name} has shape {np.shape(x)}, expected (..., {model.d})"
        )
    return arr, single


def _condition_batch(model: FlowModel, y, n: int) -> np.ndarray:
    if model.k == 0:
        return np.zeros((n, 0))
    if y is None:
        raise DimensionMismatchError(
            f"model is conditional (k={model.k}) but no condition was given"
        )
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size != model.k:
            raise DimensionMismatchError(
                f"condition has length {arr.size}, expected {model.k}"
            )
        return np.broadcast_to(arr, (n, model.k))
    if arr.shape != (n, model.k):
        raise DimensionMismatchError(
            f"condition batch has shape {arr.shape}, expected ({n}, {model.k})"
        )
    return arr


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _layer_nets(model: FlowModel, layer: CouplingLayer, u: np.ndarray,
                want_cache: bool):
    sp = model.params[layer.scale_span[0]:layer.scale_span[1]]
    tp = model.params[layer.translate_span[0]:layer.translate_span[1]]
    a, scale_cache = mlp_forward_cached(layer.scale_spec, sp, u)
    t, trans_cache = mlp_forward_cached(layer.translate_spec, tp, u)
    s = model.s_max * np.tanh(a / model.s_max)
    if want_cache:
        return s, t, (a, scale_cache, trans_cache)
    return s, t, None


def _forward_batch(model: FlowModel, x: np.ndarray, y: np.ndarray,
                   want_cache: bool = False):
    h = x
    log_det = np.zeros(x.shape[0])
    caches = []
    for idx, layer in enumerate(model.layers):
        m = layer.mask
        u = np.concatenate([h * m, y], axis=1)
        s, t, net_cache = _layer_nets(model, layer, u, want_cache)
        out = m * h + (1.0 - m) * (h * np.exp(s) + t)
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError(
                f"non-finite value in forward transform at layer {idx}", idx)
        log_det += ((1.0 - m) * s).sum(axis=1)
        if want_cache:
            caches.append((h, u, s, t, net_cache))
        h = out
    return h, log_det, caches


def forward_transform(model: FlowModel, x, y=None):
    """Map data to base space. Returns ``(z, log_det)``; ``log_det`` is the
    exact log |det J| of the map at ``x``."""
    xb, single = _as_batch(model, x)
    yb = _condition_batch(model, y, xb.shape[0])
    z, log_det, _ = _forward_batch(model, xb, yb)
    if single:
        return z[0], float(log_det[0])
    return z, log_det


def inverse_transform(model: FlowModel, z, y=None):
    """Exact algebraic inverse of :func:`forward_transform`."""
    zb, single = _as_batch(model, z, name="z")
    yb = _condition_batch(model, y, zb.shape[0])
    h = zb
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        m = layer.mask
        u = np.concatenate([h * m, yb], axis=1)
        s, t, _ = _layer_nets(model, layer, u, want_cache=False)
        h = m * h + (1.0 - m) * ((h - t) * np.exp(-s))
        if not np.all(np.isfinite(h)):
            raise NumericOverflowError(
                f"non-finite value in inverse transform at layer {idx}", idx)
    return h[0] if single else h


def log_prob(model: FlowModel, x, y=None):
    """Exact log-density via the change of variables through the stack."""
    xb, single = _as_batch(model, x)
    yb = _condition_batch(model, y, xb.shape[0])
    z, log_det, _ = _forward_batch(model, xb, yb)
    logp = -0.5 * (z * z).sum(axis=1) - 0.5 * model.d * LOG_2PI + log_det
    return float(logp[0]) if single else logp


def sample(model: FlowModel, n: int, temperature: float = 1.0, y=None,
           rng: RandomSource | None = None) -> np.ndarray:
    """Draw n scenarios by pushing ``temperature * eps`` through the inverse.

    Smaller temperatures concentrate samples in the high-density core of the
    learned distribution. Output is in model space and may fall outside the
    [-1, 1] box for untrained or diffuse models; clamp happens only at
    physical decoding.
    """
    if n < 1:
        raise DimensionMismatchError("n must be >= 1")
    if not (0.0 < temperature <= 1.5):
        raise DimensionMismatchError("temperature must lie in (0, 1.5]")
    if rng is None:
        rng = RandomSource(0)
    eps = rng.standard_normal(n * model.d).reshape(n, model.d)
    return inverse_transform(model, temperature * eps, y)


# ---------------------------------------------------------------------------
# Gradient of weighted log-likelihood sums
# ---------------------------------------------------------------------------

def log_prob_and_param_grad(model: FlowModel, x: np.ndarray, y, coeff: np.ndarray):
    """Per-sample log-densities plus d/dtheta of ``sum_i coeff_i * logp_i``.

    This is the backbone of weighted maximum likelihood: the caller picks the
    coefficients (sample weights times any loss scaling) and receives the
    exact reverse-mode gradient through every coupling layer including the
    log-determinant terms.
    """
    xb, _ = _as_batch(model, x)
    n = xb.shape[0]
    yb = _condition_batch(model, y, n)
    coeff = np.asarray(coeff, dtype=np.float64)
    if coeff.shape != (n,):
        raise DimensionMismatchError(f"coeff must have shape ({n},)")

    z, log_det, caches = _forward_batch(model, xb, yb, want_cache=True)
    logp = -0.5 * (z * z).sum(axis=1) - 0.5 * model.d * LOG_2PI + log_det

    grad = np.zeros_like(model.params)
    gz = coeff[:, None] * (-z)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        m = layer.mask
        h, u, s, t, (a, scale_cache, trans_cache) = caches[idx]
        exp_s = np.exp(s)
        unmasked = 1.0 - m
        # d(objective)/ds picks up the direct output path and this layer's
        # log-det contribution (coefficient per sample).
        gs = gz * unmasked * h * exp_s + coeff[:, None] * unmasked
        ga = gs * (1.0 - np.tanh(a / model.s_max) ** 2)
        gt = gz * unmasked
        sg, gu_s = mlp_backward_from_cache(layer.scale_spec, scale_cache, ga)
        tg, gu_t = mlp_backward_from_cache(layer.translate_spec, trans_cache, gt)
        grad[layer.scale_span[0]:layer.scale_span[1]] += sg
        grad[layer.translate_span[0]:layer.translate_span[1]] += tg
        gu = gu_s + gu_t
        gz = gz * (m + unmasked * exp_s) + m * gu[:, :model.d]
    return logp, grad


# ---------------------------------------------------------------------------
# Physical units
# ---------------------------------------------------------------------------

def to_physical(model: FlowModel, x) -> np.ndarray:
    """Decode model-space vectors to physical units, clamping to the box."""
    arr = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    if model.ranges is None:
        return arr
    lo = model.ranges[:, 0]
    hi = model.ranges[:, 1]
    return lo + (arr + 1.0) * 0.5 * (hi - lo)


def from_physical(model: FlowModel, p) -> np.ndarray:
    """Encode physical vectors into the [-1, 1] model box."""
    arr = np.asarray(p, dtype=np.float64)
    if model.ranges is None:
        return np.clip(arr, -1.0, 1.0)
    lo = model.ranges[:, 0]
    hi = model.ranges[:, 1]
    return np.clip(2.0 * (arr - lo) / (hi - lo) - 1.0, -1.0, 1.0)
