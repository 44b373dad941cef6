"""Dense feed-forward networks with hand-derived gradients, Adam, and a
counter-based deterministic random source.

Everything here is pure: functions never mutate their inputs and return
updated copies instead. ``RandomSource`` is the one stateful object and is
meant to be owned by a single caller; parallel work derives children via
:meth:`RandomSource.split`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError, TrainingDivergenceError

_ACTIVATIONS = ("tanh", "relu")


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamVector:
    """A flat float64 parameter vector plus a named block layout.

    ``layout`` maps block names to ``(start, stop)`` index ranges. Ranges
    must be disjoint and cover ``[0, len(values))`` exactly.
    """

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        spans = sorted((start, stop) for _, start, stop in self.layout)
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop < start:
                raise DimensionMismatchError(
                    f"param layout ranges must be disjoint and cover [0, {values.size}); "
                    f"gap or overlap at index {cursor}"
                )
            cursor = stop
        if cursor != values.size:
            raise DimensionMismatchError(
                f"param layout covers [0, {cursor}) but values have length {values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        for block_name, start, stop in self.layout:
            if block_name == name:
                return self.values[start:stop]
        raise KeyError(name)


def _flat_values(params) -> np.ndarray:
    if isinstance(params, ParamVector):
        return params.values
    return np.asarray(params, dtype=np.float64)


# ---------------------------------------------------------------------------
# MLP specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Shape description of a fully connected network.

    Hidden layers apply the configured activation; the output layer is
    affine. Parameters are stored flat as ``w0, b0, w1, b1, ...`` with each
    weight matrix flattened row-major, rows indexing output units.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise DimensionMismatchError("input_dim and output_dim must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise DimensionMismatchError("hidden dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise DimensionMismatchError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, input to output order."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())

    def layout(self) -> tuple[tuple[str, int, int], ...]:
        blocks = []
        cursor = 0
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes()):
            blocks.append((f"w{i}", cursor, cursor + fan_in * fan_out))
            cursor += fan_in * fan_out
            blocks.append((f"b{i}", cursor, cursor + fan_out))
            cursor += fan_out
        return tuple(blocks)

    def init_params(self, rng: "RandomSource", scale: float = 1.0,
                    zero_last_layer: bool = False) -> np.ndarray:
        """Scaled Glorot-style init; optionally zero the output layer so the
        network starts as the constant-zero map while hidden features stay
        diverse."""
        shapes = self.layer_shapes()
        parts = []
        for i, (fan_in, fan_out) in enumerate(shapes):
            if zero_last_layer and i == len(shapes) - 1:
                parts.append(np.zeros(fan_in * fan_out + fan_out))
                continue
            bound = scale * np.sqrt(2.0 / (fan_in + fan_out))
            w = rng.standard_normal(fan_in * fan_out) * bound
            parts.append(np.concatenate([w, np.zeros(fan_out)]))
        return np.concatenate(parts)


def _unpack(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if flat.size != spec.param_count():
        raise DimensionMismatchError(
            f"expected {spec.param_count()} parameters, got {flat.size}"
        )
    layers = []
    cursor = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = flat[cursor:cursor + fan_in * fan_out].reshape(fan_out, fan_in)
        cursor += fan_in * fan_out
        b = flat[cursor:cursor + fan_out]
        cursor += fan_out
        layers.append((w, b))
    return layers


def _activate(spec: MlpSpec, pre: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _activate_grad(spec: MlpSpec, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return 1.0 - post * post
    return (pre > 0.0).astype(np.float64)


def mlp_forward_cached(spec: MlpSpec, params, x: np.ndarray):
    """Forward pass over a batch, returning the output and the activation
    cache needed by :func:`mlp_backward_from_cache`.

    ``x`` has shape ``(batch, input_dim)``.
    """
    flat = _flat_values(params)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"input has shape {x.shape}, expected (batch, {spec.input_dim})"
        )
    layers = _unpack(spec, flat)
    acts = [x]
    pres = []
    h = x
    for i, (w, b) in enumerate(layers):
        pre = h @ w.T + b
        pres.append(pre)
        h = _activate(spec, pre) if i < len(layers) - 1 else pre
        acts.append(h)
    return h, (layers, acts, pres)


def mlp_backward_from_cache(spec: MlpSpec, cache, output_grad: np.ndarray):
    """Reverse-mode pass from a forward cache.

    Returns ``(param_grad, input_grad)`` where ``param_grad`` is flat and
    summed over the batch and ``input_grad`` matches the input shape.
    """
    layers, acts, pres = cache
    grads = [None] * len(layers)
    g = output_grad
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * _activate_grad(spec, pres[i], acts[i + 1])
        gw = g.T @ acts[i]
        gb = g.sum(axis=0)
        grads[i] = (gw, gb)
        g = g @ w
    flat_grad = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat_grad, g


def mlp_forward(spec: MlpSpec, params, x) -> np.ndarray:
    """Evaluate the network on one input vector (or a batch of them)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = mlp_forward_cached(spec, params, x[None, :] if single else x)
    return out[0] if single else out


def mlp_backward(spec: MlpSpec, params, x, output_grad):
    """Exact reverse-mode gradients of the forward map contracted with
    ``output_grad``. Returns ``(param_grad, input_grad)``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    gb = g[None, :] if single else g
    if gb.shape != (xb.shape[0], spec.output_dim):
        raise DimensionMismatchError(
            f"output_grad has shape {g.shape}, expected output dim {spec.output_dim}"
        )
    _, cache = mlp_forward_cached(spec, params, xb)
    param_grad, input_grad = mlp_backward_from_cache(spec, cache, gb)
    return param_grad, (input_grad[0] if single else input_grad)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(n_params: int, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=np.zeros(n_params),
        second_moment=np.zeros(n_params),
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One Adam update with bias correction. Returns ``(params, state)``."""
    params = _flat_values(params)
    grad = _flat_values(grad)
    if params.size != grad.size or params.size != state.first_moment.size:
        raise DimensionMismatchError(
            f"param/grad/moment lengths differ: {params.size}, {grad.size}, "
            f"{state.first_moment.size}"
        )
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite gradient entries in adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


# ---------------------------------------------------------------------------
# Counter-based random source
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(v: np.ndarray) -> np.ndarray:
    z = v.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class RandomSource:
    """Deterministic stream of uniforms and normals keyed by (seed, counter).

    Draw k is a pure function of the seed and k (SplitMix64 finalizer over a
    Weyl sequence), so identical seeds reproduce identical sequences across
    runs and platforms. Normals come from Box-Muller on consecutive uniform
    pairs. Not safe to share across concurrent tasks; use :meth:`split`.
    """

    def __init__(self, seed: int, _counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = int(_counter)

    def _next_words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n i.i.d. draws from U[low, high); the raw stream lies in (0, 1]."""
        u = (self._next_words(n) >> np.uint64(11)).astype(np.float64)
        u = (u + 1.0) * 2.0 ** -53
        return low + (high - low) * u

    def standard_normal(self, n: int) -> np.ndarray:
        # Box-Muller over consecutive counter pairs, so draws depend only on
        # the counter offset (chunked draws of even sizes match one big draw).
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u[1::2])
        z[1::2] = r * np.sin(2.0 * np.pi * u[1::2])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n draws from {0, ..., high-1} (multiply-shift, slight bias < 2^-53)."""
        u = self.uniform(n)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def split(self, index: int) -> "RandomSource":
        """Derive an independent child stream; children of distinct indices
        (and of distinct parents) do not overlap in practice."""
        with np.errstate(over="ignore"):
            key = _mix64(np.array(
                [np.uint64(self.seed) ^ _mix64(np.array([index + 1], dtype=np.uint64))[0]],
                dtype=np.uint64,
            ))[0]
        return RandomSource(int(key))


def draw_standard_gaussian(rng: RandomSource, n: int) -> np.ndarray:
    """n i.i.d. standard normal draws from the caller-owned source."""
    if n < 1:
        raise DimensionMismatchError("n must be >= 1")
    return rng.standard_normal(n)
