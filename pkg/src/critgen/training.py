"""Weighted maximum likelihood training for flow models plus checkpointing.

The prior is fit by plain MLE on real-data surrogates; the generator is fit
by weighted MLE where each sample's weight combines its risk with the prior
density (weight = risk + beta * q(x)). Losses are normalized by the total
batch weight so rescaling all weights is a no-op.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointDimensionError,
    CheckpointFormatError,
    CheckpointVersionError,
    DimensionMismatchError,
    TrainingDivergenceError,
)
from .flow import (
    CouplingLayer,
    FlowConfig,
    FlowModel,
    build_flow,
    log_prob,
    log_prob_and_param_grad,
)
from .numerics import MlpSpec, RandomSource, adam_init, adam_step

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class WeightedSample:
    """One training record: scenario, condition, black-box risk, and the
    prior density at the scenario. ``weight = risk + beta * prior_density``
    clamped below at the training weight floor."""

    x: np.ndarray
    y: np.ndarray
    risk: float
    prior_density: float = 0.0
    weight: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta: float = 0.0
    weight_floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise DimensionMismatchError("epochs must be >= 0 and batch_size >= 1")
        if self.beta < 0 or self.weight_floor < 0:
            raise DimensionMismatchError("beta and weight_floor must be >= 0")


def compute_weight(x, y, risk: float, prior: FlowModel | None, beta: float,
                   weight_floor: float = 0.0) -> float:
    """WMLE sample weight: risk plus beta times the prior density at x."""
    if not (0.0 <= risk <= 1.0):
        raise DimensionMismatchError(f"risk {risk} outside [0, 1]")
    w = risk
    if beta > 0.0:
        if prior is None:
            raise DimensionMismatchError("beta > 0 requires a prior model")
        w = w + beta * float(np.exp(log_prob(prior, x)))
    return max(w, weight_floor)


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack WeightedSamples into (X, Y, w) arrays."""
    if len(samples) == 0:
        raise DimensionMismatchError("empty sample set")
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
    Y = np.stack([np.asarray(s.y, dtype=np.float64).ravel() for s in samples])
    w = np.array([s.weight for s in samples], dtype=np.float64)
    return X, Y, w


def wmle_loss(model: FlowModel, batch) -> tuple[float, np.ndarray]:
    """Weighted negative log-likelihood and its exact parameter gradient.

    loss = -(1 / sum w) * sum_i w_i log p(x_i | y_i). With uniform weights
    this is exactly the mean negative log-likelihood.
    """
    if isinstance(batch, tuple):
        X, Y, w = batch
    else:
        X, Y, w = stack_samples(batch)
    total = w.sum()
    if total <= 0:
        raise DimensionMismatchError("batch weights sum to zero")
    y_arg = Y if model.k > 0 else None
    logp, grad = log_prob_and_param_grad(model, X, y_arg, coeff=w)
    loss = -float(np.dot(w, logp)) / total
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite WMLE loss")
    return loss, -grad / total


def _run_epochs(model: FlowModel, X: np.ndarray, Y: np.ndarray, w: np.ndarray,
                config: TrainConfig, on_epoch=None) -> FlowModel:
    n = X.shape[0]
    if n < config.batch_size:
        raise DimensionMismatchError(
            f"dataset of {n} samples is smaller than batch_size {config.batch_size}"
        )
    rng = RandomSource(config.seed)
    params = np.array(model.params)
    state = adam_init(model.n_params, learning_rate=config.learning_rate)
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            current = model.with_params(params)
            try:
                loss, grad = wmle_loss(current, (X[idx], Y[idx], w[idx]))
            except TrainingDivergenceError as err:
                raise TrainingDivergenceError(
                    f"training diverged at epoch {epoch}: {err}", epoch) from err
            batch_losses.append(loss)
            params, state = adam_step(state, params, grad)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(batch_losses)),
                     time.perf_counter() - started)
    return model.with_params(params)


def train_prior(data, config: TrainConfig, flow_config: FlowConfig = FlowConfig(),
                ranges: np.ndarray | None = None, on_epoch=None) -> FlowModel:
    """Fit the unconditional prior flow by maximum likelihood."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("prior data must be a (n, d) array")
    if not np.all(np.isfinite(X)):
        raise DimensionMismatchError("prior data contains non-finite values")
    model = build_flow(X.shape[1], 0, flow_config, seed=config.seed, ranges=ranges)
    if config.epochs == 0:
        return model
    Y = np.zeros((X.shape[0], 0))
    w = np.ones(X.shape[0])
    return _run_epochs(model, X, Y, w, config, on_epoch)


def train_generator(samples, config: TrainConfig,
                    warm_start: FlowModel | None = None,
                    flow_config: FlowConfig = FlowConfig(),
                    ranges: np.ndarray | None = None, on_epoch=None) -> FlowModel:
    """Fit the conditional generator flow by weighted maximum likelihood.

    Waits on the caller to have assigned sample weights (see
    :func:`compute_weight`). With ``warm_start`` the parameters continue from
    an existing model; 0 epochs then returns it unchanged.
    """
    X, Y, w = stack_samples(samples)
    if warm_start is not None:
        if warm_start.d != X.shape[1] or warm_start.k != Y.shape[1]:
            raise DimensionMismatchError(
                f"warm start dims (d={warm_start.d}, k={warm_start.k}) do not match "
                f"samples (d={X.shape[1]}, k={Y.shape[1]})"
            )
        model = warm_start
    else:
        model = build_flow(X.shape[1], Y.shape[1], flow_config,
                           seed=config.seed, ranges=ranges)
    if config.epochs == 0:
        return model
    return _run_epochs(model, X, Y, w, config, on_epoch)


def write_metrics(path, records) -> None:
    """Write the per-epoch metrics log: epoch, loss, wall-clock seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,seconds\n")
        for epoch, loss, seconds in records:
            fh.write(f"{epoch},{loss!r},{seconds!r}\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: FlowModel, path, kind: str = "generator",
                    seed: int = 0, metadata: dict | None = None) -> None:
    """Persist a model as a JSON document.

    Floats are serialized with shortest round-trip repr, so a reload
    reproduces log_prob bit-identically.
    """
    if kind not in ("prior", "generator"):
        raise DimensionMismatchError(f"unknown checkpoint kind {kind!r}")
    first = model.layers[0]
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "d": model.d,
        "k": model.k,
        "s_max": model.s_max,
        "n_layers": len(model.layers),
        "hidden_dims": list(first.scale_spec.hidden_dims),
        "activation": first.scale_spec.activation,
        "masks": [layer.mask.tolist() for layer in model.layers],
        "params": model.params.tolist(),
        "ranges": None if model.ranges is None else model.ranges.tolist(),
        "seed": seed,
        "metadata": metadata or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> FlowModel:
    """Rebuild a FlowModel from :func:`save_checkpoint` output."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CheckpointFormatError(f"malformed checkpoint document: {err}") from err
    if not isinstance(doc, dict):
        raise CheckpointFormatError("checkpoint root must be an object")
    try:
        version = doc["format_version"]
        kind = doc["kind"]
        d = int(doc["d"])
        k = int(doc["k"])
        s_max = float(doc["s_max"])
        n_layers = int(doc["n_layers"])
        hidden_dims = tuple(int(h) for h in doc["hidden_dims"])
        activation = doc["activation"]
        masks = doc["masks"]
        params = np.asarray(doc["params"], dtype=np.float64)
        ranges = doc["ranges"]
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointFormatError(f"checkpoint missing or invalid field: {err}") from err
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(found=version, expected=CHECKPOINT_VERSION)
    if kind not in ("prior", "generator"):
        raise CheckpointFormatError(f"unknown checkpoint kind {kind!r}")
    if len(masks) != n_layers:
        raise CheckpointDimensionError(
            f"checkpoint declares {n_layers} layers but carries {len(masks)} masks"
        )
    net_spec = MlpSpec(input_dim=d + k, hidden_dims=hidden_dims,
                       output_dim=d, activation=activation)
    per_net = net_spec.param_count()
    expected = 2 * per_net * n_layers
    if params.size != expected:
        raise CheckpointDimensionError(
            f"checkpoint carries {params.size} parameters, expected {expected} "
            f"for d={d}, k={k}, {n_layers} layers"
        )
    layers = []
    cursor = 0
    for mask in masks:
        mask_arr = np.asarray(mask, dtype=np.float64)
        if mask_arr.shape != (d,):
            raise CheckpointDimensionError(
                f"mask length {mask_arr.size} does not match d={d}"
            )
        spans = ((cursor, cursor + per_net), (cursor + per_net, cursor + 2 * per_net))
        cursor += 2 * per_net
        layers.append(CouplingLayer(mask=mask_arr, scale_spec=net_spec,
                                    translate_spec=net_spec,
                                    scale_span=spans[0], translate_span=spans[1]))
    ranges_arr = None if ranges is None else np.asarray(ranges, dtype=np.float64)
    return FlowModel(d=d, k=k, layers=tuple(layers), params=params,
                     s_max=s_max, ranges=ranges_arr)
