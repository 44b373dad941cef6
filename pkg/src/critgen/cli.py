"""Command-line entry point.

Commands wire JSON run configs to the library pipelines:

    critgen train-prior --config cfg.json [--seed N] [--workers N] [--out DIR]
    critgen generate    --config cfg.json ...
    critgen evaluate    --config cfg.json ...
    critgen sample      --config cfg.json ...
    critgen gmm-demo    --config cfg.json ...

Config parsing is strict: unknown keys fail fast naming the offending
section, and referenced files must exist before any compute starts. Every
command writes into a single run directory with a manifest of file hashes;
reruns with the same config and seed reproduce all non-volatile artifacts
byte for byte (the epoch metrics log contains wall-clock timings and is
marked volatile in the manifest).

Exit codes: 0 success, 2 config error, 3 artifact mismatch, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import envs, evalharness, search
from .errors import (
    BudgetExceededError,
    CheckpointDimensionError,
    CheckpointError,
    ConfigError,
    CritgenError,
    DimensionMismatchError,
    NumericOverflowError,
    TrainingDivergenceError,
)
from .flow import FlowConfig, build_flow, log_prob, sample as flow_sample, to_physical
from .numerics import RandomSource
from .training import (
    TrainConfig,
    WeightedSample,
    compute_weight,
    load_checkpoint,
    save_checkpoint,
    train_generator,
    train_prior,
    write_metrics,
)

_LANDSCAPES = {
    "standard_four_mode": envs.standard_four_mode_landscape,
    "symmetric_four_mode": envs.symmetric_four_mode_landscape,
    "far_separated_two_mode": envs.far_separated_two_mode_landscape,
    "single_mode": envs.single_mode_landscape,
    "rare_event": envs.rare_event_landscape,
}

_SECTION_KEYS = {
    "env": {
        "kind", "landscape", "conditions", "shifts", "n_prior_samples",
        "dt", "horizon", "collision_radius", "lane_width", "approach_length",
        "ego_start_speed", "lookahead_time", "corridor_radius",
        "pos_range", "vel_range",
    },
    "flow": {"n_layers", "hidden_dims", "activation", "s_max"},
    "train": {"epochs", "batch_size", "learning_rate", "beta", "weight_floor",
              "prior_checkpoint"},
    "sampler": {"kind", "alpha", "nes_sigma", "nes_population", "gamma",
                "particles", "iterations", "retrain_every",
                "restart_percentile", "restart_patience",
                "n", "steps_per_dim", "cap", "step_size", "leapfrog_steps",
                "tau", "fd_step", "population", "learning_rate", "init_std"},
    "eval": {"generator_checkpoint", "replay", "n_per_condition", "temperature",
             "coverage_threshold", "methods", "checkpoint", "n", "condition"},
}
_TOP_KEYS = {"seed", "out", "env", "flow", "train", "sampler", "eval"}
_METHOD_KEYS = {"name", "queries", "rates", "checkpoint", "replay"}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"config {path} is not valid JSON: line {err.lineno}, "
            f"column {err.colno}: {err.msg}"
        ) from err
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    for key in cfg:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} at config top level")
    for section, allowed in _SECTION_KEYS.items():
        if section in cfg:
            body = cfg[section]
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key in body:
                if key not in allowed:
                    raise ConfigError(
                        f"unknown key {key!r} in section {section!r}")
    for entry in cfg.get("eval", {}).get("methods", []) or []:
        if not isinstance(entry, dict):
            raise ConfigError("each eval.methods entry must be an object")
        for key in entry:
            if key not in _METHOD_KEYS:
                raise ConfigError(f"unknown key {key!r} in eval.methods entry")
    return cfg


def require_section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"missing required section {name!r}")
    return cfg[name]


def _require_file(path_str: str, what: str) -> Path:
    p = Path(path_str)
    if not p.exists():
        raise ConfigError(f"{what} {p} referenced by the config does not exist")
    return p


def flow_config_from(cfg: dict) -> FlowConfig:
    sec = cfg.get("flow", {})
    return FlowConfig(
        n_layers=int(sec.get("n_layers", 6)),
        hidden_dims=tuple(sec.get("hidden_dims", (64, 64))),
        activation=sec.get("activation", "tanh"),
        s_max=float(sec.get("s_max", 2.0)),
    )


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    sec = cfg.get("train", {})
    return TrainConfig(
        epochs=int(sec.get("epochs", 60)),
        batch_size=int(sec.get("batch_size", 256)),
        learning_rate=float(sec.get("learning_rate", 1e-3)),
        beta=float(sec.get("beta", 0.0)),
        weight_floor=float(sec.get("weight_floor", 1e-4)),
        seed=seed,
    )


def intersection_config_from(env: dict) -> envs.IntersectionConfig:
    kwargs = {}
    for key in ("dt", "collision_radius", "lane_width", "approach_length",
                "ego_start_speed", "lookahead_time", "corridor_radius",
                "pos_range", "vel_range"):
        if key in env:
            kwargs[key] = float(env[key])
    if "horizon" in env:
        kwargs["horizon"] = int(env["horizon"])
    return envs.IntersectionConfig(**kwargs)


def gmm_environment_from(env: dict):
    name = env.get("landscape", "standard_four_mode")
    if name not in _LANDSCAPES:
        raise ConfigError(
            f"unknown landscape {name!r}; choose from {sorted(_LANDSCAPES)}")
    landscape = _LANDSCAPES[name]()
    conditions = [np.asarray(c, dtype=np.float64)
                  for c in env.get("conditions", [[0.0]])]
    shifts = env.get("shifts")
    if shifts is not None:
        if len(shifts) != len(conditions):
            raise ConfigError("shifts must align one-to-one with conditions")
        pairs = tuple((tuple(float(v) for v in c), tuple(float(v) for v in s))
                      for c, s in zip(conditions, shifts))
        landscape = envs.GmmLandscape(landscape.centers, landscape.stds,
                                      landscape.weights, condition_shifts=pairs)
    return landscape, conditions


def _resolve_environment(cfg: dict):
    """Returns (risk_fn, conditions dict-or-list, d, ranges, extras)."""
    env = require_section(cfg, "env")
    kind = env.get("kind")
    if kind == "gmm":
        landscape, conditions = gmm_environment_from(env)
        return (envs.gmm_risk_fn(landscape), conditions, landscape.d, None,
                {"kind": "gmm", "landscape": landscape})
    if kind == "intersection":
        sim = intersection_config_from(env)
        catalog = sim.condition_catalog()
        conditions = [catalog[name] for name in sorted(catalog)]
        return (envs.intersection_risk_fn(sim), conditions, 4,
                sim.scenario_ranges(), {"kind": "intersection", "sim": sim,
                                        "catalog": catalog})
    raise ConfigError(f"env.kind must be 'gmm' or 'intersection', got {kind!r}")


# ---------------------------------------------------------------------------
# Run directory and manifest
# ---------------------------------------------------------------------------

class RunDir:
    def __init__(self, out: Path, config_path: Path):
        self.path = Path(out)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, bool] = {}
        config_bytes = Path(config_path).read_bytes()
        (self.path / "config.json").write_bytes(config_bytes)
        self.files["config.json"] = False

    def file(self, name: str, volatile: bool = False) -> Path:
        self.files[name] = volatile
        return self.path / name

    def finalize(self) -> None:
        listing = {}
        for name in sorted(self.files):
            volatile = self.files[name]
            digest = None
            if not volatile:
                digest = hashlib.sha256((self.path / name).read_bytes()).hexdigest()
            listing[name] = {"sha256": digest, "volatile": volatile}
        with open(self.path / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump({"files": listing}, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _write_samples_csv(path, X_physical: np.ndarray, columns) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in np.atleast_2d(X_physical):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


_SCENARIO_COLUMNS = ["pos_x", "pos_y", "vel_x", "vel_y"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_prior(cfg: dict, run: RunDir, seed: int, workers: int) -> int:
    env = require_section(cfg, "env")
    if env.get("kind") != "intersection":
        raise ConfigError("train-prior requires env.kind == 'intersection'")
    sim = intersection_config_from(env)
    n_data = int(env.get("n_prior_samples", 4000))
    data = envs.synth_prior_data(RandomSource(seed).split(777), n_data, sim)
    records = []
    model = train_prior(
        data, train_config_from(cfg, seed), flow_config_from(cfg),
        ranges=sim.scenario_ranges(),
        on_epoch=lambda e, loss, secs: records.append((e, loss, secs)),
    )
    final_loss = records[-1][1] if records else None
    save_checkpoint(model, run.file("prior.json"), kind="prior", seed=seed,
                    metadata={"epochs": len(records), "final_loss": final_loss})
    write_metrics(run.file("metrics.csv", volatile=True), records)
    dump = flow_sample(model, 500, 1.0, rng=RandomSource(seed).split(778))
    _write_samples_csv(run.file("prior_samples.csv"), to_physical(model, dump),
                       _SCENARIO_COLUMNS)
    run.finalize()
    return 0


def _searcher_report(samples, ledger, every: int) -> list[search.IterationRecord]:
    records = []
    best = 0.0
    for i, s in enumerate(samples):
        best = max(best, s.risk)
        if (i + 1) % every == 0 or i + 1 == len(samples):
            window = samples[max(0, i + 1 - every):i + 1]
            mean_r = float(np.mean([w.risk for w in window]))
            records.append(search.IterationRecord(len(records), best, mean_r, i + 1))
    return records


def cmd_generate(cfg: dict, run: RunDir, seed: int, workers: int) -> int:
    risk_fn, conditions, d, ranges, extras = _resolve_environment(cfg)
    sampler_sec = require_section(cfg, "sampler")
    kind = sampler_sec.get("kind", "adaptive")
    train_cfg = train_config_from(cfg, seed)
    fcfg = flow_config_from(cfg)

    prior = None
    if train_cfg.beta > 0:
        ckpt = cfg.get("train", {}).get("prior_checkpoint")
        if not ckpt:
            raise ConfigError(
                "train.beta > 0 requires train.prior_checkpoint to be set")
        prior = load_checkpoint(_require_file(ckpt, "prior checkpoint"))

    if kind == "adaptive":
        scfg = search.SamplerConfig(
            alpha=float(sampler_sec.get("alpha", 0.3)),
            nes_sigma=float(sampler_sec.get("nes_sigma", 0.2)),
            nes_population=int(sampler_sec.get("nes_population", 8)),
            gamma=float(sampler_sec.get("gamma", 0.2)),
            particles=int(sampler_sec.get("particles", 12)),
            iterations=int(sampler_sec.get("iterations", 30)),
            retrain_every=int(sampler_sec.get("retrain_every", 5)),
            seed=seed,
            restart_percentile=float(sampler_sec.get("restart_percentile", 10.0)),
            restart_patience=int(sampler_sec.get("restart_patience", 5)),
        )
        result = search.run_adaptive_sampler(
            risk_fn, conditions, scfg, d, train_config=train_cfg,
            flow_config=fcfg, prior=prior, ranges=ranges)
        samples, generator, ledger, report = (
            result.samples, result.generator, result.ledger, result.report)
    else:
        y0 = conditions[0]
        k = len(np.asarray(y0).ravel())
        ledger = search.QueryLedger()
        if kind == "uniform":
            n = int(sampler_sec.get("n", 1000))
            samples, ledger = search.uniform_sampler(
                risk_fn, n, d, RandomSource(seed).split(1), conditions, ledger)
        elif kind == "grid":
            samples, ledger = search.grid_search(
                risk_fn, int(sampler_sec.get("steps_per_dim", 10)), d, y0,
                cap=int(sampler_sec.get("cap", 1_000_000)), ledger=ledger)
        elif kind == "hmc":
            hcfg = search.HmcConfig(
                step_size=float(sampler_sec.get("step_size", 0.05)),
                leapfrog_steps=int(sampler_sec.get("leapfrog_steps", 5)),
                tau=float(sampler_sec.get("tau", 0.1)),
                fd_step=float(sampler_sec.get("fd_step", 0.01)),
                seed=seed,
            )
            hres = search.hmc_sampler(risk_fn, int(sampler_sec.get("n", 1000)),
                                      hcfg, d, y0, ledger)
            samples = hres.samples
        elif kind == "reinforce":
            rcfg = search.ReinforceConfig(
                population=int(sampler_sec.get("population", 32)),
                learning_rate=float(sampler_sec.get("learning_rate", 0.15)),
                init_std=float(sampler_sec.get("init_std", 0.5)),
                seed=seed,
            )
            rres = search.reinforce_search(
                risk_fn, int(sampler_sec.get("iterations", 60)), rcfg, d, y0,
                ledger)
            samples = rres.samples
        else:
            raise ConfigError(f"unknown sampler kind {kind!r}")
        report = _searcher_report(samples, ledger, every=500)
        if train_cfg.epochs > 0 and len(samples) >= 2:
            if prior is not None:
                samples = [
                    WeightedSample(
                        x=s.x, y=s.y, risk=s.risk,
                        prior_density=float(np.exp(log_prob(prior, s.x))),
                        weight=compute_weight(s.x, s.y, s.risk, prior,
                                              train_cfg.beta,
                                              train_cfg.weight_floor))
                    for s in samples
                ]
            fit_cfg = replace(train_cfg,
                              batch_size=min(train_cfg.batch_size, len(samples)))
            generator = train_generator(samples, fit_cfg, flow_config=fcfg,
                                        ranges=ranges)
        else:
            generator = build_flow(d, k, fcfg, seed=seed, ranges=ranges)

    save_checkpoint(generator, run.file("generator.json"), kind="generator",
                    seed=seed, metadata={"sampler": kind,
                                         "queries": ledger.count,
                                         "breakdown": ledger.breakdown()})
    search.write_replay(run.file("replay.csv"), samples)
    search.write_run_report(run.file("report.csv"), report)
    run.finalize()
    return 0


def _method_rates(entry: dict, catalog, eval_sec: dict,
                  sim: envs.IntersectionConfig, seed: int, workers: int):
    n_per = int(eval_sec.get("n_per_condition", 500))
    temp = float(eval_sec.get("temperature", 0.2))
    if "rates" in entry:
        return tuple(float(r) for r in entry["rates"])
    if "checkpoint" in entry:
        gen = load_checkpoint(_require_file(entry["checkpoint"],
                                            f"checkpoint for {entry['name']}"))
        _, _, per_route = evalharness.collision_rate(
            gen, catalog, n_per, temp, sim, seed=seed, workers=workers)
        return tuple(per_route[name] for name in sorted(per_route))
    if "replay" in entry:
        samples = search.read_replay(_require_file(entry["replay"],
                                                   f"replay for {entry['name']}"))
        return (evalharness.collision_fraction(samples, sim),)
    raise ConfigError(
        f"eval.methods entry {entry.get('name')!r} needs rates, checkpoint, or replay")


def _checkpoint_queries(path) -> int:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return int(doc.get("metadata", {}).get("queries", 0))


def cmd_evaluate(cfg: dict, run: RunDir, seed: int, workers: int) -> int:
    env = require_section(cfg, "env")
    if env.get("kind") != "intersection":
        raise ConfigError("evaluate requires env.kind == 'intersection'")
    sim = intersection_config_from(env)
    catalog = sim.condition_catalog()
    eval_sec = require_section(cfg, "eval")
    temp = float(eval_sec.get("temperature", 0.2))
    if not (0.0 < temp <= 1.5):
        raise ConfigError(f"eval.temperature must lie in (0, 1.5], got {temp}")

    gen_path = eval_sec.get("generator_checkpoint")
    if not gen_path:
        raise ConfigError("eval.generator_checkpoint is required")
    generator = load_checkpoint(_require_file(gen_path, "generator checkpoint"))
    if generator.d != 4:
        raise CheckpointDimensionError(
            f"checkpoint dimension d={generator.d} does not match "
            f"environment dimension d=4")

    n_per = int(eval_sec.get("n_per_condition", 500))
    mean, std, per_route = evalharness.collision_rate(
        generator, catalog, n_per, temp, sim, seed=seed, workers=workers)
    evalharness.write_collision_csv(run.file("collision_rate.csv"),
                                    mean, std, per_route)

    replay_path = eval_sec.get("replay")
    if not replay_path:
        raise ConfigError("eval.replay is required for the correlation report")
    samples = search.read_replay(_require_file(replay_path, "replay file"))
    pearson, slope, intercept = evalharness.risk_loglik_correlation(
        generator, samples)
    evalharness.write_correlation_csv(run.file("correlation.csv"),
                                      pearson, slope, intercept)
    risks = [s.risk for s in samples]
    X = np.stack([s.x for s in samples])
    if generator.k > 0:
        lp = log_prob(generator, X, np.stack([s.y for s in samples]))
    else:
        lp = log_prob(generator, X)
    evalharness.write_scatter_csv(run.file("risk_loglik_scatter.csv"), risks, lp)

    methods = [evalharness.MethodResult(
        name="ours", queries=_checkpoint_queries(gen_path),
        per_condition_rates=tuple(per_route[name] for name in sorted(per_route)))]
    for entry in eval_sec.get("methods", []) or []:
        methods.append(evalharness.MethodResult(
            name=str(entry["name"]), queries=int(entry["queries"]),
            per_condition_rates=_method_rates(entry, catalog, eval_sec, sim,
                                              seed, workers)))
    rows = evalharness.comparison_report(methods)
    evalharness.write_comparison_csv(run.file("comparison.csv"), rows)
    run.finalize()
    return 0


def cmd_sample(cfg: dict, run: RunDir, seed: int, workers: int) -> int:
    eval_sec = require_section(cfg, "eval")
    ckpt = eval_sec.get("checkpoint") or eval_sec.get("generator_checkpoint")
    if not ckpt:
        raise ConfigError("eval.checkpoint is required for sample")
    model = load_checkpoint(_require_file(ckpt, "checkpoint"))
    n = int(eval_sec.get("n", 100))
    if n < 1:
        raise ConfigError("eval.n must be >= 1")
    temp = float(eval_sec.get("temperature", 1.0))
    if not (0.0 < temp <= 1.5):
        raise ConfigError(f"eval.temperature must lie in (0, 1.5], got {temp}")

    y = None
    if model.k > 0:
        cond_id = eval_sec.get("condition")
        if cond_id is None:
            raise ConfigError("conditional checkpoint requires eval.condition")
        env = require_section(cfg, "env")
        if env.get("kind") == "intersection":
            catalog = intersection_config_from(env).condition_catalog()
            if cond_id not in catalog:
                raise ConfigError(
                    f"unknown condition id {cond_id!r}; routes: {sorted(catalog)}")
            y = catalog[cond_id]
        else:
            _, conditions = gmm_environment_from(require_section(cfg, "env"))
            idx = int(cond_id)
            if not (0 <= idx < len(conditions)):
                raise ConfigError(f"condition index {idx} out of range")
            y = conditions[idx]
        if len(np.asarray(y).ravel()) != model.k:
            raise CheckpointDimensionError(
                f"checkpoint condition dimension k={model.k} does not match "
                f"condition length {len(np.asarray(y).ravel())}")

    X = flow_sample(model, n, temp, y, rng=RandomSource(seed).split(99))
    phys = to_physical(model, X)
    columns = (_SCENARIO_COLUMNS if model.d == 4
               else [f"x{i}" for i in range(model.d)])
    _write_samples_csv(run.file("samples.csv"), phys, columns)
    run.finalize()
    return 0


def cmd_gmm_demo(cfg: dict, run: RunDir, seed: int, workers: int) -> int:
    env = require_section(cfg, "env")
    if env.get("kind", "gmm") != "gmm":
        raise ConfigError("gmm-demo requires env.kind == 'gmm'")
    risk_fn, conditions, d, ranges, extras = _resolve_environment(cfg)
    landscape = extras["landscape"]
    sampler_sec = cfg.get("sampler", {})
    scfg = search.SamplerConfig(
        alpha=float(sampler_sec.get("alpha", 0.3)),
        nes_sigma=float(sampler_sec.get("nes_sigma", 0.2)),
        nes_population=int(sampler_sec.get("nes_population", 8)),
        gamma=float(sampler_sec.get("gamma", 0.2)),
        particles=int(sampler_sec.get("particles", 12)),
        iterations=int(sampler_sec.get("iterations", 30)),
        retrain_every=int(sampler_sec.get("retrain_every", 5)),
        seed=seed,
    )
    result = search.run_adaptive_sampler(
        risk_fn, conditions, scfg, d, train_config=train_config_from(cfg, seed),
        flow_config=flow_config_from(cfg))
    save_checkpoint(result.generator, run.file("generator.json"),
                    kind="generator", seed=seed,
                    metadata={"queries": result.ledger.count})
    search.write_replay(run.file("replay.csv"), result.samples)
    search.write_run_report(run.file("report.csv"), result.report)

    coverage = evalharness.mode_coverage(result.samples, landscape,
                                         y=conditions[0])
    with open(run.file("coverage.csv"), "w", encoding="utf-8") as fh:
        fh.write("mode,fraction,covered\n")
        for i, frac in enumerate(coverage.per_mode_fraction):
            fh.write(f"{i},{frac!r},{int(frac >= coverage.threshold)}\n")
        fh.write(f"TOTAL,{coverage.covered},{coverage.total}\n")

    series = []
    step = max(1, len(result.samples) // 40)
    for end in range(step, len(result.samples) + 1, step):
        cov = evalharness.mode_coverage(result.samples[:end], landscape,
                                        y=conditions[0])
        series.append((end, cov.covered))
    evalharness.write_coverage_series(run.file("coverage_over_queries.csv"), series)

    if len(result.samples) >= 30:
        try:
            pearson, slope, intercept = evalharness.risk_loglik_correlation(
                result.generator, result.samples)
            evalharness.write_correlation_csv(run.file("correlation.csv"),
                                              pearson, slope, intercept)
        except CritgenError:
            pass
    run.finalize()
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "train-prior": cmd_train_prior,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "gmm-demo": cmd_gmm_demo,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="critgen")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = args.out or cfg.get("out")
        if not out:
            raise ConfigError("set an output directory via --out or config 'out'")
        run = RunDir(Path(out), Path(args.config))
        return _COMMANDS[args.command](cfg, run, seed, args.workers)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, BudgetExceededError) as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return 3
    except (TrainingDivergenceError, NumericOverflowError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 4
    except DimensionMismatchError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
