"""Experiment harness: dataset generation, training, evaluation and sweeps.

Every run writes four files to the output directory: ``manifest.json``
(the resolved configuration, seeds and code version -- everything needed to
reproduce the run), ``metrics.csv`` (one row per method variant, seed and
split; no timings, so re-runs are bitwise identical), ``curves.csv``
(per-epoch training curves, wall time included) and ``report.json``
(metrics plus timings, divergence counts and sweep summaries).
"""
from __future__ import annotations

import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .filters import (GaussianBelief, IMMBelief, LinearFilterModel,
                      NonlinearFilterModel, NumericalError,
                      init_particle_ensemble, run_ekf, run_imm, run_kf, run_pf)
from .neural_filter import (JumpFilterNet, TrainConfig, mf_gru_baseline,
                            run_filter, switch_agnostic_baseline, als_train,
                            train_sequence_regressor)
from .nn import config_hash, load_checkpoint, save_checkpoint
from .rng import substream
from .scenarios import Scenario, build_scenario
from .ssm import FixedInitialState, simulate_dataset
from .storage import load_trajectories, save_trajectories, write_rows_csv

METHODS = ("jmfnet", "kalmannet-agnostic", "imm", "kf", "ekf", "pf", "mf-gru")
NEURAL_METHODS = {"jmfnet", "kalmannet-agnostic", "mf-gru"}
LINEAR_SCENARIOS = {"linear2", "linear4"}
SPLITS = ("train", "val", "test")

METRIC_COLUMNS = ("scenario", "method", "variant", "seed", "split", "axis",
                  "axis_value", "mse", "mse_db", "loss_sum", "mse_q1",
                  "mse_q4", "diverged")

DESK_SCALE = {"train_size": 2000, "val_size": 500, "test_size": 500, "epochs": 20}
PAPER_SCALE = {"train_size": 40000, "val_size": 10000, "test_size": 10000, "epochs": 50}


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class RunConfig:
    """One experiment: a scenario, a method, its training hyperparameters,
    dataset sizes and the seed list. Sizes and epochs left as None resolve
    to desk-scale defaults (paper-scale with ``paper_scale=True``)."""

    scenario: str = "linear2"
    overrides: dict = field(default_factory=dict)
    method: str = "jmfnet"
    learning_rate: float = 5e-4
    batch_size: int = 16
    epochs: int | None = None
    clip_norm: float = 2.5
    segment_length: int | None = None
    train_size: int | None = None
    val_size: int | None = None
    test_size: int | None = None
    seeds: tuple = (0,)
    dataset_seed: int = 0
    out_dir: str = "runs/out"
    paper_scale: bool = False
    test_only: bool = False
    workers: int = 1
    pf_particles: int = 1000
    state_init: str = "truth"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.overrides = dict(self.overrides)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.scenario not in _scenario_names():
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.method == "kf" and self.scenario not in LINEAR_SCENARIOS:
            raise ConfigError("kf applies only to linear scenarios "
                              f"{sorted(LINEAR_SCENARIOS)}, not {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        for name in ("train_size", "val_size", "test_size", "epochs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_size < 1 or self.workers < 1 or self.pf_particles < 1:
            raise ConfigError("batch_size, workers and pf_particles must be >= 1")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate and clip_norm must be positive")
        if self.state_init not in ("truth", "zero", "noisy"):
            raise ConfigError("state_init must be truth, zero or noisy")

    @classmethod
    def from_dict(cls, blob: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(blob) - known - {"sweep_axis", "sweep_values", "m_q_values"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in blob.items() if k in known}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self, name: str) -> int:
        value = getattr(self, name)
        if value is not None:
            return value
        return (PAPER_SCALE if self.paper_scale else DESK_SCALE)[name]

    def train_config(self, scenario: Scenario) -> TrainConfig:
        segment = self.segment_length
        if segment is None:
            segment = scenario.segment_length
        return TrainConfig(epochs=self.resolved("epochs"),
                           batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           clip_norm=self.clip_norm,
                           segment_length=segment,
                           state_init=self.state_init)

    def echo(self) -> dict:
        """Fully resolved configuration; the manifest's reproducibility key."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("train_size", "val_size", "test_size", "epochs"):
            out[name] = self.resolved(name)
        out["seeds"] = list(self.seeds)
        return out


def _scenario_names():
    from .scenarios import SCENARIOS
    return SCENARIOS


def load_config(path: str | None, cli: dict) -> RunConfig:
    """Config file merged with CLI overrides (CLI wins)."""
    blob = {}
    if path is not None:
        try:
            blob = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(blob, dict):
            raise ConfigError("config file must hold a JSON object")
    merged = dict(blob)
    if cli.get("seed") is not None:
        merged["seeds"] = [cli["seed"]]
    if cli.get("out") is not None:
        merged["out_dir"] = cli["out"]
    if cli.get("paper_scale"):
        merged["paper_scale"] = True
    if cli.get("test_only"):
        merged["test_only"] = True
    if cli.get("workers") is not None:
        merged["workers"] = cli["workers"]
    config = RunConfig.from_dict(merged)
    config._sweep_axis = blob.get("sweep_axis")
    config._sweep_values = blob.get("sweep_values")
    config._m_q_values = blob.get("m_q_values")
    return config


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _scenario_for(config: RunConfig) -> Scenario:
    try:
        return build_scenario(config.scenario, config.overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario overrides: {exc}") from None


def dataset_paths(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    return {split: out / f"{split}.bin" for split in SPLITS}


def generate_datasets(config: RunConfig) -> dict:
    """Simulate and persist the three splits; each split draws from its own
    named seed stream so test data is disjoint from training data by
    construction. Deterministic in the config."""
    scenario = _scenario_for(config)
    paths = dataset_paths(config)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        rng = substream(config.dataset_seed, "dataset", config.scenario, split)
        size = config.resolved(f"{split}_size")
        data = simulate_dataset(scenario.system, scenario.horizon, size, rng)
        save_trajectories(paths[split], data, num_modes=scenario.num_modes)
    return paths


def _load_split(config: RunConfig, split: str):
    path = dataset_paths(config)[split]
    if not path.exists():
        generate_datasets(config)
    data, _ = load_trajectories(path)
    return data


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def checkpoint_path(config: RunConfig, seed: int) -> Path:
    return Path(config.out_dir) / f"ckpt_{config.method}_{seed}.npz"


def _build_net(config: RunConfig, scenario: Scenario, seed: int):
    rng = substream(seed, "init", config.method, config.scenario)
    s, o, M = scenario.state_dim, scenario.obs_dim, scenario.num_modes
    if config.method == "jmfnet":
        return JumpFilterNet.build(s, o, M, rng)
    if config.method == "kalmannet-agnostic":
        return switch_agnostic_baseline(s, o, rng)
    if config.method == "mf-gru":
        return mf_gru_baseline(o, s, rng)
    raise ConfigError(f"method {config.method!r} has nothing to train")


def _train_one(config_blob: dict, seed: int) -> dict:
    """Train one seed and write its checkpoint; runs in a worker process."""
    config = RunConfig.from_dict(config_blob)
    scenario = _scenario_for(config)
    train_set = _load_split(config, "train")
    val_set = _load_split(config, "val")
    net = _build_net(config, scenario, seed)
    tc = config.train_config(scenario)
    rng = substream(seed, "train", config.method, config.scenario)
    start = time.perf_counter()
    if config.method == "mf-gru":
        result = train_sequence_regressor(net, train_set, val_set, tc, rng)
    else:
        models = scenario.filter_models[:net.num_modes]
        result = als_train(net, models, train_set, val_set, tc, rng)
    wall = time.perf_counter() - start
    save_checkpoint(checkpoint_path(config, seed), net.params(), net.config())
    return {"seed": seed, "curves": result.curves, "best_val": result.best_val,
            "best_epoch": result.best_epoch, "wall_time_s": wall,
            "diagnostics": result.diagnostics}


def train_all_seeds(config: RunConfig) -> list[dict]:
    """One training job per seed over a bounded worker pool (serial when
    ``workers`` is 1); jobs share only the on-disk datasets. Results are
    merged in seed order, so the pool size never changes the outputs."""
    if config.method not in NEURAL_METHODS:
        raise ConfigError(f"method {config.method!r} has nothing to train")
    for split in ("train", "val"):
        _load_split(config, split)  # materialize before forking workers
    blob = config.echo()
    if config.workers == 1 or len(config.seeds) == 1:
        results = [_train_one(blob, seed) for seed in config.seeds]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_train_one, blob, seed) for seed in config.seeds]
            results = [f.result() for f in futures]
    return sorted(results, key=lambda r: r["seed"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _identity_cov_models(models):
    out = []
    for model in models:
        eye_s = np.eye(model.state_dim)
        eye_o = np.eye(model.obs_dim)
        if isinstance(model, LinearFilterModel):
            out.append(LinearFilterModel(model.F, model.H, eye_s, eye_o))
        else:
            out.append(NonlinearFilterModel(model.f, model.h, model.f_jacobian,
                                            model.h_jacobian, eye_s, eye_o))
    return out


def _classical_estimates(config: RunConfig, scenario: Scenario, models,
                         data, rng=None):
    """(N, T, s) estimates plus a per-trajectory divergence mask."""
    N = len(data)
    T, s = scenario.horizon, scenario.state_dim
    est = np.full((N, T, s), np.nan)
    diverged = np.zeros(N, dtype=bool)
    Pi = scenario.transition
    mu0 = scenario.initial_mode_probs
    for i, tr in enumerate(data):
        try:
            if config.method == "kf":
                belief = GaussianBelief(tr.x0, np.eye(s))
                est[i] = run_kf(models[0], tr.observations, belief)[0]
            elif config.method == "ekf":
                belief = GaussianBelief(tr.x0, np.eye(s))
                est[i] = run_ekf(models[0], tr.observations, belief)[0]
            elif config.method == "imm":
                belief = IMMBelief([GaussianBelief(tr.x0.copy(), np.eye(s))
                                    for _ in models], mu0.copy())
                est[i] = run_imm(models, Pi, tr.observations, belief)[0]
            elif config.method == "pf":
                ensemble = init_particle_ensemble(
                    config.pf_particles, FixedInitialState(tr.x0), mu0, rng)
                est[i] = run_pf(models, Pi, tr.observations, ensemble, rng)[0]
        except NumericalError:
            diverged[i] = True
    bad = ~np.isfinite(est).all(axis=(1, 2))
    diverged |= bad
    est[bad] = np.nan
    return est, diverged


def _stack_split(data):
    X = np.stack([tr.states for tr in data])
    Y = np.stack([tr.observations for tr in data])
    x0 = np.stack([tr.x0 for tr in data])
    return X, Y, x0


def _mse_metrics(X, est, diverged):
    """Aggregate per-component MSE, the summed-error objective, and the
    first/last-quarter MSEs, over non-diverged trajectories."""
    healthy = ~diverged
    n_div = int(diverged.sum())
    if not healthy.any():
        return {"mse": None, "mse_db": None, "loss_sum": None,
                "mse_q1": None, "mse_q4": None, "diverged": n_div}
    err = (X[healthy] - est[healthy]) ** 2
    T = X.shape[1]
    q = max(T // 4, 1)
    mse = float(err.mean())
    out = {
        "mse": mse,
        "mse_db": float(10.0 * np.log10(mse)) if mse > 0 else None,
        "loss_sum": float(err.sum(axis=(1, 2)).mean()),
        "mse_q1": float(err[:, :q].mean()),
        "mse_q4": float(err[:, T - q:].mean()),
        "diverged": n_div,
    }
    return out


def _row(config, variant, seed, split, metrics, axis=None, axis_value=None):
    row = {"scenario": config.scenario, "method": config.method,
           "variant": variant, "seed": "" if seed is None else seed,
           "split": split, "axis": "" if axis is None else axis,
           "axis_value": "" if axis_value is None else axis_value}
    row.update(metrics)
    return row


def _eval_splits(config: RunConfig, test_only_ok: bool):
    if config.test_only and test_only_ok:
        return ("test",)
    return SPLITS


def _load_net(config: RunConfig, scenario: Scenario, seed: int):
    path = checkpoint_path(config, seed)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run train first)")
    params, cfg, _, _ = load_checkpoint(path)
    if config.method == "mf-gru":
        if (cfg["obs_dim"], cfg["state_dim"]) != (scenario.obs_dim, scenario.state_dim):
            raise ConfigError(
                f"checkpoint dims (o={cfg['obs_dim']}, s={cfg['state_dim']}) do not "
                f"match scenario {config.scenario!r}")
        net = mf_gru_baseline(scenario.obs_dim, scenario.state_dim,
                              substream(seed, "load"))
        net.obs_mean = np.array(cfg["obs_mean"])
        net.obs_scale = np.array(cfg["obs_scale"])
        net.state_mean = np.array(cfg["state_mean"])
        net.state_scale = np.array(cfg["state_scale"])
    else:
        if (cfg["state_dim"], cfg["obs_dim"]) != (scenario.state_dim, scenario.obs_dim):
            raise ConfigError(
                f"checkpoint dims (s={cfg['state_dim']}, o={cfg['obs_dim']}) do not "
                f"match scenario {config.scenario!r}")
        expected_modes = scenario.num_modes if config.method == "jmfnet" else 1
        if cfg["num_modes"] != expected_modes:
            raise ConfigError(
                f"checkpoint has {cfg['num_modes']} modes, expected {expected_modes}")
        net = _build_net(config, scenario, seed)
        if cfg.get("with_mode_net"):
            net.set_normalization(np.array(cfg["obs_mean"]), np.array(cfg["obs_scale"]))
    try:
        net.set_params(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not fit the architecture: {exc}") from None
    return net


def _neural_estimates(config: RunConfig, scenario: Scenario, net, data):
    X, Y, x0 = _stack_split(data)
    if config.method == "mf-gru":
        est, _ = net.forward(Y)
        diverged = ~np.isfinite(est).all(axis=(1, 2))
        est = est.copy()
        est[diverged] = np.nan
        return X, est, diverged
    models = scenario.filter_models[:net.num_modes]
    run = run_filter(net, models, Y, x0=x0)
    return X, run.estimates, run.diverged.copy()


def evaluate(config: RunConfig, axis=None, axis_value=None) -> list[dict]:
    """Metric rows for the configured method plus the observation-as-estimate
    baseline. Classical methods contribute an oracle row (true covariances)
    and an agnostic row (identity covariances); kf and ekf run their
    single-model filter on the first mode's model."""
    scenario = _scenario_for(config)
    rows = []
    splits_classical = _eval_splits(config, test_only_ok=True)
    data = {split: _load_split(config, split) for split in SPLITS}

    for split in splits_classical:
        X, Y, _ = _stack_split(data[split])
        lifted = np.stack([scenario.observation_lift(Y[i]) for i in range(len(Y))])
        rows.append(_row(config, "observation", None, split,
                         _mse_metrics(X, lifted, np.zeros(len(X), dtype=bool)),
                         axis, axis_value))

    if config.method in NEURAL_METHODS:
        for seed in config.seeds:
            net = _load_net(config, scenario, seed)
            for split in SPLITS:
                X, est, diverged = _neural_estimates(config, scenario, net,
                                                     data[split])
                rows.append(_row(config, "learned", seed, split,
                                 _mse_metrics(X, est, diverged), axis, axis_value))
    else:
        variants = [("oracle", scenario.filter_models),
                    ("agnostic", _identity_cov_models(scenario.filter_models))]
        for variant, models in variants:
            for split in splits_classical:
                X = _stack_split(data[split])[0]
                if config.method == "pf":
                    for seed in config.seeds:
                        rng = substream(seed, "pf", config.scenario, split, variant)
                        est, diverged = _classical_estimates(
                            config, scenario, models, data[split], rng)
                        rows.append(_row(config, variant, seed, split,
                                         _mse_metrics(X, est, diverged),
                                         axis, axis_value))
                else:
                    est, diverged = _classical_estimates(config, scenario,
                                                         models, data[split])
                    rows.append(_row(config, variant, None, split,
                                     _mse_metrics(X, est, diverged),
                                     axis, axis_value))
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_SPLIT_ORDER = {"train": 0, "val": 1, "test": 2}


def _sort_rows(rows):
    return sorted(rows, key=lambda r: (r["method"], r["variant"],
                                       str(r["axis"]), str(r["axis_value"]),
                                       str(r["seed"]),
                                       _SPLIT_ORDER.get(r["split"], 9)))


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        # Builtin-float repr: full precision, no numpy scalar wrapper.
        return repr(float(value))
    return value


def write_metrics(out_dir, rows):
    rows = _sort_rows(rows)
    formatted = [{k: _format_cell(row.get(k)) for k in METRIC_COLUMNS}
                 for row in rows]
    write_rows_csv(Path(out_dir) / "metrics.csv", METRIC_COLUMNS, formatted)
    return rows


def write_curves(out_dir, train_results, method):
    rows = []
    for result in train_results:
        for rec in result["curves"]:
            rows.append({"method": method, "seed": result["seed"], **rec})
    write_rows_csv(Path(out_dir) / "curves.csv",
                   ("method", "seed", "epoch", "phase", "train_loss",
                    "val_loss", "val_diverged", "skipped", "wall_time_s"),
                   rows)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(config: RunConfig, command: str, extra=None):
    echo = config.echo()
    manifest = {
        "command": command,
        "config": echo,
        "config_hash": config_hash(_jsonable(echo)),
        "package_version": __version__,
        "code_version": _git_describe(),
    }
    if extra:
        manifest.update(extra)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    path = Path(config.out_dir) / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    return manifest


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _covar(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(100.0 * values.std(ddof=1) / values.mean())


def build_report(config: RunConfig, command: str, rows, timings=None,
                 sweep=None) -> dict:
    """Assemble report.json content: metric rows plus per-seed test MSE,
    CoVar across seeds (two or more), timings and divergence counts."""
    rows = _sort_rows(rows)
    per_seed = {}
    divergence = {}
    for row in rows:
        key = f"{row['method']}/{row['variant']}"
        divergence[key] = divergence.get(key, 0) + (row.get("diverged") or 0)
        if row["split"] == "test" and row["seed"] != "" and row.get("mse") is not None:
            per_seed.setdefault(key, {})[str(row["seed"])] = row["mse"]
    report = {
        "command": command,
        "scenario": config.scenario,
        "config": config.echo(),
        "rows": rows,
        "per_seed_test_mse": per_seed,
        "divergence_counts": divergence,
    }
    for key, seeds in per_seed.items():
        if len(seeds) >= 2:
            report.setdefault("covar_pct", {})[key] = _covar(list(seeds.values()))
    if timings:
        report["timings_s"] = timings
    if sweep:
        report["sweep"] = sweep
    return report


def write_report(config: RunConfig, report: dict):
    path = Path(config.out_dir) / "report.json"
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig) -> dict:
    start = time.perf_counter()
    paths = generate_datasets(config)
    manifest = write_manifest(config, "generate",
                              {"datasets": {k: str(v) for k, v in paths.items()}})
    report = {"command": "generate", "config": config.echo(),
              "datasets": {k: str(v) for k, v in paths.items()},
              "timings_s": {"generate": time.perf_counter() - start}}
    write_report(config, report)
    return manifest


def cmd_train(config: RunConfig) -> list[dict]:
    start = time.perf_counter()
    results = train_all_seeds(config)
    write_curves(config.out_dir, results, config.method)
    write_manifest(config, "train")
    report = {
        "command": "train", "config": config.echo(),
        "per_seed": [{k: r[k] for k in ("seed", "best_val", "best_epoch",
                                        "wall_time_s", "diagnostics")}
                     for r in results],
        "timings_s": {"train_total": time.perf_counter() - start},
    }
    write_report(config, report)
    return results


def cmd_eval(config: RunConfig) -> dict:
    start = time.perf_counter()
    rows = evaluate(config)
    write_metrics(config.out_dir, rows)
    write_manifest(config, "eval")
    report = build_report(config, "eval", rows,
                          timings={"eval": time.perf_counter() - start})
    write_report(config, report)
    return report


def run_experiment(config: RunConfig) -> dict:
    """generate + train (when the method learns) + eval, in one call."""
    generate_datasets(config)
    results = None
    if config.method in NEURAL_METHODS:
        results = train_all_seeds(config)
        write_curves(config.out_dir, results, config.method)
    rows = evaluate(config)
    write_metrics(config.out_dir, rows)
    write_manifest(config, "experiment")
    report = build_report(config, "experiment", rows)
    if results:
        report["per_seed"] = [{k: r[k] for k in ("seed", "best_val", "best_epoch",
                                                 "wall_time_s")}
                              for r in results]
    write_report(config, report)
    return report


_SWEEP_AXES = ("seed", "lr", "batch", "clip")


def _sweep_config(config: RunConfig, axis: str, value) -> RunConfig:
    base = {f.name: getattr(config, f.name) for f in fields(RunConfig)}
    if axis == "seed":
        base["seeds"] = (int(value),)
    else:
        base["seeds"] = (config.seeds[0],)
        if axis == "lr":
            base["learning_rate"] = float(value)
        elif axis == "batch":
            base["batch_size"] = int(value)
        elif axis == "clip":
            base["clip_norm"] = float(value)
    base["out_dir"] = str(Path(config.out_dir) / f"{axis}_{value}")
    return RunConfig(**base)


def cmd_sensitivity(config: RunConfig, axis: str, values) -> dict:
    """Train once per sweep value, report test MSE per value and the CoVar
    across the axis."""
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {_SWEEP_AXES}, got {axis!r}")
    values = list(values or [])
    if len(values) < 2:
        raise ConfigError("sensitivity sweep needs at least two values; "
                          "CoVar is undefined for a single point")
    if config.method not in NEURAL_METHODS and not (
            config.method == "pf" and axis == "seed"):
        raise ConfigError(f"axis {axis!r} does not affect method {config.method!r}")
    start = time.perf_counter()
    all_rows = []
    point_mse = {}
    for value in values:
        sub = _sweep_config(config, axis, value)
        generate_datasets(sub)
        if sub.method in NEURAL_METHODS:
            train_all_seeds(sub)
        rows = evaluate(sub, axis=axis, axis_value=value)
        all_rows.extend(rows)
        for row in rows:
            if (row["split"] == "test" and row["variant"] in ("learned", "oracle")
                    and row.get("mse") is not None):
                point_mse[str(value)] = row["mse"]
    write_metrics(config.out_dir, all_rows)
    write_manifest(config, "sensitivity",
                   {"sweep": {"axis": axis, "values": values}})
    mses = list(point_mse.values())
    sweep = {"axis": axis, "values": values, "test_mse": point_mse,
             "covar_pct": _covar(mses) if len(mses) >= 2 else None}
    report = build_report(config, "sensitivity", all_rows,
                          timings={"total": time.perf_counter() - start},
                          sweep=sweep)
    write_report(config, report)
    return report


def cmd_mismatch(config: RunConfig, m_q_values=None) -> dict:
    """Quadratic-scenario mismatch sweep: the generative data is shared (the
    bias affects only the filter-visible models), one train+eval per m_q."""
    if config.scenario != "quadratic":
        raise ConfigError("mismatch sweeps apply to the quadratic scenario only")
    values = [0.0, 0.1, 0.2] if m_q_values is None else [float(v) for v in m_q_values]
    if not values:
        raise ConfigError("m_q list must be nonempty")
    start = time.perf_counter()
    all_rows = []
    table = {}
    for m_q in values:
        base = {f.name: getattr(config, f.name) for f in fields(RunConfig)}
        base["overrides"] = {**config.overrides, "m_q": m_q}
        base["out_dir"] = str(Path(config.out_dir) / f"m_q_{m_q}")
        sub = RunConfig(**base)
        generate_datasets(sub)
        if sub.method in NEURAL_METHODS:
            train_all_seeds(sub)
        rows = evaluate(sub, axis="m_q", axis_value=m_q)
        all_rows.extend(rows)
        test_vals = [row["mse"] for row in rows
                     if row["split"] == "test" and row.get("mse") is not None
                     and row["variant"] not in ("observation",)]
        table[str(m_q)] = float(np.mean(test_vals)) if test_vals else None
    write_metrics(config.out_dir, all_rows)
    write_manifest(config, "mismatch", {"m_q_values": values})
    report = build_report(config, "mismatch", all_rows,
                          timings={"total": time.perf_counter() - start},
                          sweep={"axis": "m_q", "values": values,
                                 "test_mse": table})
    write_report(config, report)
    return report
