"""Command-line pipeline driver.

Subcommands wire configs to the library: ``kernel`` precomputes and exports
the convolution-kernel tables, ``bridge`` writes endpoint-steering
trajectories, ``flow`` runs a full distribution-steering pipeline (couple,
train if needed, roll out, measure), ``train`` stops after the training
stage, ``simulate`` rolls out a configured controller, and ``metrics``
compares saved ensembles.

Every run writes into a stamped directory: the stamp is a hash of the fully
resolved config and command, so identical inputs land in identical places
with byte-identical files, and nothing depends on wall-clock time.  Failures
leave an ``error.json`` record and map to stable exit codes:

    0  success
    2  configuration problem (also used by argparse itself)
    3  ensemble not averaged-controllable / Gramian singular
    4  training divergence
    5  metric gate failed under --strict
    1  anything else
"""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from .bridge import (
    EndpointPair,
    bridge_ensemble,
    deterministic_trajectory,
    export_trajectory_csv,
)
from .coupling import export_plan_csv, ot_assignment, product_plan, teacher_controls
from .distributions import (
    GaussianMixture,
    point_mass,
    product_pairs,
    ring_mixture,
    sample,
    single_gaussian,
)
from .errors import (
    ConfigError,
    NearTerminalSingularityError,
    NotAveragedControllableError,
    TrainingDivergenceError,
)
from .kernel import (
    TimeGrid,
    build_kernel_table,
    build_theta_ensemble,
    export_kernel_csv,
    load_theta_table,
)
from .learn import (
    TrainConfig,
    flatten_endpoint_dataset,
    load_model,
    save_model,
    sequence_dataset,
    train_feedforward,
    train_gain,
    train_recurrent,
)
from .sim import (
    DeterministicExactController,
    FeedforwardController,
    GainController,
    PosteriorExactController,
    RecurrentController,
    TeacherController,
    VolterraExactController,
    compare_laws,
    energy_distance_null,
    export_metrics,
    rollout_deterministic,
    rollout_stochastic,
    write_manifest,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTROLLABILITY = 3
EXIT_DIVERGENCE = 4
EXIT_METRIC_GATE = 5

_FAMILIES = ("ou2d", "antidamped2d", "constant")
_DET_CONTROLLERS = ("teacher", "learned-ffn", "gain-model", "deterministic-exact")
_STO_CONTROLLERS = ("posterior-exact", "learned-rnn", "volterra-exact")
_MODELS = ("feedforward", "recurrent", "gain")


class MetricGateError(RuntimeError):
    """Raised when --strict metric checks fail; maps to exit code 5."""


_TRAIN_DEFAULTS = {
    "epochs": 40,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "late_learning_rate": None,
    "hidden_size": 64,
    "val_fraction": 0.1,
    "seed": None,
}

_METRIC_DEFAULTS = {
    "n_permutations": 200,
    "n_projections": 128,
    "max_energy_distance": None,
}

_DEFAULTS = {
    "family": "ou2d",
    "theta_table": None,
    "n_theta": 64,
    "a": None,
    "b": None,
    "t_f": 1.0,
    "n_steps": 1000,
    "epsilon": 0.5,
    "epsilons": [0.0, 0.5, 1.0],
    "x0": [1.0, 0.0],
    "xf": [1.0, 1.0],
    "bridge_paths": 8,
    "mu0": {"type": "gaussian", "mean": [1.0, 0.0], "cov": 0.01},
    "muf": {"type": "gaussian", "mean": [1.0, 1.0], "cov": 0.04},
    "coupling": "ot",
    "controller": "posterior-exact",
    "n_samples": 256,
    "model": None,
    "checkpoint": None,
    "left": None,
    "right": None,
    "train": _TRAIN_DEFAULTS,
    "metric": _METRIC_DEFAULTS,
    "seed": 0,
    "out_dir": None,
}

_PRESETS = {
    "desk": {"n_steps": 200, "n_samples": 256, "train": {"epochs": 40}},
    "paper": {"n_steps": 1000, "n_samples": 1000, "train": {"epochs": 100}},
}


def _deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _as_float(cfg, key, minimum=None):
    value = cfg[key]
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             f"'{key}' must be a number")
    value = float(value)
    _require(np.isfinite(value), f"'{key}' must be finite")
    if minimum is not None:
        _require(value >= minimum, f"'{key}' must be >= {minimum}")
    cfg[key] = value


def _as_int(cfg, key, minimum):
    value = cfg[key]
    _require(isinstance(value, int) and not isinstance(value, bool),
             f"'{key}' must be an integer")
    _require(value >= minimum, f"'{key}' must be >= {minimum}")


def _validate_config(cfg):
    unknown = set(cfg) - set(_DEFAULTS)
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")
    if cfg["theta_table"] is None:
        _require(cfg["family"] in _FAMILIES,
                 f"unknown system family {cfg['family']!r}; choose from {_FAMILIES} "
                 "or provide 'theta_table'")
        if cfg["family"] == "constant":
            _require(cfg["a"] is not None and cfg["b"] is not None,
                     "the constant family needs explicit 'a' and 'b' matrices")
    _as_int(cfg, "n_theta", 1)
    _as_int(cfg, "n_steps", 1)
    _as_int(cfg, "n_samples", 1)
    _as_int(cfg, "bridge_paths", 1)
    _as_int(cfg, "seed", 0)
    _as_float(cfg, "t_f", minimum=1e-12)
    _as_float(cfg, "epsilon", minimum=0.0)
    _require(isinstance(cfg["epsilons"], list), "'epsilons' must be a list")
    for e in cfg["epsilons"]:
        _require(isinstance(e, (int, float)) and e >= 0,
                 "'epsilons' entries must be nonnegative numbers")
    cfg["epsilons"] = [float(e) for e in cfg["epsilons"]]
    _require(cfg["coupling"] in ("ot", "product"),
             "'coupling' must be 'ot' or 'product'")
    _require(cfg["controller"] in _DET_CONTROLLERS + _STO_CONTROLLERS,
             f"unknown controller {cfg['controller']!r}")
    if cfg["model"] is not None:
        _require(cfg["model"] in _MODELS, f"unknown model kind {cfg['model']!r}")
    for key in ("x0", "xf"):
        _require(isinstance(cfg[key], list) and len(cfg[key]) >= 1
                 and all(isinstance(v, (int, float)) for v in cfg[key]),
                 f"'{key}' must be a list of numbers")
        cfg[key] = [float(v) for v in cfg[key]]
    train = _deep_merge(_TRAIN_DEFAULTS, cfg["train"] or {})
    unknown = set(train) - set(_TRAIN_DEFAULTS)
    _require(not unknown, f"unknown train keys: {sorted(unknown)}")
    cfg["train"] = train
    metric = _deep_merge(_METRIC_DEFAULTS, cfg["metric"] or {})
    unknown = set(metric) - set(_METRIC_DEFAULTS)
    _require(not unknown, f"unknown metric keys: {sorted(unknown)}")
    cfg["metric"] = metric
    return cfg


def _load_config(args):
    cfg = dict(_DEFAULTS)
    if getattr(args, "preset", None):
        _require(args.preset in _PRESETS, f"unknown preset {args.preset!r}")
        cfg = _deep_merge(cfg, _PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
        _require(isinstance(raw, dict), "config file must hold a JSON object")
        cfg = _deep_merge(cfg, raw)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "x0", None) is not None:
        cfg["x0"] = args.x0
    if getattr(args, "xf", None) is not None:
        cfg["xf"] = args.xf
    return _validate_config(cfg)


def _mixture(spec, what):
    _require(isinstance(spec, dict) and "type" in spec,
             f"'{what}' must be an object with a 'type' field")
    kind = spec["type"]
    try:
        if kind == "gaussian":
            mean = np.asarray(spec["mean"], dtype=float)
            return single_gaussian(mean, _cov_entry(spec["cov"], mean.shape[0]))
        if kind == "point":
            return point_mass(np.asarray(spec["x"], dtype=float))
        if kind == "ring":
            return ring_mixture(
                int(spec.get("n_components", 8)),
                float(spec.get("radius", 1.0)),
                float(spec.get("sigma2", 0.01)),
                center=spec.get("center", (0.0, 0.0)),
            )
        if kind == "mixture":
            means = np.asarray(spec["means"], dtype=float)
            covs = np.stack(
                [_cov_entry(c, means.shape[1]) for c in spec["covs"]]
            )
            return GaussianMixture(
                np.asarray(spec["weights"], dtype=float), means, covs
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{what}' spec: {exc}") from exc
    raise ConfigError(f"unknown mixture type {kind!r} in '{what}'")


def _cov_entry(value, dim):
    if isinstance(value, (int, float)):
        return float(value) * np.eye(dim)
    return np.asarray(value, dtype=float)


def _build_table(cfg):
    grid = TimeGrid(t_f=cfg["t_f"], n_steps=cfg["n_steps"])
    if cfg["theta_table"]:
        ensemble = load_theta_table(cfg["theta_table"])
    else:
        a = None if cfg["a"] is None else np.asarray(cfg["a"], dtype=float)
        b = None if cfg["b"] is None else np.asarray(cfg["b"], dtype=float)
        try:
            ensemble = build_theta_ensemble(cfg["family"], cfg["n_theta"], a=a, b=b)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return ensemble, grid, build_kernel_table(ensemble, grid)


def _stamp(cfg, command):
    stamped = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps({"command": command, "config": stamped}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _base_dir(cfg):
    return os.environ.get("AVGFLOW_OUT") or cfg.get("out_dir") or "runs"


def _run_dir(cfg, command):
    stamp = _stamp(cfg, command)
    run_dir = os.path.join(_base_dir(cfg), f"{command}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir, stamp


def _train_config(cfg):
    train = dict(cfg["train"])
    if train.get("seed") is None:
        train["seed"] = cfg["seed"]
    return TrainConfig(**train)


def _manifest(run_dir, cfg, command, stamp, extra=None):
    grid_dt = cfg["t_f"] / cfg["n_steps"]
    entries = {
        "command": command,
        "stamp": stamp,
        "family": cfg["theta_table"] or cfg["family"],
        "epsilon": cfg["epsilon"],
        "t_f": cfg["t_f"],
        "n_steps": cfg["n_steps"],
        "dt": grid_dt,
        "n_samples": cfg["n_samples"],
        "seed": cfg["seed"],
        "controller": cfg["controller"],
        "checkpoint": cfg["checkpoint"],
    }
    if extra:
        entries.update(extra)
    return write_manifest(os.path.join(run_dir, "manifest.json"), entries)


def _write_controls_csv(path, grid, controls):
    controls = np.asarray(controls)
    if controls.ndim == 2:
        controls = controls[None]
    times = grid.times
    with open(path, "w", newline="") as fh:
        cols = ["path_id", "t"] + [f"u{i + 1}" for i in range(controls.shape[2])]
        fh.write(",".join(cols) + "\n")
        for pid in range(controls.shape[0]):
            for j in range(controls.shape[1]):
                row = [str(pid), f"{times[j]:.17g}"]
                row += [f"{v:.17g}" for v in controls[pid, j]]
                fh.write(",".join(row) + "\n")


def _load_trajectory_csv(path):
    """Read a trajectory CSV back into (paths, steps, d) state arrays."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
    except (OSError, ValueError, StopIteration) as exc:
        raise ConfigError(f"cannot read trajectory file {path!r}: {exc}") from exc
    state_cols = [i for i, name in enumerate(header) if name.startswith("x")]
    _require(header[:2] == ["path_id", "t"] and state_cols,
             f"{path!r} is not a trajectory CSV")
    data = np.asarray(rows, dtype=float)
    ids = data[:, 0].astype(int)
    order = np.unique(ids)
    per_path = [data[ids == pid][:, state_cols] for pid in order]
    steps = {p.shape[0] for p in per_path}
    _require(len(steps) == 1, f"{path!r} has ragged path lengths")
    return np.stack(per_path)


def _write_error(cfg, run_dir, exc, code):
    record = {
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": code,
    }
    target = run_dir if run_dir and os.path.isdir(run_dir) else _base_dir(cfg)
    try:
        os.makedirs(target, exist_ok=True)
        with open(os.path.join(target, "error.json"), "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


# ---------------------------------------------------------------------------
# Commands


def cmd_kernel(cfg, run_dir, stamp, args):
    _, _, table = _build_table(cfg)
    export_kernel_csv(table, run_dir)
    _manifest(run_dir, cfg, "kernel", stamp, extra={
        "condition_number": table.cond_full,
        "outputs": ["Phi.csv", "M.csv", "G_fwd.csv", "G_bwd.csv", "S.csv",
                    "Y.csv", "Z.csv", "K.csv", "summary.json"],
    })
    print(f"kernel table exported to {run_dir}")
    return EXIT_OK


def cmd_bridge(cfg, run_dir, stamp, args):
    _, grid, table = _build_table(cfg)
    try:
        pair = EndpointPair(np.asarray(cfg["x0"]), np.asarray(cfg["xf"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _require(pair.x0.shape[0] == table.dim_state,
             f"x0 has dimension {pair.x0.shape[0]}, system expects {table.dim_state}")
    outputs = []
    eps_list = list(cfg["epsilons"])
    if 0.0 not in eps_list:
        eps_list.insert(0, 0.0)
    for eps in eps_list:
        name = f"trajectory_eps{eps:g}.csv"
        out_path = os.path.join(run_dir, name)
        if eps == 0.0:
            det = deterministic_trajectory(table, pair)
            export_trajectory_csv(out_path, grid, det.states, det.controls)
        else:
            paths = cfg["bridge_paths"]
            ens = bridge_ensemble(
                table,
                np.tile(pair.x0, (paths, 1)),
                np.tile(pair.xf, (paths, 1)),
                eps,
                cfg["seed"],
                threads=args.threads,
            )
            export_trajectory_csv(out_path, grid, ens.states, ens.controls)
        outputs.append(name)
    _manifest(run_dir, cfg, "bridge", stamp, extra={
        "epsilons": eps_list, "x0": cfg["x0"], "xf": cfg["xf"],
        "outputs": outputs,
    })
    print(f"bridge trajectories written to {run_dir}")
    return EXIT_OK


def _deterministic_pipeline(cfg, run_dir, table, grid, args, train_only=False):
    seed = cfg["seed"]
    n = cfg["n_samples"]
    mu0 = _mixture(cfg["mu0"], "mu0")
    muf = _mixture(cfg["muf"], "muf")
    pairs = product_pairs(mu0, muf, n, seed)
    if cfg["coupling"] == "ot":
        plan = ot_assignment(pairs.x0s, pairs.xfs)
    else:
        plan = product_plan(n)
    export_plan_csv(os.path.join(run_dir, "coupling_plan.csv"), plan)
    teacher = teacher_controls(table, pairs.x0s, pairs.xfs, plan)
    _write_controls_csv(os.path.join(run_dir, "teacher_controls.csv"),
                        grid, teacher.controls)

    controller = None
    checkpoint = None
    controller_name = cfg["model"] or cfg["controller"]
    if controller_name in ("learned-ffn", "feedforward"):
        inputs, targets = flatten_endpoint_dataset(
            teacher.x0s, teacher.controls, grid.times
        )
        model, report = train_feedforward(inputs, targets, _train_config(cfg))
        checkpoint = os.path.join(run_dir, "model.json")
        save_model(model, checkpoint)
        report.to_csv(os.path.join(run_dir, "train_report.csv"))
        controller = FeedforwardController(model)
    elif controller_name in ("gain-model", "gain"):
        model, report = train_gain(table, _train_config(cfg))
        checkpoint = os.path.join(run_dir, "model.json")
        save_model(model, checkpoint)
        report.to_csv(os.path.join(run_dir, "train_report.csv"))
        controller = GainController(model, teacher.targets)
    elif controller_name == "teacher":
        controller = TeacherController(teacher.controls)
    elif controller_name == "deterministic-exact":
        controller = DeterministicExactController(teacher.targets)
    else:
        raise ConfigError(
            f"controller {controller_name!r} does not fit the deterministic pipeline"
        )
    if train_only:
        return None, None, checkpoint, muf
    rollout = rollout_deterministic(table, controller, pairs.x0s, threads=args.threads)
    export_trajectory_csv(os.path.join(run_dir, "rollout.csv"), grid,
                          rollout.states, rollout.controls)
    target_cloud = sample(muf, n, seed, stream=3)
    report = compare_laws(rollout, target_cloud, metric_seed=seed)
    return rollout, (report, rollout.terminal, target_cloud), checkpoint, muf


def _stochastic_pipeline(cfg, run_dir, table, grid, args, train_only=False):
    seed = cfg["seed"]
    n = cfg["n_samples"]
    eps = cfg["epsilon"]
    mu0 = _mixture(cfg["mu0"], "mu0")
    muf = _mixture(cfg["muf"], "muf")
    pairs = product_pairs(mu0, muf, n, seed)
    if cfg["coupling"] == "ot":
        plan = ot_assignment(pairs.x0s, pairs.xfs)
        xfs = pairs.xfs[plan.permutation]
    else:
        xfs = pairs.xfs

    controller = None
    checkpoint = None
    rollout_x0s = pairs.x0s
    rollout_seed = seed
    controller_name = cfg["model"] or cfg["controller"]
    if controller_name in ("learned-rnn", "recurrent"):
        bridges = bridge_ensemble(table, pairs.x0s, xfs, eps, seed,
                                  threads=args.threads)
        feats, targets = sequence_dataset(
            pairs.x0s, bridges.noise, bridges.controls, grid.times
        )
        model, report = train_recurrent(feats, targets, _train_config(cfg))
        checkpoint = os.path.join(run_dir, "model.json")
        save_model(model, checkpoint)
        report.to_csv(os.path.join(run_dir, "train_report.csv"))
        controller = RecurrentController(model)
        rollout_x0s = sample(mu0, n, seed, stream=5)
        rollout_seed = seed + 1
    elif controller_name == "posterior-exact":
        _require(mu0.n_components == 1,
                 "posterior-exact steering needs a single-Gaussian mu0")
        controller = PosteriorExactController(mu0, muf)
        rollout_x0s = sample(mu0, n, seed, stream=5)
        rollout_seed = seed + 1
    elif controller_name == "volterra-exact":
        controller = VolterraExactController(xfs)
    else:
        raise ConfigError(
            f"controller {controller_name!r} does not fit the stochastic pipeline"
        )
    if train_only:
        return None, None, checkpoint, muf
    rollout = rollout_stochastic(table, controller, rollout_x0s, eps,
                                 rollout_seed, threads=args.threads)
    export_trajectory_csv(os.path.join(run_dir, "rollout.csv"), grid,
                          rollout.states, rollout.controls)
    reference_pairs = product_pairs(mu0, muf, n, seed + 2)
    reference = bridge_ensemble(table, reference_pairs.x0s, reference_pairs.xfs,
                                eps, seed + 3, threads=args.threads)
    report = compare_laws(rollout, reference, metric_seed=seed)
    return rollout, (report, rollout.terminal, reference.states[:, -1, :]), checkpoint, muf


def _apply_metric_gate(cfg, args, observed, left_cloud, right_cloud):
    if not args.strict:
        return
    metric = cfg["metric"]
    _, null = energy_distance_null(
        left_cloud, right_cloud,
        n_permutations=metric["n_permutations"],
        seed=cfg["seed"],
    )
    level = float(np.quantile(null, 0.95))
    cap = metric["max_energy_distance"]
    if observed > level:
        raise MetricGateError(
            f"terminal energy distance {observed:.6g} exceeds the 95th "
            f"percentile of its permutation null ({level:.6g})"
        )
    if cap is not None and observed > cap:
        raise MetricGateError(
            f"terminal energy distance {observed:.6g} exceeds the configured "
            f"cap {cap:.6g}"
        )


def cmd_flow(cfg, run_dir, stamp, args):
    _, grid, table = _build_table(cfg)
    if cfg["controller"] in _DET_CONTROLLERS:
        rollout, metrics_pack, checkpoint, _ = _deterministic_pipeline(
            cfg, run_dir, table, grid, args
        )
    else:
        rollout, metrics_pack, checkpoint, _ = _stochastic_pipeline(
            cfg, run_dir, table, grid, args
        )
    report, left_cloud, right_cloud = metrics_pack
    export_metrics(report, run_dir)
    _manifest(run_dir, cfg, "flow", stamp, extra={
        "checkpoint": checkpoint,
        "terminal_energy_distance": report.energy_distance,
        "outputs": sorted(os.listdir(run_dir)),
    })
    _apply_metric_gate(cfg, args, report.energy_distance, left_cloud, right_cloud)
    print(f"flow pipeline outputs in {run_dir} "
          f"(terminal energy distance {report.energy_distance:.6g})")
    return EXIT_OK


def cmd_train(cfg, run_dir, stamp, args):
    _require(cfg["model"] in _MODELS,
             "the train command needs 'model': feedforward | recurrent | gain")
    _, grid, table = _build_table(cfg)
    if cfg["model"] == "gain":
        model, report = train_gain(table, _train_config(cfg))
        checkpoint = os.path.join(run_dir, "model.json")
        save_model(model, checkpoint)
        report.to_csv(os.path.join(run_dir, "train_report.csv"))
    elif cfg["model"] == "feedforward":
        _, _, checkpoint, _ = _deterministic_pipeline(
            cfg, run_dir, table, grid, args, train_only=True
        )
    else:
        _, _, checkpoint, _ = _stochastic_pipeline(
            cfg, run_dir, table, grid, args, train_only=True
        )
    _manifest(run_dir, cfg, "train", stamp, extra={
        "checkpoint": checkpoint,
        "model": cfg["model"],
        "outputs": sorted(os.listdir(run_dir)),
    })
    print(f"model checkpoint written to {checkpoint}")
    return EXIT_OK


def cmd_simulate(cfg, run_dir, stamp, args):
    _, grid, table = _build_table(cfg)
    seed = cfg["seed"]
    n = cfg["n_samples"]
    mu0 = _mixture(cfg["mu0"], "mu0")
    muf = _mixture(cfg["muf"], "muf")
    pairs = product_pairs(mu0, muf, n, seed)
    if cfg["coupling"] == "ot":
        plan = ot_assignment(pairs.x0s, pairs.xfs)
        xfs = pairs.xfs[plan.permutation]
    else:
        xfs = pairs.xfs
    name = cfg["controller"]
    needs_model = name in ("learned-ffn", "learned-rnn", "gain-model")
    model = None
    if needs_model:
        _require(cfg["checkpoint"], f"controller {name!r} needs a 'checkpoint' path")
        model = load_model(cfg["checkpoint"])
    if name == "teacher":
        controller = TeacherController(
            teacher_controls(table, pairs.x0s, xfs).controls
        )
    elif name == "deterministic-exact":
        controller = DeterministicExactController(xfs)
    elif name == "learned-ffn":
        controller = FeedforwardController(model)
    elif name == "gain-model":
        controller = GainController(model, xfs)
    elif name == "volterra-exact":
        controller = VolterraExactController(xfs)
    elif name == "learned-rnn":
        controller = RecurrentController(model)
    else:
        controller = PosteriorExactController(mu0, muf)
    if name in _DET_CONTROLLERS:
        rollout = rollout_deterministic(table, controller, pairs.x0s,
                                        threads=args.threads)
    else:
        rollout = rollout_stochastic(table, controller, pairs.x0s,
                                     cfg["epsilon"], seed, threads=args.threads)
    export_trajectory_csv(os.path.join(run_dir, "rollout.csv"), grid,
                          rollout.states, rollout.controls)
    _manifest(run_dir, cfg, "simulate", stamp, extra={
        "outputs": ["rollout.csv", "manifest.json"],
    })
    print(f"rollout written to {run_dir}")
    return EXIT_OK


def cmd_metrics(cfg, run_dir, stamp, args):
    _require(cfg["left"], "the metrics command needs 'left': a trajectory CSV path")
    left = _load_trajectory_csv(cfg["left"])
    if cfg["right"]:
        right = _load_trajectory_csv(cfg["right"])
        right_cloud = right[:, -1, :]
    else:
        muf = _mixture(cfg["muf"], "muf")
        right = sample(muf, cfg["n_samples"], cfg["seed"], stream=7)
        right_cloud = right
    report = compare_laws(left, right, metric_seed=cfg["seed"])
    export_metrics(report, run_dir)
    _manifest(run_dir, cfg, "metrics", stamp, extra={
        "left": cfg["left"],
        "right": cfg["right"],
        "terminal_energy_distance": report.energy_distance,
        "outputs": ["metrics.txt", "metrics.csv", "manifest.json"],
    })
    _apply_metric_gate(cfg, args, report.energy_distance,
                       left[:, -1, :], right_cloud)
    print(f"metrics written to {run_dir} "
          f"(terminal energy distance {report.energy_distance:.6g})")
    return EXIT_OK


_COMMANDS = {
    "kernel": cmd_kernel,
    "bridge": cmd_bridge,
    "flow": cmd_flow,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
}


def _comma_floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats: {text!r}") from exc


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="avgflow",
        description="Averaged-ensemble bridges, couplings and flow matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("kernel", "precompute and export the convolution-kernel tables"),
        ("bridge", "write endpoint-steering trajectories"),
        ("flow", "run a full distribution-steering pipeline"),
        ("train", "train a model and save its checkpoint"),
        ("simulate", "roll out a configured controller"),
        ("metrics", "compare saved ensembles"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker thread cap for path-parallel stages")
        p.add_argument("--strict", action="store_true",
                       help="fail (exit 5) when metric gates are not met")
        p.add_argument("--preset", choices=sorted(_PRESETS),
                       help="scale preset applied before the config file")
        if name == "bridge":
            p.add_argument("--x0", type=_comma_floats,
                           help="start point, comma separated")
            p.add_argument("--xf", type=_comma_floats,
                           help="target point, comma separated")
    return parser


def _exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NotAveragedControllableError, NearTerminalSingularityError)):
        return EXIT_CONTROLLABILITY
    if isinstance(exc, TrainingDivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, MetricGateError):
        return EXIT_METRIC_GATE
    return 1


def main(argv=None):
    args = _build_parser().parse_args(argv)
    cfg = None
    run_dir = None
    try:
        cfg = _load_config(args)
        run_dir, stamp = _run_dir(cfg, args.command)
        return _COMMANDS[args.command](cfg, run_dir, stamp, args)
    except Exception as exc:
        code = _exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        if cfg is not None:
            _write_error(cfg, run_dir, exc, code)
        return code


if __name__ == "__main__":
    sys.exit(main())
