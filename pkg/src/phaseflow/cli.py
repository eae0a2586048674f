"""Command line entry points.

Four subcommands cover the pipeline end to end:

  phaseflow gen      --config cfg.yaml [--seed N] [--out PATH] [--workers N]
  phaseflow train    --config cfg.yaml [--seed N] [--out PATH]
  phaseflow simulate --config cfg.yaml [--seed N] [--out PATH]
  phaseflow eval     --config cfg.yaml [--out PATH]

A config file is a YAML mapping with a `system` section plus one section
per subcommand; flags override the matching config keys.  Every command is
deterministic given (config, seed): rerunning writes byte-identical files.

Exit codes: 0 success, 2 bad configuration, 3 numeric failure (training
abort or a rollout that blew up), 4 file I/O trouble.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import yaml

from . import metrics as metricsmod
from . import sampling, systems
from .errors import ConfigError, FileFormatError, NumericAbort, PhaseflowError
from .filters import (
    CoupledConservation,
    DriftRemoval,
    LangevinThermostat,
    RandomRotationWrap,
)
from .integrate import (
    STATUS_OK,
    export_trajectory_csv,
    load_trajectory,
    make_hfm_stepper,
    make_vv_stepper,
    rollout,
    save_trajectory,
)
from .loss import LossConfig
from .net import FlowFieldNet, NetConfig, load_checkpoint, save_checkpoint
from .rng import DOMAIN_SIMULATE, DOMAIN_TRAIN_INIT, stream
from .sampling import GenConfig, TimestepDist, load_dataset, save_dataset
from .train import TrainConfig, train as run_training

_TOP_LEVEL = {"system", "gen", "train", "simulate", "eval"}


class _Section:
    """A config mapping consumed key by key; leftovers are typos."""

    def __init__(self, name: str, raw):
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        self.name = name
        self.raw = dict(raw)

    def take(self, key, *args):
        if key in self.raw:
            return self.raw.pop(key)
        if args:
            return args[0]
        raise ConfigError(f"missing required key {self.name}.{key}")

    def sub(self, key):
        raw = self.take(key, None)
        return None if raw is None else _Section(f"{self.name}.{key}", raw)

    def done(self):
        if self.raw:
            raise ConfigError(
                f"unknown keys in section {self.name!r}: {sorted(self.raw)}"
            )


def _collect(sec: _Section, spec: dict) -> dict:
    """Pull optional keys through casts; absent keys keep dataclass defaults."""
    out = {}
    for key, cast in spec.items():
        val = sec.take(key, None)
        if val is not None:
            out[key] = cast(val)
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return raw


# ---------------------------------------------------------------------------
# section builders

def build_system(raw) -> systems.System:
    sec = _Section("system", raw)
    kind = sec.take("kind")
    if kind == "oscillator":
        out = systems.HarmonicOscillator(
            mass=float(sec.take("mass", 1.0)), omega=float(sec.take("omega", 1.0))
        )
    elif kind == "spring_pendulum":
        out = systems.SpringPendulum(
            mass=float(sec.take("mass", 1.0)),
            gravity=float(sec.take("gravity", 9.81)),
            stiffness=float(sec.take("stiffness", 1.0)),
            rest_length=float(sec.take("rest_length", 1.0)),
        )
    elif kind == "barbanis":
        out = systems.Barbanis(
            omega_x=float(sec.take("omega_x", 1.0)),
            omega_y=float(sec.take("omega_y", 1.0)),
            coupling=float(sec.take("coupling", 10.0)),
        )
    elif kind == "gravity":
        masses = sec.take("masses")
        if not isinstance(masses, (list, tuple)):
            raise ConfigError("system.masses must be a list")
        out = systems.Gravity(
            particle_masses=tuple(float(m) for m in masses),
            g_constant=float(sec.take("g_constant", 1.0)),
            softening=float(sec.take("softening", 0.0)),
            dims=int(sec.take("dims", 3)),
        )
    else:
        raise ConfigError(f"unknown system kind {kind!r}")
    sec.done()
    return out


def _box(val):
    if isinstance(val, (list, tuple)):
        return tuple(float(v) for v in val)
    return float(val)


def build_gen(raw):
    sec = _Section("gen", raw)
    meta = {
        "seed": int(sec.take("seed", 0)),
        "out": sec.take("out", None),
        "csv": sec.take("csv", None),
        "workers": int(sec.take("workers", 1)),
    }
    kwargs = {
        "n_samples": int(sec.take("n_samples")),
        "box_low": _box(sec.take("box_low")),
        "box_high": _box(sec.take("box_high")),
    }
    kwargs.update(
        _collect(
            sec,
            {
                "e_total": float,
                "momentum_mode": str,
                "temperature_mean": float,
                "temperature_std": float,
                "k_b": float,
                "remove_drift": bool,
                "zero_angular": bool,
                "max_tries_factor": int,
            },
        )
    )
    sec.done()
    return GenConfig(**kwargs), meta


def _build_timesteps(sec: _Section) -> TimestepDist:
    sub = sec.sub("timesteps")
    if sub is None:
        return TimestepDist()
    kwargs = _collect(
        sub,
        {
            "kind": str,
            "q_zero": float,
            "logit_loc": float,
            "logit_scale": float,
            "beta_weight": float,
            "beta_a": float,
            "beta_b": float,
        },
    )
    sub.done()
    return TimestepDist(**kwargs)


def _build_loss(sec: _Section) -> LossConfig:
    sub = sec.sub("loss")
    if sub is None:
        return LossConfig()
    kwargs = _collect(
        sub,
        {
            "lambda_v": float,
            "lambda_f": float,
            "adaptive": bool,
            "adaptive_floor": float,
            "adaptive_power": float,
            "mass_weight_velocity": bool,
        },
    )
    sub.done()
    return LossConfig(**kwargs)


def build_train(raw):
    sec = _Section("train", raw)
    meta = {
        "dataset": sec.take("dataset"),
        "seed": int(sec.take("seed", 0)),
        "out": sec.take("out", None),
        "log": sec.take("log", None),
        "checkpoint_dir": sec.take("checkpoint_dir", None),
    }
    net_kwargs = {"dt_max": float(sec.take("dt_max"))}
    net_kwargs.update(
        _collect(
            sec,
            {
                "width": int,
                "embed_width": int,
                "sigma_f": float,
                "activation": str,
            },
        )
    )
    train_kwargs = {
        "epochs": int(sec.take("epochs")),
        "batch_size": int(sec.take("batch_size")),
        "timestep_dist": _build_timesteps(sec),
        "loss": _build_loss(sec),
    }
    train_kwargs.update(
        _collect(
            sec,
            {
                "lr_init": float,
                "lr_max": float,
                "lr_min": float,
                "warmup_frac": float,
                "beta1": float,
                "beta2": float,
                "eps": float,
                "clip_norm": float,
                "resample_momenta": bool,
                "temperature_mean": float,
                "temperature_std": float,
                "k_b": float,
                "drift_projection": bool,
                "q_zero_angular": float,
                "q_zero_momentum": float,
                "checkpoint_every": int,
            },
        )
    )
    sec.done()
    return net_kwargs, TrainConfig(**train_kwargs), meta


def build_simulate(raw):
    sec = _Section("simulate", raw)
    meta = {
        "stepper": sec.take("stepper", "hfm"),
        "checkpoint": sec.take("checkpoint", None),
        "dt": float(sec.take("dt")),
        "n_steps": int(sec.take("n_steps")),
        "seed": int(sec.take("seed", 0)),
        "out": sec.take("out", None),
        "csv": sec.take("csv", None),
        "sanity_box": float(sec.take("sanity_box", 1e3)),
        "x0": sec.take("x0", None),
        "p0": sec.take("p0", None),
        "init_from": sec.take("init_from", None),
    }
    if meta["stepper"] not in ("hfm", "vv"):
        raise ConfigError(f"simulate.stepper must be hfm or vv, got {meta['stepper']!r}")
    flt = sec.sub("filters")
    filter_spec = {"rotation": False, "drift": False, "coupled": False, "thermostat": None}
    if flt is not None:
        filter_spec["rotation"] = bool(flt.take("rotation", False))
        filter_spec["drift"] = bool(flt.take("drift", False))
        filter_spec["coupled"] = bool(flt.take("coupled", False))
        thermo = flt.sub("thermostat")
        if thermo is not None:
            filter_spec["thermostat"] = {
                "temperature": float(thermo.take("temperature")),
                "gamma": float(thermo.take("gamma")),
                "k_b": float(thermo.take("k_b", 1.0)),
            }
            thermo.done()
        flt.done()
    sec.done()
    return meta, filter_spec


def build_eval(raw):
    sec = _Section("eval", raw)
    meta = {
        "pred": sec.take("pred"),
        "ref": sec.take("ref"),
        "metrics": sec.take("metrics", ["mse", "normalized_rmsd", "conservation"]),
        "bins": int(sec.take("bins", 200)),
        "r_max": sec.take("r_max", None),
        "checkpoint": sec.take("checkpoint", None),
        "semigroup_dt": sec.take("semigroup_dt", None),
        "out": sec.take("out", None),
    }
    sec.done()
    known = {"mse", "normalized_rmsd", "distance_hist", "conservation", "semigroup"}
    unknown = set(meta["metrics"]) - known
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    return meta


# ---------------------------------------------------------------------------
# commands

def _require_out(meta, args, command):
    out = args.out if args.out is not None else meta["out"]
    if out is None:
        raise ConfigError(f"{command} needs an output path (--out or {command}.out)")
    return out


def cmd_gen(cfg: dict, args) -> int:
    system = build_system(cfg.get("system", {}))
    if "gen" not in cfg:
        raise ConfigError("config has no gen section")
    gen_cfg, meta = build_gen(cfg["gen"])
    seed = args.seed if args.seed is not None else meta["seed"]
    workers = args.workers if args.workers is not None else meta["workers"]
    out = _require_out(meta, args, "gen")
    samples = sampling.generate(system, gen_cfg, seed, workers=workers)
    save_dataset(out, samples)
    if meta["csv"]:
        sampling.export_dataset_csv(meta["csv"], samples)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(cfg: dict, args) -> int:
    if "train" not in cfg:
        raise ConfigError("config has no train section")
    net_kwargs, train_cfg, meta = build_train(cfg["train"])
    seed = args.seed if args.seed is not None else meta["seed"]
    out = _require_out(meta, args, "train")
    samples = load_dataset(meta["dataset"])
    net_cfg = NetConfig(
        count=systems.particle_count(samples.system),
        dims=samples.system.dims,
        **net_kwargs,
    )
    net = FlowFieldNet.init(net_cfg, stream(seed, DOMAIN_TRAIN_INIT))
    result = run_training(
        net,
        samples,
        train_cfg,
        seed,
        log_path=meta["log"],
        checkpoint_dir=meta["checkpoint_dir"],
    )
    save_checkpoint(out, net)
    print(f"trained {result.steps} steps over {result.epochs} epochs")
    print(f"final loss {result.final.total!r}")
    print(f"wrote checkpoint to {out}")
    return 0


def _initial_state(system, meta):
    if meta["init_from"] is not None:
        sub = _Section("simulate.init_from", meta["init_from"])
        data = load_dataset(sub.take("dataset"))
        index = int(sub.take("index", 0))
        sub.done()
        if data.system != system:
            raise ConfigError("init_from dataset was generated for another system")
        if not 0 <= index < len(data):
            raise ConfigError(f"init_from.index {index} out of range")
        return data.state(index)
    if meta["x0"] is None or meta["p0"] is None:
        raise ConfigError("simulate needs x0 and p0, or init_from")
    return systems.make_state(
        system,
        np.asarray(meta["x0"], dtype=np.float64),
        np.asarray(meta["p0"], dtype=np.float64),
    )


def _build_filters(system, filter_spec):
    stack = []
    if filter_spec["rotation"]:
        stack.append(RandomRotationWrap())
    if filter_spec["drift"]:
        stack.append(DriftRemoval())
    if filter_spec["coupled"]:
        stack.append(CoupledConservation(system))
    if filter_spec["thermostat"] is not None:
        stack.append(LangevinThermostat(**filter_spec["thermostat"]))
    return stack


def cmd_simulate(cfg: dict, args) -> int:
    system = build_system(cfg.get("system", {}))
    if "simulate" not in cfg:
        raise ConfigError("config has no simulate section")
    meta, filter_spec = build_simulate(cfg["simulate"])
    seed = args.seed if args.seed is not None else meta["seed"]
    out = _require_out(meta, args, "simulate")
    if meta["stepper"] == "hfm":
        if meta["checkpoint"] is None:
            raise ConfigError("simulate.stepper=hfm needs simulate.checkpoint")
        field = load_checkpoint(meta["checkpoint"])
        if (
            field.config.count != systems.particle_count(system)
            or field.config.dims != system.dims
        ):
            raise ConfigError("checkpoint shape does not match the system")
        stepper = make_hfm_stepper(field)
    else:
        stepper = make_vv_stepper(system)
    state0 = _initial_state(system, meta)
    traj = rollout(
        stepper,
        system,
        state0,
        meta["dt"],
        meta["n_steps"],
        filters=_build_filters(system, filter_spec),
        rng=stream(seed, DOMAIN_SIMULATE),
        sanity_box=meta["sanity_box"],
    )
    save_trajectory(out, traj)
    if meta["csv"]:
        export_trajectory_csv(meta["csv"], traj)
    print(f"wrote {len(traj)} states to {out} (status {traj.status})")
    if traj.status != STATUS_OK:
        print(f"rollout stopped early: {traj.status}", file=sys.stderr)
        return 3
    return 0


def cmd_eval(cfg: dict, args) -> int:
    if "eval" not in cfg:
        raise ConfigError("config has no eval section")
    meta = build_eval(cfg["eval"])
    pred = load_trajectory(meta["pred"])
    ref = load_trajectory(meta["ref"])
    values: dict[str, float] = {}
    for name in meta["metrics"]:
        if name == "mse":
            values["mse"] = metricsmod.trajectory_mse(pred, ref)
        elif name == "normalized_rmsd":
            nr = metricsmod.normalized_rmsd(pred, ref)
            values["normalized_rmsd_positions"] = nr.positions
            values["normalized_rmsd_momenta"] = nr.momenta
        elif name == "distance_hist":
            r_max = meta["r_max"]
            values["distance_hist_mae"] = metricsmod.distance_hist_mae(
                pred, ref, bins=meta["bins"], r_max=None if r_max is None else float(r_max)
            )
        elif name == "conservation":
            drift = metricsmod.conservation_drift(pred)
            values["energy_drift"] = drift.energy
            values["angular_momentum_drift"] = drift.angular
            values["linear_momentum_drift"] = drift.linear
        elif name == "semigroup":
            if meta["checkpoint"] is None:
                raise ConfigError("semigroup metric needs eval.checkpoint")
            field = load_checkpoint(meta["checkpoint"])
            dt = meta["semigroup_dt"]
            dt = pred.dt if dt is None else float(dt)
            values["semigroup_error"] = metricsmod.semigroup_error(
                field, ref.state(0), dt
            )
    for key, val in values.items():
        print(f"{key}={val!r}")
    out = args.out if args.out is not None else meta["out"]
    if out is not None:
        with open(out, "w") as fh:
            yaml.safe_dump({k: float(v) for k, v in values.items()}, fh)
    return 0


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
}


def _parse_args(argv):
    ap = argparse.ArgumentParser(
        prog="phaseflow",
        description="trajectory-free flow-map training and large-step simulation",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "sample a training dataset",
        "train": "fit a displacement field to a dataset",
        "simulate": "roll out a trained field or velocity Verlet",
        "eval": "score a trajectory against a reference",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output path")
        if name == "gen":
            p.add_argument(
                "--workers", type=int, default=None, help="sampling processes"
            )
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except FileFormatError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 4
    except PhaseflowError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
