"""Training loop for the mean-displacement field.

The dataset is fixed (positions, forces, and the generated momenta); what
varies per epoch is everything stochastic: the shuffle order, the window
lengths dt, optionally freshly drawn Maxwell-Boltzmann momenta, and the
zero-angular-momentum / zero-momentum edge-case enrichments.  Within an
epoch, samples are consumed in batches of fixed size and a trailing partial
batch is dropped, so every optimizer step sees the same batch shape.

Optimizer: Adam with linear warmup to lr_max, cosine decay to lr_min, and
global gradient-norm clipping.  A non-finite loss or gradient aborts the
run, restores the last good parameters, and (when a checkpoint directory is
set) leaves them on disk.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import net as netmod
from . import sampling, systems
from .errors import ConfigError, NumericAbort
from .loss import LossConfig, LossReport, loss_and_grad
from .rng import DOMAIN_TRAIN_EPOCH, stream
from .sampling import SampleSet, TimestepDist


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    timestep_dist: TimestepDist = TimestepDist()
    lr_init: float = 1e-6
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    warmup_frac: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 5.0
    resample_momenta: bool = False
    temperature_mean: float = 1.0
    temperature_std: float = 0.0
    k_b: float = 1.0
    drift_projection: bool = False
    q_zero_angular: float = 0.0
    q_zero_momentum: float = 0.0
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.clip_norm <= 0.0:
            raise ConfigError("clip_norm must be positive")
        for q in (self.q_zero_angular, self.q_zero_momentum):
            if not 0.0 <= q <= 1.0:
                raise ConfigError("edge-case probabilities must lie in [0, 1]")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max over warmup_frac of the run, then cosine
    decay down to lr_min at the final step."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    warm = max(1, int(round(cfg.warmup_frac * total_steps)))
    if step < warm:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * (step / warm)
    span = max(1, total_steps - 1 - warm)
    prog = min(1.0, max(0.0, (step - warm) / span))
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * prog))


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients together so their joint 2-norm is <= max_norm.

    Returns (clipped grads, pre-clip norm).  The input dict is not written.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class AdamState:
    """First/second moment accumulators, keyed like the parameters."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig):
    """In-place bias-corrected Adam update."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class TrainResult:
    steps: int
    epochs: int
    final: LossReport
    epoch_means: list


_LOG_COLUMNS = "step,total,velocity_term,force_term,w_v,w_f,lr,grad_norm"


def _epoch_inputs(samples: SampleSet, cfg: TrainConfig, dt_max: float, rng):
    """Per-epoch stochastic quantities, drawn in a fixed order."""
    system = samples.system
    s = len(samples)
    order = rng.permutation(s)
    dts = sampling.sample_timesteps(cfg.timestep_dist, s, dt_max, rng)
    p = samples.momenta
    multi3d = system.dims == 3 and systems.particle_count(system) >= 2
    if cfg.resample_momenta:
        p = sampling.sample_maxwell_boltzmann(
            system.masses,
            system.dims,
            s,
            rng,
            temperature_mean=cfg.temperature_mean,
            temperature_std=cfg.temperature_std,
            k_b=cfg.k_b,
        )
    if multi3d and cfg.drift_projection:
        p = sampling.remove_drift_and_rescale_batch(
            p, system.masses, system.dims, k_b=cfg.k_b
        )
    if multi3d and cfg.q_zero_angular > 0.0:
        mask = rng.uniform(0.0, 1.0, size=s) < cfg.q_zero_angular
        if mask.any():
            p = p.copy()
            p[mask] = sampling.project_zero_angular_momentum_batch(
                samples.positions[mask], p[mask], system.masses, system.dims
            )
    if cfg.q_zero_momentum > 0.0:
        mask = rng.uniform(0.0, 1.0, size=s) < cfg.q_zero_momentum
        if mask.any():
            p = p.copy()
            p[mask] = 0.0
    return order, dts, p


def train(
    net: netmod.FlowFieldNet,
    samples: SampleSet,
    cfg: TrainConfig,
    seed: int,
    log_path=None,
    checkpoint_dir=None,
) -> TrainResult:
    """Run the full schedule; the network is updated in place.

    Raises NumericAbort on a non-finite loss or gradient after restoring
    (and, if checkpoint_dir is set, saving) the last good parameters.
    """
    system = samples.system
    if net.config.count != systems.particle_count(system) or net.config.dims != system.dims:
        raise ConfigError("network shape does not match the dataset's system")
    s = len(samples)
    if cfg.batch_size > s:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {s}")
    steps_per_epoch = s // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    m_slot = sampling.masses_per_dof(system.masses, system.dims)
    x_all = samples.positions
    f_all = samples.forces

    adam = AdamState(net.params)
    last_good = {k: v.copy() for k, v in net.params.items()}
    log = open(log_path, "w") if log_path is not None else None
    if log:
        log.write(_LOG_COLUMNS + "\n")

    def abort(reason: str, step: int):
        for k in net.params:
            net.params[k] = last_good[k]
        if checkpoint_dir is not None:
            netmod.save_checkpoint(
                os.path.join(checkpoint_dir, "last_good.hfmc"), net
            )
        if log:
            log.close()
        raise NumericAbort(f"{reason} at step {step}; last good parameters restored")

    epoch_means = []
    report = None
    gstep = 0
    try:
        for epoch in range(cfg.epochs):
            rng = stream(seed, DOMAIN_TRAIN_EPOCH, epoch)
            order, dts, p_all = _epoch_inputs(samples, cfg, net.config.dt_max, rng)
            v_all = p_all / m_slot[None, :]
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                report, grads = loss_and_grad(
                    net,
                    x_all[idx],
                    p_all[idx],
                    dts[idx],
                    v_all[idx],
                    f_all[idx],
                    m_slot,
                    cfg.loss,
                )
                if not np.isfinite(report.total):
                    abort("non-finite loss", gstep)
                grads, norm = clip_global_norm(grads, cfg.clip_norm)
                if not np.isfinite(norm):
                    abort("non-finite gradient", gstep)
                lr = lr_at(gstep, total_steps, cfg)
                adam_step(net.params, grads, adam, lr, cfg)
                for k in net.params:
                    np.copyto(last_good[k], net.params[k])
                losses.append(report.total)
                if log:
                    log.write(
                        ",".join(
                            repr(float(v))
                            for v in (
                                gstep,
                                report.total,
                                report.velocity_term,
                                report.force_term,
                                report.weight_velocity,
                                report.weight_force,
                                lr,
                                norm,
                            )
                        )
                        + "\n"
                    )
                gstep += 1
            epoch_means.append(float(np.mean(losses)))
            if (
                checkpoint_dir is not None
                and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                netmod.save_checkpoint(
                    os.path.join(checkpoint_dir, f"epoch_{epoch + 1:06d}.hfmc"), net
                )
    finally:
        if log and not log.closed:
            log.close()
    if checkpoint_dir is not None:
        netmod.save_checkpoint(os.path.join(checkpoint_dir, "final.hfmc"), net)
    return TrainResult(
        steps=gstep, epochs=cfg.epochs, final=report, epoch_means=epoch_means
    )
