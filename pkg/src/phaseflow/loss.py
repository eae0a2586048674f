"""Consistency loss for the mean-displacement field.

The field is trained against a target it supplies itself: for a sample
(x, p) with exact velocities v and forces f and a window dt,

    target = (v, f) + dt * (directional derivative of the field along
                            (v, f, -1) in (x, p, dt))

which is one JVP.  The target is detached; parameter gradients flow only
through the primal prediction.  At dt = 0 the target collapses to (v, f),
anchoring the field to the instantaneous dynamics, and a field equal to the
true mean displacement makes the residual vanish identically.

Velocity and force residuals are reduced separately (velocity optionally
mass-weighted), each scaled by an adaptive weight (raw + c)^(-p) computed
from the detached raw value, then combined with fixed lambdas.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import ConfigError, DimensionMismatch


@dataclass(frozen=True)
class LossConfig:
    lambda_v: float = 1.0
    lambda_f: float = 1.0
    adaptive: bool = True
    adaptive_floor: float = 1e-3
    adaptive_power: float = 0.5
    mass_weight_velocity: bool = True

    def __post_init__(self):
        if self.adaptive_floor <= 0.0:
            raise ConfigError("adaptive_floor must be positive")
        if self.adaptive_power < 0.0:
            raise ConfigError("adaptive_power must be non-negative")


@dataclass(frozen=True)
class LossReport:
    """total = lambda_v * velocity_term + lambda_f * force_term,
    where each term is weight * raw."""

    total: float
    velocity_term: float
    force_term: float
    raw_velocity: float
    raw_force: float
    weight_velocity: float
    weight_force: float


def adaptive_weight(raw: float, floor: float, power: float) -> float:
    """(raw + c)^(-p); large residuals get damped, small ones amplified."""
    return float((raw + floor) ** (-power))


def _build(field, x, p, dt, velocities, forces, need_cache):
    dt = np.asarray(dt, dtype=np.float64)
    tangents = (velocities, forces, -np.ones_like(dt))
    out = field.forward_with_tangent(x, p, dt, tangents, need_cache=need_cache)
    (pv, pf), (dv, df) = out[0], out[1]
    cache = out[2] if need_cache else None
    tv = velocities + dt[:, None] * dv
    tf = forces + dt[:, None] * df
    return (pv, pf), (tv, tf), cache


def build_target(field, x, p, dt, velocities, forces):
    """Detached consistency target (target_v, target_f), each (B, N*d)."""
    _, targets, _ = _build(field, x, p, dt, velocities, forces, need_cache=False)
    return targets


def _reduce(rv, rf, mass_per_slot, cfg: LossConfig):
    b, nd = rv.shape
    if mass_per_slot.shape != (nd,):
        raise DimensionMismatch(f"mass_per_slot must have shape ({nd},)")
    scale = 1.0 / (b * nd)
    m = mass_per_slot if cfg.mass_weight_velocity else np.ones(nd)
    raw_v = float(np.sum(m[None, :] * rv * rv) * scale)
    raw_f = float(np.sum(rf * rf) * scale)
    if cfg.adaptive:
        w_v = adaptive_weight(raw_v, cfg.adaptive_floor, cfg.adaptive_power)
        w_f = adaptive_weight(raw_f, cfg.adaptive_floor, cfg.adaptive_power)
    else:
        w_v = w_f = 1.0
    velocity_term = w_v * raw_v
    force_term = w_f * raw_f
    report = LossReport(
        total=cfg.lambda_v * velocity_term + cfg.lambda_f * force_term,
        velocity_term=velocity_term,
        force_term=force_term,
        raw_velocity=raw_v,
        raw_force=raw_f,
        weight_velocity=w_v,
        weight_force=w_f,
    )
    # cotangents of `total` w.r.t. the primal predictions, weights detached
    g_v = (2.0 * scale * cfg.lambda_v * w_v) * (m[None, :] * rv)
    g_f = (2.0 * scale * cfg.lambda_f * w_f) * rf
    return report, g_v, g_f


def loss_report(field, x, p, dt, velocities, forces, mass_per_slot, cfg: LossConfig):
    """Loss values for any field exposing forward_with_tangent (no grads)."""
    (pv, pf), (tv, tf), _ = _build(field, x, p, dt, velocities, forces, False)
    report, _, _ = _reduce(pv - tv, pf - tf, np.asarray(mass_per_slot, float), cfg)
    return report


def loss_and_grad(net, x, p, dt, velocities, forces, mass_per_slot, cfg: LossConfig):
    """One fused pass: JVP for the target, reverse pass for the gradient.

    Returns (LossReport, grads) with grads keyed like net.params.
    """
    (pv, pf), (tv, tf), cache = _build(net, x, p, dt, velocities, forces, True)
    report, g_v, g_f = _reduce(
        pv - tv, pf - tf, np.asarray(mass_per_slot, dtype=np.float64), cfg
    )
    grads, _ = net.backward(cache, g_v, g_f)
    return report, grads
