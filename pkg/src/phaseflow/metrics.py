"""Trajectory comparison metrics.

All comparisons are against a reference trajectory of the same system,
usually a fine-step velocity Verlet run.  States are matched by time, not
by index, so a coarse rollout can be scored against a finer reference as
long as its time grid is a subset of the reference grid.

A prediction that died before the reference horizon (left the sanity box,
went non-finite) scores an infinite MSE rather than being quietly truncated
to its surviving prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .integrate import Trajectory

_MATCH_TOL = 1e-9


def _check_comparable(pred: Trajectory, ref: Trajectory) -> None:
    if pred.system != ref.system:
        raise DimensionMismatch("trajectories come from different systems")


def _match_indices(pred: Trajectory, ref: Trajectory):
    """Index into ref for every pred state, matched by time within
    1e-9 * dt.  Unmatchable interior states are a grid error."""
    tol = _MATCH_TOL * ref.dt
    idx = np.rint(pred.times / ref.dt).astype(int)
    ok = (idx >= 0) & (idx < len(ref))
    if not np.all(ok):
        raise ConfigError("prediction extends past the reference horizon")
    if np.max(np.abs(ref.times[idx] - pred.times)) > tol:
        raise ConfigError("prediction times do not lie on the reference grid")
    return idx


def trajectory_mse(pred: Trajectory, ref: Trajectory) -> float:
    """Mean over matched states and particles of the squared position
    displacement |x_pred,i - x_ref,i|^2."""
    _check_comparable(pred, ref)
    if pred.status != "ok" or pred.times[-1] < ref.times[-1] - _MATCH_TOL * ref.dt:
        return float("inf")
    idx = _match_indices(pred, ref)
    d = pred.positions - ref.positions[idx]
    per_particle = (d.reshape(len(pred), -1, pred.system.dims) ** 2).sum(axis=2)
    return float(per_particle.mean())


def _rmsd(a_rows: np.ndarray, b_rows: np.ndarray) -> float:
    return float(np.sqrt(((a_rows - b_rows) ** 2).sum(axis=1).mean()))


@dataclass(frozen=True)
class NormalizedRmsd:
    positions: float
    momenta: float


def normalized_rmsd(pred: Trajectory, ref: Trajectory) -> NormalizedRmsd:
    """Final-state RMSD divided by the reference path length (the sum of
    per-step reference RMSD increments), positions and momenta separately.
    A frozen reference has no length scale and is rejected."""
    _check_comparable(pred, ref)
    if pred.status != "ok":
        return NormalizedRmsd(float("inf"), float("inf"))
    d = ref.system.dims
    n = len(ref)
    if n < 2:
        raise ConfigError("reference needs at least two states")
    x_ref = ref.positions.reshape(n, -1, d)
    p_ref = ref.momenta.reshape(n, -1, d)
    x_len = sum(_rmsd(x_ref[k + 1], x_ref[k]) for k in range(n - 1))
    p_len = sum(_rmsd(p_ref[k + 1], p_ref[k]) for k in range(n - 1))
    if x_len <= 0.0 or p_len <= 0.0:
        raise ConfigError("reference trajectory has zero path length")
    tol = _MATCH_TOL * ref.dt
    if abs(pred.times[-1] - ref.times[-1]) > tol:
        raise ConfigError("trajectories end at different times")
    xs = pred.positions[-1].reshape(-1, d)
    ps = pred.momenta[-1].reshape(-1, d)
    return NormalizedRmsd(
        positions=_rmsd(xs, x_ref[-1]) / x_len,
        momenta=_rmsd(ps, p_ref[-1]) / p_len,
    )


def _pair_distances(traj: Trajectory) -> np.ndarray:
    n_states = len(traj)
    d = traj.system.dims
    x = traj.positions.reshape(n_states, -1, d)
    n = x.shape[1]
    if n < 2:
        raise ConfigError("pair distances need at least two particles")
    iu, ju = np.triu_indices(n, k=1)
    return np.linalg.norm(x[:, iu] - x[:, ju], axis=2).reshape(-1)


def distance_hist_mae(
    pred: Trajectory, ref: Trajectory, bins: int = 200, r_max: float | None = None
) -> float:
    """Mean absolute difference between the normalized pair-distance
    histograms of the two trajectories.  r_max defaults to 1.1 times the
    largest distance seen in the reference."""
    _check_comparable(pred, ref)
    d_ref = _pair_distances(ref)
    d_pred = _pair_distances(pred)
    if r_max is None:
        r_max = 1.1 * float(d_ref.max())
    if r_max <= 0.0:
        raise ConfigError("r_max must be positive")
    h_ref, _ = np.histogram(d_ref, bins=bins, range=(0.0, r_max), density=True)
    h_pred, _ = np.histogram(d_pred, bins=bins, range=(0.0, r_max), density=True)
    return float(np.abs(h_pred - h_ref).mean())


def semigroup_error(field, state, dt: float) -> float:
    """Phase-space RMSD between one learned step of dt and two composed
    steps of dt/2.  Zero for an exact flow map."""
    from .integrate import hfm_step

    one = hfm_step(field, state, dt)
    two = hfm_step(field, hfm_step(field, state, 0.5 * dt), 0.5 * dt)
    d = state.dims
    dx = (one.positions - two.positions).reshape(-1, d)
    dp = (one.momenta - two.momenta).reshape(-1, d)
    return float(np.sqrt(((dx**2).sum(axis=1) + (dp**2).sum(axis=1)).mean()))


@dataclass(frozen=True)
class ConservationDrift:
    """Worst-case deviation of conserved quantities along a trajectory.
    Energy is relative to |E_0| unless the start is (numerically) at zero
    energy; momenta deviations are absolute, per component."""

    energy: float
    angular: float
    linear: float


def conservation_drift(traj: Trajectory) -> ConservationDrift:
    e0 = traj.e_tot[0]
    scale = abs(e0) if abs(e0) > 1e-8 else 1.0
    return ConservationDrift(
        energy=float(np.max(np.abs(traj.e_tot - e0)) / scale),
        angular=float(np.max(np.abs(traj.ang_mom - traj.ang_mom[0]))),
        linear=float(np.max(np.abs(traj.lin_mom - traj.lin_mom[0]))),
    )
