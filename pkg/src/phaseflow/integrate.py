"""Steppers and rollouts.

Two ways to advance a state by dt:

  vv_step   velocity Verlet (kick-drift-kick), the small-step reference
  hfm_step  one evaluation of a learned displacement field,
            (x, p) + dt * (v_bar, f_bar), valid for dt in [0, dt_max]

rollout() iterates a stepper, threads the state through an ordered filter
pipeline, records per-step conserved-quantity diagnostics, and stops early
if the state leaves a sanity box or stops being finite.  Trajectories
round-trip through a binary file (format HFMT v1) and export to CSV.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import systems
from .errors import (
    ConfigError,
    DegenerateStateError,
    FileFormatError,
    TimestepRangeError,
)
from .filters import angular_momentum_about_com
from .sampling import _pack_system, _unpack_system, masses_per_dof
from .systems import PhaseState, System

_DT_SLACK = 1e-12


# ---------------------------------------------------------------------------
# steppers

def vv_step(system: System, state: PhaseState, dt: float) -> PhaseState:
    """One velocity Verlet step; time-reversible, second order."""
    m = masses_per_dof(state.masses, state.dims)
    p_half = state.momenta + 0.5 * dt * systems.force(system, state.positions)
    x_new = state.positions + dt * p_half / m
    p_new = p_half + 0.5 * dt * systems.force(system, x_new)
    return state.replace(positions=x_new, momenta=p_new)


def make_vv_stepper(system: System):
    def step(state: PhaseState, dt: float) -> PhaseState:
        return vv_step(system, state, dt)

    return step


def hfm_step(field, state: PhaseState, dt: float) -> PhaseState:
    """One learned step.  The field was trained on [0, dt_max] only; asking
    for more is an error, not an extrapolation."""
    dt_max = field.config.dt_max
    if not np.isfinite(dt) or dt < -_DT_SLACK or dt > dt_max * (1.0 + 1e-9) + _DT_SLACK:
        raise TimestepRangeError(f"dt {dt!r} outside [0, {dt_max}]")
    v_bar, f_bar = field.forward(
        state.positions[None], state.momenta[None], np.array([dt])
    )
    return state.replace(
        positions=state.positions + dt * v_bar[0],
        momenta=state.momenta + dt * f_bar[0],
    )


def make_hfm_stepper(field):
    def step(state: PhaseState, dt: float) -> PhaseState:
        return hfm_step(field, state, dt)

    return step


# ---------------------------------------------------------------------------
# diagnostics

def linear_momentum(state: PhaseState) -> np.ndarray:
    """Total momentum, zero-padded to 3 components."""
    out = np.zeros(3)
    out[: state.dims] = state.momentum_rows().sum(axis=0)
    return out


def state_diagnostics(system: System, state: PhaseState):
    """(E_tot, E_kin, L_about_com[3], P[3]) for one state."""
    e_kin = state.kinetic_energy()
    e_tot = e_kin + systems.potential_energy(system, state.positions)
    return e_tot, e_kin, angular_momentum_about_com(state), linear_momentum(state)


STATUS_OK = "ok"
STATUS_BOX = "left_sanity_box"
STATUS_NONFINITE = "non_finite"

_STATUS_TAGS = {STATUS_OK: 0, STATUS_BOX: 1, STATUS_NONFINITE: 2}
_STATUS_NAMES = {v: k for k, v in _STATUS_TAGS.items()}


@dataclass
class Trajectory:
    """A recorded rollout.  Row k of every array describes the state after
    k steps; filter diagnostics at row 0 are placeholders (no step made
    state 0).  Diagnostics are stored so files are self-contained, but they
    are always recomputable from (system, positions, momenta)."""

    system: System
    dt: float
    times: np.ndarray
    positions: np.ndarray
    momenta: np.ndarray
    e_tot: np.ndarray
    e_kin: np.ndarray
    ang_mom: np.ndarray
    lin_mom: np.ndarray
    status: str = STATUS_OK
    filter_lam: np.ndarray | None = None
    filter_disc: np.ndarray | None = None
    filter_fallback: np.ndarray | None = None

    def __len__(self) -> int:
        return self.times.size

    def state(self, i: int) -> PhaseState:
        return systems.make_state(self.system, self.positions[i], self.momenta[i])

    def final_state(self) -> PhaseState:
        return self.state(len(self) - 1)

    def fallback_fraction(self) -> float:
        """Share of steps where the coupled correction gave up."""
        if self.filter_fallback is None or len(self) < 2:
            return 0.0
        return float(np.mean(self.filter_fallback[1:]))


def rollout(
    stepper,
    system: System,
    state0: PhaseState,
    dt: float,
    n_steps: int,
    filters=(),
    rng: np.random.Generator | None = None,
    sanity_box: float = 1e3,
) -> Trajectory:
    """Advance state0 by n_steps of size dt and record everything.

    Filters run in list order.  kind == "wrap" filters wrap the stepper
    (innermost first in list order); kind == "post" filters transform the
    freshly stepped state, each seeing the pre-step state for targets.
    A state outside [-sanity_box, sanity_box] ends the rollout early with
    a status mark, as does a step that degenerates (non-finite arithmetic
    or coincident particles surface as DegenerateStateError, since such
    states are unrepresentable); the degenerate state is not recorded.
    """
    if not np.isfinite(dt) or dt <= 0.0:
        raise ConfigError("rollout needs a positive finite dt")
    if n_steps < 0:
        raise ConfigError("n_steps must be >= 0")
    systems._check_state(system, state0)

    post = []
    step = stepper
    for f in filters:
        if f.needs_rng and rng is None:
            raise ConfigError(f"{type(f).__name__} needs an rng")
        if f.kind == "wrap":
            step = f.wrap(step, rng)
        elif f.kind == "post":
            post.append(f)
        else:
            raise ConfigError(f"unknown filter kind {f.kind!r}")

    n_slots = len(state0.positions)
    times = np.empty(n_steps + 1)
    xs = np.empty((n_steps + 1, n_slots))
    ps = np.empty((n_steps + 1, n_slots))
    e_tot = np.empty(n_steps + 1)
    e_kin = np.empty(n_steps + 1)
    ang = np.empty((n_steps + 1, 3))
    lin = np.empty((n_steps + 1, 3))
    lam = np.full(n_steps + 1, np.nan)
    disc = np.full(n_steps + 1, np.nan)
    fell = np.zeros(n_steps + 1)
    saw_diag = False

    def record(k, t, state):
        times[k] = t
        xs[k] = state.positions
        ps[k] = state.momenta
        e_tot[k], e_kin[k], ang[k], lin[k] = state_diagnostics(system, state)

    status = STATUS_OK
    record(0, 0.0, state0)
    current = state0
    recorded = 1
    for k in range(1, n_steps + 1):
        try:
            new = step(current, dt)
            diag = None
            for f in post:
                new, d = f.apply(current, new, dt, rng)
                if d is not None:
                    diag = d
        except DegenerateStateError:
            status = STATUS_NONFINITE
            break
        record(k, k * dt, new)
        if diag is not None:
            saw_diag = True
            lam[k] = diag.lam
            disc[k] = diag.discriminant
            fell[k] = 1.0 if diag.fallback else 0.0
        recorded = k + 1
        if np.max(np.abs(new.positions)) > sanity_box:
            status = STATUS_BOX
            break
        current = new

    sl = slice(0, recorded)
    return Trajectory(
        system=system,
        dt=dt,
        times=times[sl].copy(),
        positions=xs[sl].copy(),
        momenta=ps[sl].copy(),
        e_tot=e_tot[sl].copy(),
        e_kin=e_kin[sl].copy(),
        ang_mom=ang[sl].copy(),
        lin_mom=lin[sl].copy(),
        status=status,
        filter_lam=lam[sl].copy() if saw_diag else None,
        filter_disc=disc[sl].copy() if saw_diag else None,
        filter_fallback=fell[sl].copy() if saw_diag else None,
    )


# ---------------------------------------------------------------------------
# trajectory files

_MAGIC = b"HFMT"
_VERSION = 1
# magic, version, N, d, states, system tag, status tag, filter block flag
_HEADER = struct.Struct("<4sIIIQIII")


def save_trajectory(path, traj: Trajectory) -> None:
    """Write the binary trajectory file (format HFMT v1, little endian)."""
    tag, params = _pack_system(traj.system)
    n = systems.particle_count(traj.system)
    d = traj.system.dims
    s = len(traj)
    has_filter = traj.filter_lam is not None
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC, _VERSION, n, d, s, tag, _STATUS_TAGS[traj.status],
                1 if has_filter else 0,
            )
        )
        fh.write(struct.pack("<d", traj.dt))
        fh.write(params.astype("<f8").tobytes())
        fh.write(traj.system.masses.astype("<f8").tobytes())
        blocks = [
            traj.times, traj.positions, traj.momenta,
            traj.e_tot, traj.e_kin, traj.ang_mom, traj.lin_mom,
        ]
        if has_filter:
            blocks += [traj.filter_lam, traj.filter_disc, traj.filter_fallback]
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FileFormatError("truncated trajectory header")
        magic, version, n, d, s, tag, status_tag, has_filter = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise FileFormatError(f"unsupported trajectory version {version}")
        if status_tag not in _STATUS_NAMES:
            raise FileFormatError(f"unknown status tag {status_tag}")
        dt_raw = fh.read(8)
        params = np.frombuffer(fh.read(8 * 8), dtype="<f8")
        masses = np.frombuffer(fh.read(8 * n), dtype="<f8")
        if len(dt_raw) != 8 or params.size != 8 or masses.size != n:
            raise FileFormatError("truncated trajectory header blocks")
        (dt,) = struct.unpack("<d", dt_raw)
        nd = n * d
        shapes = [(s,), (s, nd), (s, nd), (s,), (s,), (s, 3), (s, 3)]
        if has_filter:
            shapes += [(s,), (s,), (s,)]
        blocks = []
        for shape in shapes:
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            arr = np.frombuffer(raw, dtype="<f8")
            if arr.size != count:
                raise FileFormatError("truncated trajectory body")
            blocks.append(arr.reshape(shape).copy())
        if fh.read(1):
            raise FileFormatError("trailing bytes after trajectory body")
    system = _unpack_system(tag, params, masses, d)
    traj = Trajectory(
        system=system,
        dt=dt,
        times=blocks[0],
        positions=blocks[1],
        momenta=blocks[2],
        e_tot=blocks[3],
        e_kin=blocks[4],
        ang_mom=blocks[5],
        lin_mom=blocks[6],
        status=_STATUS_NAMES[status_tag],
    )
    if has_filter:
        traj = replace(
            traj,
            filter_lam=blocks[7],
            filter_disc=blocks[8],
            filter_fallback=blocks[9],
        )
    return traj


def export_trajectory_csv(path, traj: Trajectory) -> None:
    """One row per recorded state: t, x_*, p_*, energies, |L|, |P|, status,
    plus the coupled-filter columns when present."""
    nd = systems.n_dof(traj.system)
    cols = (
        ["t"]
        + [f"x{k}" for k in range(nd)]
        + [f"p{k}" for k in range(nd)]
        + ["e_tot", "e_kin", "l_mag", "p_mag", "status"]
    )
    has_filter = traj.filter_lam is not None
    if has_filter:
        cols += ["lambda", "discriminant", "fallback"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(traj)):
            vals = np.concatenate(
                [
                    [traj.times[i]],
                    traj.positions[i],
                    traj.momenta[i],
                    [
                        traj.e_tot[i],
                        traj.e_kin[i],
                        np.linalg.norm(traj.ang_mom[i]),
                        np.linalg.norm(traj.lin_mom[i]),
                    ],
                ]
            )
            row = [repr(float(v)) for v in vals] + [traj.status]
            if has_filter:
                row += [
                    repr(float(traj.filter_lam[i])),
                    repr(float(traj.filter_disc[i])),
                    repr(float(traj.filter_fallback[i])),
                ]
            fh.write(",".join(row) + "\n")
