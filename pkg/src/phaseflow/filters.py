"""Inference-time filters for large-timestep rollouts.

A learned step leaks a little energy, drift and angular momentum every
call.  Filters correct the new state after each step (or wrap the step, for
the rotation trick) using only quantities that are exactly conserved:

  random rotation     rotate, step, rotate back: averages out any
                      orientation bias of the model
  drift removal       restore the previous total momentum and move the
                      center of mass at its conserved velocity
  coupled correction  smallest mass-weighted momentum change that restores
                      both kinetic-energy and angular-momentum targets
  Langevin thermostat OU momentum kicks toward a target temperature

The coupled correction solves, in closed form, the stationarity system of
  min ||p' - p||^2 (mass metric)  s.t.  K(p') = K_tgt, L(p') = L_tgt:
corrected momenta have the form p'_i = (p_i - m_i (beta x r_i)) / (1 + a),
which reduces to a scalar quadratic (C - K_tgt) l^2 + B l + A = 0 in
l = 1 + a after splitting p' = (p0 + l p1) / l with
p0 = p - m (I^-1 L x r) and p1 = m (I^-1 L_tgt x r).  Roots are compared by
the momentum-change objective; ties prefer l nearest 1.  Infeasible cases
(negative discriminant, non-positive kinetic target) fall back to the
angular-only projection l = 1 and raise a diagnostic flag; a singular
inertia tensor skips the angular part and rescales energy only.

Momenta are assumed drift-free (total momentum zero) where the coupled
correction runs; the drift filter earlier in the pipeline guarantees it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import systems
from .errors import ConfigError, UnsupportedSystemError
from .sampling import inertia_tensor
from .systems import PhaseState

_EIG_CUTOFF = 1e-10


@dataclass(frozen=True)
class ConservationTargets:
    """Post-step targets: kinetic energy (scalar) and angular momentum
    about the center of mass (length-3 vector)."""

    kinetic: float
    angular: np.ndarray


@dataclass(frozen=True)
class FilterStepDiag:
    """What the coupled correction did on one step."""

    lam: float
    discriminant: float
    fallback: bool
    correction: float


# ---------------------------------------------------------------------------
# drift removal

def remove_drift_filter(prev: PhaseState, new: PhaseState, dt: float) -> PhaseState:
    """Restore the pre-step total momentum and place the center of mass
    where the conserved center-of-mass velocity says it should be."""
    m = new.masses
    m_tot = m.sum()
    v_com_old = prev.momentum_rows().sum(axis=0) / m_tot
    v_com_new = new.momentum_rows().sum(axis=0) / m_tot
    p = new.momentum_rows() + m[:, None] * (v_com_old - v_com_new)[None, :]
    com_old = (m[:, None] * prev.position_rows()).sum(axis=0) / m_tot
    com_new = (m[:, None] * new.position_rows()).sum(axis=0) / m_tot
    shift = com_old + dt * v_com_old - com_new
    x = new.position_rows() + shift[None, :]
    return new.replace(positions=x.reshape(-1), momenta=p.reshape(-1))


# ---------------------------------------------------------------------------
# random rotation wrap

def random_rotation(dims: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation matrix; quaternion method for d=3, angle for d=2."""
    if dims == 3:
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
    if dims == 2:
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])
    raise UnsupportedSystemError("random rotations need dims 2 or 3")


def _rotate_about(state: PhaseState, rot: np.ndarray, center: np.ndarray) -> PhaseState:
    """Rotate positions about a fixed point, momenta as plain vectors."""
    x_new = (state.position_rows() - center) @ rot.T + center
    p_new = state.momentum_rows() @ rot.T
    return state.replace(positions=x_new.reshape(-1), momenta=p_new.reshape(-1))


def random_rotation_wrap(step_fn, state: PhaseState, dt: float, rng) -> PhaseState:
    """Step in a randomly rotated frame and rotate the result back.

    The inverse uses the forward center (the pre-step arithmetic mean of
    positions); anything else fails to undo the map once the mean drifts.
    """
    rot = random_rotation(state.dims, rng)
    center = state.position_rows().mean(axis=0)
    stepped = step_fn(_rotate_about(state, rot, center), dt)
    return _rotate_about(stepped, rot.T, center)


# ---------------------------------------------------------------------------
# coupled energy / angular-momentum correction

def _com_frame(state: PhaseState):
    m = state.masses
    x = state.position_rows()
    com = (m[:, None] * x).sum(axis=0) / m.sum()
    return x - com[None, :], state.momentum_rows()


def angular_momentum_about_com(state: PhaseState) -> np.ndarray:
    """L about the center of mass, zero-padded to 3 components."""
    r, p = _com_frame(state)
    if state.dims == 3:
        return np.cross(r, p).sum(axis=0)
    if state.dims == 2:
        lz = float(np.sum(r[:, 0] * p[:, 1] - r[:, 1] * p[:, 0]))
        return np.array([0.0, 0.0, lz])
    return np.zeros(3)


def _kinetic(p_rows: np.ndarray, masses: np.ndarray) -> float:
    return float(np.sum(np.sum(p_rows * p_rows, axis=1) / (2.0 * masses)))


def coupled_conservation_filter(
    new: PhaseState, targets: ConservationTargets
) -> tuple[PhaseState, FilterStepDiag]:
    """Momentum-only correction restoring K and L targets (see module doc).

    Positions are never touched.  Defined for 3-D multi-particle states.
    """
    if new.dims != 3 or new.count < 2:
        raise UnsupportedSystemError("coupled correction needs a 3-D many-body state")
    m = new.masses
    r, p = _com_frame(new)
    k_tgt = float(targets.kinetic)
    l_tgt = np.asarray(targets.angular, dtype=np.float64)

    inertia = inertia_tensor(r[None], m)[0]
    evals, evecs = np.linalg.eigh(inertia)
    if evals[0] < _EIG_CUTOFF * max(evals[-1], 1e-300):
        # angular part undefined: rescale kinetic energy only
        k_cur = _kinetic(p, m)
        if k_cur <= 0.0 or k_tgt <= 0.0:
            return new, FilterStepDiag(math.nan, math.nan, True, 0.0)
        scale = math.sqrt(k_tgt / k_cur)
        p_new = p * scale
        diag = FilterStepDiag(math.nan, math.nan, True, _norm_change(p_new, p))
        return new.replace(momenta=p_new.reshape(-1)), diag

    def solve(rhs):
        proj = evecs.T @ rhs
        return evecs @ (proj / evals)

    ell = np.cross(r, p).sum(axis=0)
    a0 = solve(ell)
    a1 = solve(l_tgt)
    p0 = p - m[:, None] * np.cross(a0, r)
    p1 = m[:, None] * np.cross(a1, r)

    a_coef = _kinetic(p1, m)  # C
    b_coef = float(np.sum(p0 * p1 / m[:, None]))  # B
    c_coef = _kinetic(p0, m)  # A

    def assemble(lam):
        return p0 / lam + p1

    fallback_state = new.replace(momenta=(p0 + p1).reshape(-1))

    if k_tgt <= 0.0:
        return fallback_state, FilterStepDiag(
            1.0, math.nan, True, _norm_change(p0 + p1, p)
        )

    quad_a = a_coef - k_tgt
    scale_ref = max(abs(quad_a), abs(b_coef), abs(c_coef))
    roots = []
    disc = math.nan
    if abs(quad_a) <= 1e-14 * scale_ref:
        if abs(b_coef) > 1e-14 * scale_ref:
            roots = [-c_coef / b_coef]
    else:
        disc = b_coef * b_coef - 4.0 * quad_a * c_coef
        if disc >= 0.0:
            sq = math.sqrt(disc)
            # citardauq-stable split: q carries the large-magnitude root
            if b_coef != 0.0:
                q = -0.5 * (b_coef + math.copysign(sq, b_coef))
            else:
                q = -0.5 * sq
            if q != 0.0:
                roots = [q / quad_a, c_coef / q]
    roots = [lam for lam in roots if np.isfinite(lam) and lam != 0.0]
    if not roots:
        return fallback_state, FilterStepDiag(
            1.0, disc, True, _norm_change(p0 + p1, p)
        )

    best = None
    for lam in roots:
        cand = assemble(lam)
        obj = _kinetic(cand - p, m)
        if (
            best is None
            or obj < best[1] * (1.0 - 1e-12)
            or (abs(obj - best[1]) <= 1e-12 * max(best[1], 1.0)
                and abs(lam - 1.0) < abs(best[0] - 1.0))
        ):
            best = (lam, obj, cand)
    lam, _, p_new = best
    diag = FilterStepDiag(float(lam), disc, False, _norm_change(p_new, p))
    return new.replace(momenta=p_new.reshape(-1)), diag


def _norm_change(p_new: np.ndarray, p_old: np.ndarray) -> float:
    return float(np.linalg.norm(p_new - p_old))


# ---------------------------------------------------------------------------
# Langevin thermostat

def langevin_thermostat(
    state: PhaseState,
    dt: float,
    temperature: float,
    gamma: float,
    k_b: float,
    rng: np.random.Generator,
) -> PhaseState:
    """Ornstein-Uhlenbeck momentum update:
    p' = c1 p + c2 sqrt(m k_B T) xi, c1 = exp(-gamma dt), c2 = sqrt(1 - c1^2).

    Stationary per-component variance is m k_B T.  gamma = 0 is a no-op.
    """
    if temperature < 0.0 or gamma < 0.0 or k_b <= 0.0:
        raise ConfigError("thermostat needs temperature, gamma >= 0 and k_b > 0")
    c1 = math.exp(-gamma * dt)
    c2 = math.sqrt(max(0.0, 1.0 - c1 * c1))
    p = state.momentum_rows()
    noise = rng.standard_normal(p.shape)
    sigma = np.sqrt(state.masses * k_b * temperature)[:, None]
    return state.replace(momenta=(c1 * p + c2 * sigma * noise).reshape(-1))


# ---------------------------------------------------------------------------
# pipeline adapters for rollout()

class RandomRotationWrap:
    """Wraps the stepper: rotate, step, rotate back (fresh R each step)."""

    kind = "wrap"
    needs_rng = True

    def wrap(self, step_fn, rng):
        def wrapped(state, dt):
            return random_rotation_wrap(step_fn, state, dt, rng)

        return wrapped


class DriftRemoval:
    kind = "post"
    needs_rng = False

    def apply(self, prev, new, dt, rng):
        return remove_drift_filter(prev, new, dt), None


class CoupledConservation:
    """Builds per-step targets from the pre-step state and the system's
    potential, then applies the coupled correction."""

    kind = "post"
    needs_rng = False

    def __init__(self, system):
        if system.dims != 3 or systems.particle_count(system) < 2:
            raise UnsupportedSystemError(
                "coupled correction needs a 3-D many-body system"
            )
        self.system = system

    def apply(self, prev, new, dt, rng):
        k_tgt = (
            prev.kinetic_energy()
            + systems.potential_energy(self.system, prev.positions)
            - systems.potential_energy(self.system, new.positions)
        )
        targets = ConservationTargets(
            kinetic=k_tgt, angular=angular_momentum_about_com(prev)
        )
        return coupled_conservation_filter(new, targets)


class LangevinThermostat:
    kind = "post"
    needs_rng = True

    def __init__(self, temperature, gamma, k_b=1.0):
        if temperature < 0.0 or gamma < 0.0 or k_b <= 0.0:
            raise ConfigError("thermostat needs temperature, gamma >= 0 and k_b > 0")
        self.temperature = temperature
        self.gamma = gamma
        self.k_b = k_b

    def apply(self, prev, new, dt, rng):
        return (
            langevin_thermostat(new, dt, self.temperature, self.gamma, self.k_b, rng),
            None,
        )


def default_filter_stack(system, use_rotation=False, thermostat=None):
    """Inference pipeline in its canonical order: rotation wrap, drift
    removal, coupled correction, then (optionally) the thermostat."""
    stack = []
    if use_rotation:
        stack.append(RandomRotationWrap())
    stack.append(DriftRemoval())
    stack.append(CoupledConservation(system))
    if thermostat is not None:
        stack.append(thermostat)
    return stack
