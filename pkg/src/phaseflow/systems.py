"""Hamiltonian test systems.

Every system here is separable, H(x, p) = sum_i |p_i|^2 / (2 m_i) + V(x),
for N point particles in d dimensions.  Positions and momenta travel as flat
float64 vectors of length N*d (particle-major), masses as a vector of
length N.  Forces are exact gradients, f = -dV/dx, so that energy is a
conserved quantity of the continuous flow.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import (
    DegenerateStateError,
    DimensionMismatch,
    UnsupportedSystemError,
)

_COINCIDENT_TOL = 1e-12


def _as_vector(a, name: str, length: int) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 1 or out.shape[0] != length:
        raise DimensionMismatch(
            f"{name}: expected flat vector of length {length}, got shape {out.shape}"
        )
    if not np.all(np.isfinite(out)):
        raise DegenerateStateError(f"{name} contains non-finite entries")
    return out


@dataclass(frozen=True)
class PhaseState:
    """Point in phase space.

    positions, momenta : flat float64 vectors, length count*dims,
        particle-major (particle i occupies slots [i*dims, (i+1)*dims)).
    masses : float64 vector, length count, strictly positive.
    dims : spatial dimension, 1 to 3.
    """

    positions: np.ndarray
    momenta: np.ndarray
    masses: np.ndarray
    dims: int

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=np.float64)
        if masses.ndim != 1 or masses.size == 0:
            raise DimensionMismatch("masses must be a non-empty 1-D vector")
        if not np.all(np.isfinite(masses)) or np.any(masses <= 0.0):
            raise DegenerateStateError("masses must be finite and strictly positive")
        if self.dims not in (1, 2, 3):
            raise DimensionMismatch(f"dims must be 1, 2 or 3, got {self.dims}")
        n = masses.shape[0] * self.dims
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "positions", _as_vector(self.positions, "positions", n))
        object.__setattr__(self, "momenta", _as_vector(self.momenta, "momenta", n))

    @property
    def count(self) -> int:
        return self.masses.shape[0]

    def position_rows(self) -> np.ndarray:
        """Positions as an (N, d) array (view when possible)."""
        return self.positions.reshape(self.count, self.dims)

    def momentum_rows(self) -> np.ndarray:
        return self.momenta.reshape(self.count, self.dims)

    def velocities(self) -> np.ndarray:
        """Flat velocity vector, v_i = p_i / m_i."""
        return (self.momentum_rows() / self.masses[:, None]).reshape(-1)

    def kinetic_energy(self) -> float:
        p = self.momentum_rows()
        return float(np.sum(np.sum(p * p, axis=1) / (2.0 * self.masses)))

    def replace(self, positions=None, momenta=None) -> "PhaseState":
        return PhaseState(
            positions=self.positions if positions is None else positions,
            momenta=self.momenta if momenta is None else momenta,
            masses=self.masses,
            dims=self.dims,
        )


@dataclass(frozen=True)
class HarmonicOscillator:
    """1-D oscillator, V(x) = m omega^2 x^2 / 2."""

    mass: float = 1.0
    omega: float = 1.0

    dims = 1

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.mass], dtype=np.float64)

    def _potential(self, q: np.ndarray) -> float:
        return float(0.5 * self.mass * self.omega**2 * q[0] ** 2)

    def _force(self, q: np.ndarray) -> np.ndarray:
        return np.array([-self.mass * self.omega**2 * q[0]])


@dataclass(frozen=True)
class SpringPendulum:
    """Mass on a spring under gravity, 2-D.

    V(x, y) = m g y + k (sqrt(x^2 + y^2) - l0)^2 / 2.  The pivot sits at the
    origin; the force is singular there, so states with |r| ~ 0 are rejected.
    """

    mass: float = 1.0
    gravity: float = 9.81
    stiffness: float = 1.0
    rest_length: float = 1.0

    dims = 2

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.mass], dtype=np.float64)

    def _potential(self, q: np.ndarray) -> float:
        r = float(np.hypot(q[0], q[1]))
        return float(
            self.mass * self.gravity * q[1]
            + 0.5 * self.stiffness * (r - self.rest_length) ** 2
        )

    def _force(self, q: np.ndarray) -> np.ndarray:
        r = float(np.hypot(q[0], q[1]))
        if r < _COINCIDENT_TOL:
            raise DegenerateStateError("spring pendulum force undefined at the pivot")
        radial = self.stiffness * (r - self.rest_length) / r
        return np.array(
            [-radial * q[0], -self.mass * self.gravity - radial * q[1]]
        )


@dataclass(frozen=True)
class Barbanis:
    """2-D coupled quartic oscillator.

    V(x, y) = (omega_x^2 x^2 + omega_y^2 y^2) / 2 + coupling * x^2 y^2.
    Mass is 1.  Mildly chaotic at moderate energies once coupling kicks in.
    """

    omega_x: float = 1.0
    omega_y: float = 1.0
    coupling: float = 10.0

    dims = 2

    @property
    def masses(self) -> np.ndarray:
        return np.array([1.0])

    def _potential(self, q: np.ndarray) -> float:
        x, y = q
        return float(
            0.5 * (self.omega_x**2 * x**2 + self.omega_y**2 * y**2)
            + self.coupling * x**2 * y**2
        )

    def _force(self, q: np.ndarray) -> np.ndarray:
        x, y = q
        return np.array(
            [
                -(self.omega_x**2 * x + 2.0 * self.coupling * x * y**2),
                -(self.omega_y**2 * y + 2.0 * self.coupling * x**2 * y),
            ]
        )


@dataclass(frozen=True)
class Gravity:
    """N-body point-mass gravity with optional Plummer softening.

    V(x) = -G sum_{i<j} m_i m_j / sqrt(|x_i - x_j|^2 + softening^2).
    With softening 0 the potential is the bare Kepler one and coincident
    particles are an error.
    """

    particle_masses: tuple
    g_constant: float = 1.0
    softening: float = 0.0
    dims: int = 3

    def __post_init__(self):
        if len(self.particle_masses) < 2:
            raise DimensionMismatch("gravity needs at least two particles")
        if self.dims not in (2, 3):
            raise DimensionMismatch("gravity supports dims 2 or 3")
        if any(m <= 0 for m in self.particle_masses):
            raise DegenerateStateError("particle masses must be positive")
        if self.softening < 0:
            raise DegenerateStateError("softening must be non-negative")

    @property
    def masses(self) -> np.ndarray:
        return np.asarray(self.particle_masses, dtype=np.float64)

    def _pair_geometry(self, rows: np.ndarray):
        diff = rows[:, None, :] - rows[None, :, :]
        s2 = np.sum(diff * diff, axis=2) + self.softening**2
        n = rows.shape[0]
        off = ~np.eye(n, dtype=bool)
        if np.any(s2[off] < _COINCIDENT_TOL**2):
            raise DegenerateStateError(
                "coincident particles under unsoftened gravity"
            )
        # keep the (ignored) diagonal away from zero before the power laws
        s2 = s2 + np.eye(n)
        return diff, s2

    def _potential(self, q: np.ndarray) -> float:
        rows = q.reshape(-1, self.dims)
        m = self.masses
        diff, s2 = self._pair_geometry(rows)
        inv = 1.0 / np.sqrt(s2)
        np.fill_diagonal(inv, 0.0)
        mm = m[:, None] * m[None, :]
        return float(-0.5 * self.g_constant * np.sum(mm * inv))

    def _force(self, q: np.ndarray) -> np.ndarray:
        rows = q.reshape(-1, self.dims)
        m = self.masses
        diff, s2 = self._pair_geometry(rows)
        inv3 = s2 ** (-1.5)
        np.fill_diagonal(inv3, 0.0)
        mm = m[:, None] * m[None, :]
        f_rows = -self.g_constant * np.sum(
            (mm * inv3)[:, :, None] * diff, axis=1
        )
        return f_rows.reshape(-1)


System = HarmonicOscillator | SpringPendulum | Barbanis | Gravity


def particle_count(system: System) -> int:
    return system.masses.shape[0]


def n_dof(system: System) -> int:
    """Length of the flat position (and momentum) vector."""
    return particle_count(system) * system.dims


def _check_positions(system: System, positions) -> np.ndarray:
    return _as_vector(positions, "positions", n_dof(system))


def potential_energy(system: System, positions) -> float:
    """V(x) for a flat position vector of length N*d."""
    q = _check_positions(system, positions)
    return system._potential(q)


def force(system: System, positions) -> np.ndarray:
    """Exact force f(x) = -dV/dx, flat vector of length N*d."""
    q = _check_positions(system, positions)
    return system._force(q)


def total_energy(system: System, state: PhaseState) -> float:
    """H(x, p) = kinetic + potential."""
    _check_state(system, state)
    return state.kinetic_energy() + system._potential(state.positions)


def _check_state(system: System, state: PhaseState):
    if state.dims != system.dims or state.count != particle_count(system):
        raise DimensionMismatch(
            f"state has N={state.count}, d={state.dims}; system expects "
            f"N={particle_count(system)}, d={system.dims}"
        )
    if not np.allclose(state.masses, system.masses, rtol=0.0, atol=0.0):
        raise DimensionMismatch("state masses differ from system masses")


def make_state(system: System, positions, momenta) -> PhaseState:
    """PhaseState with this system's masses and dims."""
    return PhaseState(
        positions=positions,
        momenta=momenta,
        masses=system.masses,
        dims=system.dims,
    )


def exact_flow(system: System, state: PhaseState, dt: float) -> PhaseState:
    """Closed-form flow map, defined for the unit-mass harmonic oscillator.

    x(t) = x cos(omega t) + (p / omega) sin(omega t)
    p(t) = -x omega sin(omega t) + p cos(omega t)
    """
    if not isinstance(system, HarmonicOscillator):
        raise UnsupportedSystemError("exact_flow is only defined for the oscillator")
    if system.mass != 1.0:
        raise UnsupportedSystemError("exact_flow assumes unit mass")
    if not np.isfinite(dt):
        raise DegenerateStateError("dt must be finite")
    _check_state(system, state)
    w = system.omega
    c, s = np.cos(w * dt), np.sin(w * dt)
    x, p = state.positions, state.momenta
    return state.replace(
        positions=x * c + (p / w) * s,
        momenta=-x * w * s + p * c,
    )
