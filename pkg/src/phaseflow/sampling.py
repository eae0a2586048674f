"""Trajectory-free training data: samplers, projections, dataset files.

A dataset is a bag of decorrelated phase-space points with exact forces,
(x, p, f), with no time ordering anywhere.  Positions come from rejection
sampling under an energy cap; momenta either close a fixed total energy
(direction uniform on the sphere, magnitude solved from E - V) or follow a
Maxwell-Boltzmann draw at a sampled temperature.  Optional projections
remove center-of-mass drift and total angular momentum.

Timesteps are not stored: the trainer resamples them every epoch from one
of the distributions in `sample_timesteps`.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import systems
from .errors import (
    ConfigError,
    DegenerateStateError,
    DimensionMismatch,
    FileFormatError,
    RejectionBudgetError,
    UnsupportedSystemError,
)
from .rng import DOMAIN_GEN, stream
from .systems import System

_EIG_CUTOFF = 1e-10


def masses_per_dof(masses: np.ndarray, dims: int) -> np.ndarray:
    """Per-slot mass vector of length N*d (mass of the owning particle)."""
    return np.repeat(np.asarray(masses, dtype=np.float64), dims)


@dataclass
class SampleSet:
    """Decorrelated samples for one system: arrays of shape (S, N*d)."""

    system: System
    positions: np.ndarray
    momenta: np.ndarray
    forces: np.ndarray

    def __post_init__(self):
        nd = systems.n_dof(self.system)
        for name in ("positions", "momenta", "forces"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2 or a.shape[1] != nd:
                raise DimensionMismatch(f"{name}: expected (S, {nd}), got {a.shape}")
            setattr(self, name, a)
        if not (len(self.positions) == len(self.momenta) == len(self.forces)):
            raise DimensionMismatch("sample arrays disagree on sample count")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def velocities(self) -> np.ndarray:
        """Recomputed, never stored: v = p / m per slot."""
        m = masses_per_dof(self.system.masses, self.system.dims)
        return self.momenta / m[None, :]

    def state(self, i: int) -> systems.PhaseState:
        return systems.make_state(self.system, self.positions[i], self.momenta[i])


def merge_sample_sets(parts) -> SampleSet:
    parts = list(parts)
    if not parts:
        raise ConfigError("nothing to merge")
    return SampleSet(
        system=parts[0].system,
        positions=np.concatenate([p.positions for p in parts], axis=0),
        momenta=np.concatenate([p.momenta for p in parts], axis=0),
        forces=np.concatenate([p.forces for p in parts], axis=0),
    )


# ---------------------------------------------------------------------------
# position and momentum samplers

def _normalize_box(system: System, low, high) -> tuple[np.ndarray, np.ndarray]:
    nd = systems.n_dof(system)
    d = system.dims
    out = []
    for name, b in (("low", low), ("high", high)):
        a = np.asarray(b, dtype=np.float64).reshape(-1)
        if a.size == 1:
            a = np.full(nd, a[0])
        elif a.size == d:
            a = np.tile(a, systems.particle_count(system))
        elif a.size != nd:
            raise ConfigError(
                f"box {name}: expected scalar, {d} or {nd} entries, got {a.size}"
            )
        out.append(a)
    lo, hi = out
    if np.any(hi <= lo):
        raise ConfigError("box upper bounds must exceed lower bounds")
    return lo, hi


def sample_positions_rejection(
    system: System,
    e_max: float,
    box,
    n: int,
    rng: np.random.Generator,
    max_tries_factor: int = 1000,
) -> np.ndarray:
    """Positions uniform over {q in box : V(q) <= e_max}, shape (n, N*d).

    Raises RejectionBudgetError once max_tries_factor * n proposals have
    been spent without filling the request.
    """
    lo, hi = _normalize_box(system, *box)
    nd = lo.size
    budget = max_tries_factor * n
    spent = 0
    chunks = []
    have = 0
    while have < n:
        if spent >= budget:
            raise RejectionBudgetError(
                f"accepted {have}/{n} after {spent} proposals; "
                "box or energy cap leaves too little room"
            )
        want = min(4096, max(256, n - have))
        want = min(want, budget - spent)
        props = rng.uniform(lo, hi, size=(want, nd))
        spent += want
        keep = np.array(
            [systems.potential_energy(system, q) <= e_max for q in props]
        )
        if keep.any():
            chunks.append(props[keep])
            have += int(keep.sum())
    return np.concatenate(chunks, axis=0)[:n]


def _close_energy_momenta(
    system: System, positions: np.ndarray, e_total: float, rng: np.random.Generator
) -> np.ndarray:
    """Momenta with uniform direction and magnitude solving K = e_total - V."""
    nd = positions.shape[1]
    m_dof = masses_per_dof(system.masses, system.dims)
    u = rng.standard_normal(size=positions.shape)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateStateError("degenerate direction draw")
    u /= norms[:, None]
    kin = np.array(
        [e_total - systems.potential_energy(system, q) for q in positions]
    )
    if np.any(kin < -1e-12):
        raise DegenerateStateError("positions above the requested energy")
    kin = np.maximum(kin, 0.0)
    # K(c u) = c^2 * sum(u^2 / m) / 2
    quad = np.sum(u * u / m_dof[None, :], axis=1)
    return u * np.sqrt(2.0 * kin / quad)[:, None]


def sample_fixed_energy(
    system: System,
    e_total: float,
    box,
    n: int,
    rng: np.random.Generator,
    max_tries_factor: int = 1000,
) -> SampleSet:
    """Samples on the H = e_total shell (exactly, up to roundoff)."""
    q = sample_positions_rejection(system, e_total, box, n, rng, max_tries_factor)
    p = _close_energy_momenta(system, q, e_total, rng)
    f = np.stack([systems.force(system, qi) for qi in q])
    return SampleSet(system=system, positions=q, momenta=p, forces=f)


def sample_maxwell_boltzmann(
    masses: np.ndarray,
    dims: int,
    n: int,
    rng: np.random.Generator,
    temperature_mean: float = 1.0,
    temperature_std: float = 0.0,
    k_b: float = 1.0,
) -> np.ndarray:
    """Momenta (n, N*d) at per-sample temperatures T ~ N(mean, std^2).

    Negative temperature draws clip to zero, which freezes that sample.
    Per slot, p ~ N(0, m k_B T).
    """
    masses = np.asarray(masses, dtype=np.float64)
    t = rng.normal(temperature_mean, temperature_std, size=n) if temperature_std > 0 \
        else np.full(n, float(temperature_mean))
    t = np.maximum(t, 0.0)
    sigma = np.sqrt(k_b * np.outer(t, masses_per_dof(masses, dims)))
    return rng.standard_normal(size=(n, masses.size * dims)) * sigma


# ---------------------------------------------------------------------------
# projections (batched cores with single-state wrappers)

def _rows(batch: np.ndarray, count: int, dims: int) -> np.ndarray:
    return batch.reshape(batch.shape[0], count, dims)


def remove_drift_and_rescale_batch(
    momenta: np.ndarray,
    masses: np.ndarray,
    dims: int,
    k_b: float = 1.0,
    target_temperature: float | None = None,
) -> np.ndarray:
    """Zero the center-of-mass drift, then rescale the kinetic energy.

    Without a target temperature the pre-removal kinetic energy is restored;
    with one, the post-removal degrees of freedom d*(N-1) define the target
    through equipartition.  Raises if the drift removal leaves no kinetic
    energy to rescale.
    """
    masses = np.asarray(masses, dtype=np.float64)
    count = masses.size
    if count < 2:
        raise UnsupportedSystemError("drift removal needs at least two particles")
    p = _rows(np.asarray(momenta, dtype=np.float64), count, dims)
    m_tot = masses.sum()
    k_before = np.sum(np.sum(p * p, axis=2) / (2.0 * masses)[None, :], axis=1)
    v_com = p.sum(axis=1) / m_tot
    p = p - masses[None, :, None] * v_com[:, None, :]
    k_after = np.sum(np.sum(p * p, axis=2) / (2.0 * masses)[None, :], axis=1)
    if target_temperature is None:
        k_target = k_before
    else:
        dof = dims * (count - 1)
        k_target = np.full_like(k_after, 0.5 * dof * k_b * target_temperature)
    # comoving states keep only roundoff-level energy after the removal
    if np.any(k_after <= 1e-24 * k_before):
        raise DegenerateStateError(
            "zero kinetic energy after drift removal; cannot rescale"
        )
    p = p * np.sqrt(k_target / k_after)[:, None, None]
    return p.reshape(momenta.shape)


def remove_drift_and_rescale(
    momenta: np.ndarray,
    masses: np.ndarray,
    dims: int,
    k_b: float = 1.0,
    target_temperature: float | None = None,
) -> np.ndarray:
    """Single-state form of remove_drift_and_rescale_batch."""
    out = remove_drift_and_rescale_batch(
        np.asarray(momenta, dtype=np.float64)[None, :],
        masses,
        dims,
        k_b=k_b,
        target_temperature=target_temperature,
    )
    return out[0]


def _solve_inertia(inertia: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve I w = rhs for batched symmetric 3x3 inertia tensors.

    Raises when any tensor is singular at relative eigenvalue cutoff 1e-10
    (collinear configurations).
    """
    evals, evecs = np.linalg.eigh(inertia)
    if np.any(evals[:, 0] < _EIG_CUTOFF * np.maximum(evals[:, -1], 1e-300)):
        raise DegenerateStateError("singular inertia tensor (collinear layout?)")
    proj = np.einsum("sij,si->sj", evecs, rhs)
    return np.einsum("sij,sj->si", evecs, proj / evals)


def inertia_tensor(r: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Batched inertia tensor about the origin of r, shapes (S,N,3) -> (S,3,3)."""
    r2 = np.sum(r * r, axis=2)
    eye = np.eye(3)
    return np.einsum("sn,ij->sij", masses[None, :] * r2, eye) - np.einsum(
        "sn,sni,snj->sij", np.broadcast_to(masses, r2.shape), r, r
    )


def project_zero_angular_momentum_batch(
    positions: np.ndarray,
    momenta: np.ndarray,
    masses: np.ndarray,
    dims: int,
) -> np.ndarray:
    """Remove rigid rotation about the center of mass: p <- p - m (w x r),
    with w solving I w = L.  Defined for d=3 only."""
    if dims != 3:
        raise UnsupportedSystemError("angular momentum projection is 3-D only")
    masses = np.asarray(masses, dtype=np.float64)
    if masses.size < 2:
        raise UnsupportedSystemError("angular projection needs at least two particles")
    x = _rows(np.asarray(positions, dtype=np.float64), masses.size, dims)
    p = _rows(np.asarray(momenta, dtype=np.float64), masses.size, dims)
    com = (masses[None, :, None] * x).sum(axis=1) / masses.sum()
    r = x - com[:, None, :]
    ell = np.cross(r, p).sum(axis=1)
    w = _solve_inertia(inertia_tensor(r, masses), ell)
    p_new = p - masses[None, :, None] * np.cross(w[:, None, :], r)
    return p_new.reshape(momenta.shape)


def project_zero_angular_momentum(
    positions: np.ndarray, momenta: np.ndarray, masses: np.ndarray, dims: int
) -> np.ndarray:
    out = project_zero_angular_momentum_batch(
        np.asarray(positions, dtype=np.float64)[None, :],
        np.asarray(momenta, dtype=np.float64)[None, :],
        masses,
        dims,
    )
    return out[0]


def rescale_to_kinetic_batch(
    momenta: np.ndarray, masses: np.ndarray, dims: int, k_target: np.ndarray
) -> np.ndarray:
    """Scale each sample's momenta so its kinetic energy hits k_target."""
    masses = np.asarray(masses, dtype=np.float64)
    p = _rows(np.asarray(momenta, dtype=np.float64), masses.size, dims)
    k_cur = np.sum(np.sum(p * p, axis=2) / (2.0 * masses)[None, :], axis=1)
    k_target = np.broadcast_to(np.asarray(k_target, dtype=np.float64), k_cur.shape)
    if np.any((k_cur <= 0.0) & (k_target > 0.0)):
        raise DegenerateStateError("cannot rescale zero momenta to positive energy")
    scale = np.sqrt(np.divide(k_target, k_cur, out=np.ones_like(k_cur), where=k_cur > 0))
    return (p * scale[:, None, None]).reshape(momenta.shape)


# ---------------------------------------------------------------------------
# timestep sampling

@dataclass(frozen=True)
class TimestepDist:
    """Distribution of the fractional timestep tau in [0, 1].

    kind:
      uniform            tau ~ U(0, 1)
      logit_normal_diff  tau = |sigmoid(z1) - sigmoid(z2)|, z ~ N(loc, scale^2)
      beta_mixture       tau ~ w Beta(a, b) + (1 - w) U(0, 1)

    On top of the draw, each timestep independently collapses to exactly
    zero with probability q_zero.
    """

    kind: str = "beta_mixture"
    q_zero: float = 0.0
    logit_loc: float = -0.4
    logit_scale: float = 1.0
    beta_weight: float = 0.98
    beta_a: float = 1.0
    beta_b: float = 2.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal_diff", "beta_mixture"):
            raise ConfigError(f"unknown timestep distribution {self.kind!r}")
        if not 0.0 <= self.q_zero <= 1.0:
            raise ConfigError("q_zero must lie in [0, 1]")


def sample_timesteps(
    dist: TimestepDist, n: int, dt_max: float, rng: np.random.Generator
) -> np.ndarray:
    """n timesteps in [0, dt_max]; zeros are exact where q_zero fires."""
    if dt_max <= 0.0:
        raise ConfigError("dt_max must be positive")
    if dist.kind == "uniform":
        tau = rng.uniform(0.0, 1.0, size=n)
    elif dist.kind == "logit_normal_diff":
        z = rng.normal(dist.logit_loc, dist.logit_scale, size=(2, n))
        s = 1.0 / (1.0 + np.exp(-z))
        tau = np.abs(s[0] - s[1])
    else:
        pick_beta = rng.uniform(0.0, 1.0, size=n) < dist.beta_weight
        beta = rng.beta(dist.beta_a, dist.beta_b, size=n)
        uni = rng.uniform(0.0, 1.0, size=n)
        tau = np.where(pick_beta, beta, uni)
    dt = tau * dt_max
    if dist.q_zero > 0.0:
        dt[rng.uniform(0.0, 1.0, size=n) < dist.q_zero] = 0.0
    return dt


# ---------------------------------------------------------------------------
# dataset generation pipeline

@dataclass(frozen=True)
class GenConfig:
    """Recipe for one dataset.

    momentum_mode "fixed_energy" closes each sample to e_total exactly and
    re-closes after any projection; "maxwell_boltzmann" draws thermal
    momenta (then projections preserve kinetic energy instead).
    """

    n_samples: int
    box_low: tuple
    box_high: tuple
    e_total: float | None = None
    momentum_mode: str = "fixed_energy"
    temperature_mean: float = 1.0
    temperature_std: float = 0.0
    k_b: float = 1.0
    remove_drift: bool = False
    zero_angular: bool = False
    max_tries_factor: int = 1000

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.momentum_mode not in ("fixed_energy", "maxwell_boltzmann"):
            raise ConfigError(f"unknown momentum_mode {self.momentum_mode!r}")
        if self.momentum_mode == "fixed_energy" and self.e_total is None:
            raise ConfigError("fixed_energy mode needs e_total")


def _generate_part(system: System, cfg: GenConfig, seed: int, shard: int, n: int) -> SampleSet:
    rng = stream(seed, DOMAIN_GEN, shard)
    e_cap = cfg.e_total if cfg.e_total is not None else np.inf
    q = sample_positions_rejection(
        system, e_cap, (cfg.box_low, cfg.box_high), n, rng, cfg.max_tries_factor
    )
    if cfg.momentum_mode == "fixed_energy":
        p = _close_energy_momenta(system, q, cfg.e_total, rng)
    else:
        p = sample_maxwell_boltzmann(
            system.masses,
            system.dims,
            n,
            rng,
            temperature_mean=cfg.temperature_mean,
            temperature_std=cfg.temperature_std,
            k_b=cfg.k_b,
        )
    fixed_e = cfg.momentum_mode == "fixed_energy"
    if fixed_e:
        pot = np.array([systems.potential_energy(system, qi) for qi in q])
        k_shell = np.maximum(cfg.e_total - pot, 0.0)
    if cfg.remove_drift:
        p = remove_drift_and_rescale_batch(p, system.masses, system.dims, k_b=cfg.k_b)
        if fixed_e:
            p = rescale_to_kinetic_batch(p, system.masses, system.dims, k_shell)
    if cfg.zero_angular:
        p = project_zero_angular_momentum_batch(q, p, system.masses, system.dims)
        if fixed_e:
            p = rescale_to_kinetic_batch(p, system.masses, system.dims, k_shell)
    f = np.stack([systems.force(system, qi) for qi in q])
    return SampleSet(system=system, positions=q, momenta=p, forces=f)


def generate(system: System, cfg: GenConfig, seed: int, workers: int = 1) -> SampleSet:
    """Build a dataset, sharded by worker index.

    Shard k draws from stream (seed, GEN, k) and shards are merged in
    index order, so a rerun with the same seed and worker count is
    byte-identical regardless of pool scheduling.  Different worker
    counts partition the streams differently and give different (equally
    valid) draws.
    """
    workers = max(1, int(workers))
    shards = min(workers, cfg.n_samples)
    counts = [
        cfg.n_samples // shards + (1 if k < cfg.n_samples % shards else 0)
        for k in range(shards)
    ]
    if shards == 1:
        parts = [_generate_part(system, cfg, seed, 0, counts[0])]
    else:
        with ProcessPoolExecutor(max_workers=shards) as pool:
            futs = [
                pool.submit(_generate_part, system, cfg, seed, k, counts[k])
                for k in range(shards)
            ]
            parts = [f.result() for f in futs]
    return merge_sample_sets(parts)


# ---------------------------------------------------------------------------
# dataset files

_MAGIC = b"HFMD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIQII")  # magic, version, N, d, samples, tag, pad

_SYSTEM_TAGS = {
    systems.HarmonicOscillator: 1,
    systems.SpringPendulum: 2,
    systems.Barbanis: 3,
    systems.Gravity: 4,
}


def _pack_system(system: System) -> tuple[int, np.ndarray]:
    params = np.zeros(8)
    if isinstance(system, systems.HarmonicOscillator):
        params[:2] = (system.mass, system.omega)
    elif isinstance(system, systems.SpringPendulum):
        params[:4] = (system.mass, system.gravity, system.stiffness, system.rest_length)
    elif isinstance(system, systems.Barbanis):
        params[:3] = (system.omega_x, system.omega_y, system.coupling)
    elif isinstance(system, systems.Gravity):
        params[:2] = (system.g_constant, system.softening)
    else:
        raise UnsupportedSystemError(f"no file tag for {type(system).__name__}")
    return _SYSTEM_TAGS[type(system)], params


def _unpack_system(tag: int, params: np.ndarray, masses: np.ndarray, dims: int) -> System:
    if tag == 1:
        return systems.HarmonicOscillator(mass=params[0], omega=params[1])
    if tag == 2:
        return systems.SpringPendulum(
            mass=params[0], gravity=params[1], stiffness=params[2], rest_length=params[3]
        )
    if tag == 3:
        return systems.Barbanis(omega_x=params[0], omega_y=params[1], coupling=params[2])
    if tag == 4:
        return systems.Gravity(
            particle_masses=tuple(float(m) for m in masses),
            g_constant=params[0],
            softening=params[1],
            dims=dims,
        )
    raise FileFormatError(f"unknown system tag {tag}")


def save_dataset(path, samples: SampleSet) -> None:
    """Write the binary dataset file (format HFMD v1, little endian)."""
    tag, params = _pack_system(samples.system)
    n = systems.particle_count(samples.system)
    d = samples.system.dims
    s = len(samples)
    interleaved = np.empty((s, 3, n * d))
    interleaved[:, 0] = samples.positions
    interleaved[:, 1] = samples.momenta
    interleaved[:, 2] = samples.forces
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d, s, tag, 0))
        fh.write(params.astype("<f8").tobytes())
        fh.write(samples.system.masses.astype("<f8").tobytes())
        fh.write(interleaved.astype("<f8").tobytes())


def load_dataset(path) -> SampleSet:
    """Read an HFMD file back; velocities are recomputed, never trusted."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FileFormatError("truncated dataset header")
        magic, version, n, d, s, tag, _pad = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise FileFormatError(f"unsupported dataset version {version}")
        params = np.frombuffer(fh.read(8 * 8), dtype="<f8")
        masses = np.frombuffer(fh.read(8 * n), dtype="<f8")
        if params.size != 8 or masses.size != n:
            raise FileFormatError("truncated dataset header blocks")
        body = fh.read(8 * s * 3 * n * d)
        if fh.read(1):
            raise FileFormatError("trailing bytes after dataset body")
    data = np.frombuffer(body, dtype="<f8")
    if data.size != s * 3 * n * d:
        raise FileFormatError("truncated dataset body")
    data = data.reshape(s, 3, n * d)
    system = _unpack_system(tag, params, masses, d)
    return SampleSet(
        system=system,
        positions=data[:, 0].copy(),
        momenta=data[:, 1].copy(),
        forces=data[:, 2].copy(),
    )


def export_dataset_csv(path, samples: SampleSet) -> None:
    """One row per sample: x_*, p_*, v_* (recomputed), f_*."""
    nd = systems.n_dof(samples.system)
    cols = (
        [f"x{k}" for k in range(nd)]
        + [f"p{k}" for k in range(nd)]
        + [f"v{k}" for k in range(nd)]
        + [f"f{k}" for k in range(nd)]
    )
    v = samples.velocities()
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(samples)):
            row = np.concatenate(
                [samples.positions[i], samples.momenta[i], v[i], samples.forces[i]]
            )
            fh.write(",".join(repr(float(val)) for val in row) + "\n")
