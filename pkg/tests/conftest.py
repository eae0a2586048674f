"""Shared fixtures: trained models for the acceptance suite, cached on disk
so repeated runs skip the training step.

Set PHASEFLOW_TEST_CACHE to relocate the cache; delete it to force
retraining.  Every recipe below is deterministic (fixed seeds throughout),
so a cache hit and a fresh run produce identical networks.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

from phaseflow import sampling, systems
from phaseflow.integrate import make_vv_stepper, rollout
from phaseflow.net import FlowFieldNet, NetConfig, load_checkpoint, save_checkpoint
from phaseflow.rng import DOMAIN_TRAIN_INIT, stream
from phaseflow.sampling import GenConfig, SampleSet, TimestepDist
from phaseflow.train import TrainConfig, train

CACHE_DIR = Path(
    os.environ.get("PHASEFLOW_TEST_CACHE", str(Path(__file__).parent / ".cache"))
)


def _cached_net(name: str, build):
    path = CACHE_DIR / f"{name}.hfmc"
    if path.exists():
        return load_checkpoint(path)
    net = build()
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, net)
    return net


def _train_single_particle(system, dims, box, e_total):
    data = sampling.generate(
        system,
        GenConfig(n_samples=20000, box_low=box[0], box_high=box[1], e_total=e_total),
        seed=0,
    )
    net = FlowFieldNet.init(
        NetConfig(count=1, dims=dims, dt_max=2.5, width=128),
        stream(0, DOMAIN_TRAIN_INIT),
    )
    cfg = TrainConfig(
        epochs=150,
        batch_size=512,
        lr_max=3e-4,
        timestep_dist=TimestepDist(kind="beta_mixture", q_zero=0.25),
    )
    train(net, data, cfg, seed=0)
    return net


@pytest.fixture(scope="session")
def oscillator_model():
    return _cached_net(
        "osc_w128_e150_q025_s0",
        lambda: _train_single_particle(
            systems.HarmonicOscillator(), 1, ((-2.0,), (2.0,)), 0.5
        ),
    )


@pytest.fixture(scope="session")
def barbanis_model():
    return _cached_net(
        "barb_w128_e150_q025_s0",
        lambda: _train_single_particle(
            systems.Barbanis(), 2, ((-2.0, -2.0), (2.0, 2.0)), 1.5
        ),
    )


# gravity testbed: 4 equal bodies, softened, tightly bound so that velocity
# Verlet at dt=0.05 under-resolves close encounters (the encounter timescale
# at softening 0.05 is ~0.01)

GRAVITY_N = 4
GRAVITY_SYSTEM = systems.Gravity(particle_masses=(1.0,) * GRAVITY_N, softening=0.05)
_GRAVITY_GEN = dict(
    box_low=(-1.0,) * 3,
    box_high=(1.0,) * 3,
    e_total=-4.0,
    remove_drift=True,
    zero_angular=True,
)


def com_center(flat):
    """Shift each flat position row so the arithmetic particle mean is zero
    (equal masses: this is the center of mass)."""
    r = flat.reshape(-1, GRAVITY_N, 3)
    return (r - r.mean(axis=1, keepdims=True)).reshape(flat.shape)


def _gravity_training_set():
    # decorrelated snapshots of the evolved ensemble; box-rejection samples
    # at V <= E would be dominated by deep-contact force outliers the test
    # trajectories never visit
    sys_ = GRAVITY_SYSTEM
    vv = make_vv_stepper(sys_)
    ics = sampling.generate(
        sys_, GenConfig(n_samples=500, **_GRAVITY_GEN), seed=42
    )
    xs, ps = [], []
    for i in range(len(ics)):
        s0 = systems.make_state(sys_, ics.positions[i], ics.momenta[i])
        fine = rollout(vv, sys_, s0, 0.001, 4000, sanity_box=1e6)
        if fine.status != "ok":
            continue
        sel = np.arange(20, 4001, 40)
        xs.append(fine.positions[sel])
        ps.append(fine.momenta[sel])
    x = com_center(np.concatenate(xs))
    p = np.concatenate(ps)
    f = np.stack([systems.force(sys_, xi) for xi in x])
    return SampleSet(system=sys_, positions=x, momenta=p, forces=f)


def _train_gravity():
    # the force tail at softening 0.05 destabilizes the bootstrap at the
    # lr/clip defaults; a gentler optimizer keeps the target bounded
    data = _gravity_training_set()
    net = FlowFieldNet.init(
        NetConfig(count=GRAVITY_N, dims=3, dt_max=0.1, width=256),
        stream(0, DOMAIN_TRAIN_INIT),
    )
    cfg = TrainConfig(
        epochs=100,
        batch_size=128,
        lr_max=1e-4,
        clip_norm=1.0,
        timestep_dist=TimestepDist(kind="beta_mixture", q_zero=0.25),
    )
    train(net, data, cfg, seed=0)
    return net


@pytest.fixture(scope="session")
def gravity_model():
    return _cached_net("grav_n4_s005_w256_e100_lr1e4_s0", _train_gravity)


@pytest.fixture(scope="session")
def gravity_bridge():
    """32 held-out states at t=3 plus reference endpoints at t=4, in the
    COM frame of the t=3 state."""
    sys_ = GRAVITY_SYSTEM
    vv = make_vv_stepper(sys_)
    ics = sampling.generate(
        sys_, GenConfig(n_samples=32, **_GRAVITY_GEN), seed=1000
    )
    starts, ref_ends = [], []
    for i in range(len(ics)):
        s0 = systems.make_state(sys_, ics.positions[i], ics.momenta[i])
        fine = rollout(vv, sys_, s0, 0.0005, 8000, sanity_box=1e6)
        assert fine.status == "ok"
        b_x = com_center(fine.positions[6000][None])[0]
        shift = fine.positions[6000] - b_x
        starts.append(systems.make_state(sys_, b_x, fine.momenta[6000]))
        ref_ends.append((fine.positions[8000] - shift).reshape(GRAVITY_N, 3))
    return starts, ref_ends


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion after the run

def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    if mod is None or not getattr(mod, "REPORT", None):
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for num in sorted(mod.REPORT):
        passed, text = mod.REPORT[num]
        word = "PASS" if passed else "FAIL"
        tw.write_line(f"criterion {num}: {word} - {text}")
