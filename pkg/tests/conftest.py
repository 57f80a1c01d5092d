"""Shared fixtures: one coarse machine sector and one set of linear tables.

Everything heavy is session scoped. The small sector geometry operates
strongest near a -60 degree load angle (mapped by sweeping), so the fast
configurations here center the phase uncertainty there.
"""
from __future__ import annotations

import numpy as np
import pytest

from rtopt.machine import MachineProblem, MaterialSpec, Scenario
from rtopt.mesh import MachineGeometry, build_machine_mesh
from rtopt.robust import IntervalSet
from rtopt.topderiv import ExteriorConfig, precompute_tables

TOY_Q_HAT = np.array([np.deg2rad(-60.0)])
TOY_INTERVAL = (np.deg2rad(-75.0), np.deg2rad(-45.0))


@pytest.fixture(scope="session")
def toy_mesh():
    return build_machine_mesh(MachineGeometry(target_nodes=1200))


@pytest.fixture(scope="session")
def linear_spec():
    return MaterialSpec(iron_linear=True)


@pytest.fixture(scope="session")
def phase_set():
    return IntervalSet([TOY_INTERVAL[0]], [TOY_INTERVAL[1]])


@pytest.fixture(scope="session")
def toy_problem(toy_mesh, linear_spec, phase_set):
    """Linear iron, one rotor position, phase-angle uncertainty."""
    scen = Scenario(name="ANG", n_positions=1, q_hat=TOY_Q_HAT.copy(),
                    uncertainty=phase_set)
    return MachineProblem(toy_mesh, linear_spec, scen)


@pytest.fixture(scope="session")
def linear_tables(linear_spec):
    # t_max covers the largest design-region flux the linear law reaches
    cfg = ExteriorConfig(target_nodes=4000, t_max=12.0, n_t=13)
    return precompute_tables(linear_spec, cfg)
