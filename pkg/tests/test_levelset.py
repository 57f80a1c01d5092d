"""Sphere geometry, descent loop statuses, trace format, persistence."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from rtopt.errors import FormatError, UsageError
from rtopt.levelset import (LEVELSET_FORMAT, STATUS_CONVERGED,
                            STATUS_MAX_ITERATIONS, STATUS_STALLED,
                            TRACE_HEADER, Evaluation, FieldGeometry,
                            LevelSetOptions, TraceRow, angle_between,
                            check_optimality, drive, load_levelset, normalize,
                            save_levelset, slerp_update)


@pytest.fixture
def geo():
    return FieldGeometry(sp.identity(16, format="csr"))


def unit(v, geo):
    return normalize(np.asarray(v, dtype=float), geo)


def test_normalize_and_angles(geo):
    v = np.zeros(16)
    v[0] = 3.0
    u = normalize(v, geo)
    assert geo.norm(u) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(UsageError):
        normalize(np.zeros(16), geo)

    w = np.zeros(16)
    w[1] = 2.0
    assert angle_between(u, w, geo) == pytest.approx(np.pi / 2)
    assert angle_between(u, 5.0 * v, geo) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(UsageError):
        angle_between(u, np.zeros(16), geo)


def test_slerp_properties(geo):
    rng = np.random.default_rng(12)
    for _ in range(20):
        a = unit(rng.standard_normal(16), geo)
        b = unit(rng.standard_normal(16), geo)
        theta = angle_between(a, b, geo)
        for s in (0.1, 0.5, 1.0):
            c = slerp_update(a, b, s, theta)
            assert geo.norm(c) == pytest.approx(1.0, abs=1e-12)
            assert angle_between(a, c, geo) == pytest.approx(s * theta,
                                                             abs=1e-9)
            # stays in the plane spanned by the endpoints
            b_perp = normalize(b - geo.inner(b, a) * a, geo)
            proj = geo.inner(c, a) * a + geo.inner(c, b_perp) * b_perp
            assert np.linalg.norm(c - proj) <= 1e-12
    # full step lands on the target, zero angle copies the input
    c = slerp_update(a, b, 1.0, angle_between(a, b, geo))
    assert np.allclose(c, b, atol=1e-12)
    c = slerp_update(a, b, 0.5, 0.0)
    assert np.array_equal(c, a) and c is not a


def test_slerp_rejections(geo):
    a = unit(np.arange(1.0, 17.0), geo)
    with pytest.raises(UsageError):
        slerp_update(a, -a, 0.5, np.pi)
    with pytest.raises(UsageError):
        slerp_update(a, a, 0.0, 0.4)
    with pytest.raises(UsageError):
        slerp_update(a, a, 1.5, 0.4)


def test_check_optimality_dead_band():
    psi = np.array([1.0, -1.0, 1e-12, 2.0])
    g = np.array([3.0, -4.0, 7.0, -1.0])
    rep = check_optimality(psi, g)
    assert rep.checked == 3 and rep.skipped == 1
    assert rep.agree_fraction == pytest.approx(2.0 / 3.0)
    assert not rep.ok
    assert check_optimality(psi, psi).ok
    assert check_optimality(np.zeros(4), g).checked == 0
    assert check_optimality(np.zeros(4), g).ok


class LinearObjective:
    """J(psi) = -<m, psi>, constant sensitivity field m."""

    def __init__(self, m, geo):
        self.m = m
        self.geo = geo
        self.calls = 0

    def __call__(self, psi):
        self.calls += 1
        return Evaluation(-self.geo.inner(self.m, psi), 2.5 * self.m)


def test_drive_converges_on_linear_objective(geo):
    rng = np.random.default_rng(0)
    m = unit(rng.standard_normal(16), geo)
    psi0 = unit(rng.standard_normal(16), geo)
    norms = []
    res = drive(LinearObjective(m, geo), psi0, geo,
                snapshot=lambda k, psi: norms.append(geo.norm(psi)))
    assert res.status == STATUS_CONVERGED
    assert res.value == pytest.approx(-1.0, abs=1e-3)
    assert angle_between(res.psi, m, geo) < np.radians(2.0)
    assert np.max(np.abs(np.array(norms) - 1.0)) <= 1e-10
    accepted = [r.value for r in res.trace if r.accepted]
    assert np.all(np.diff(accepted) < 0)
    assert res.evaluations == len(res.trace)
    assert res.trace[0].k == 0 and res.trace[0].accepted


def test_drive_stalls_on_flat_objective(geo):
    class Flat:
        def __call__(self, psi):
            target = np.zeros(16)
            target[1] = 1.0
            return Evaluation(5.0, target)

    psi0 = np.zeros(16)
    psi0[0] = 1.0
    res = drive(Flat(), psi0, geo)
    assert res.status == STATUS_STALLED
    assert res.iterations == 0
    assert all(not r.accepted for r in res.trace[1:])
    # the step fraction decays toward its floor over the rejections
    steps = [r.step for r in res.trace[1:]]
    assert steps[0] == 0.5 and steps[-1] == pytest.approx(0.05)


def test_drive_iteration_cap(geo):
    rng = np.random.default_rng(1)
    m = unit(rng.standard_normal(16), geo)
    psi0 = unit(rng.standard_normal(16), geo)
    opts = LevelSetOptions(max_iterations=2, angle_tol_deg=1e-9)
    res = drive(LinearObjective(m, geo), psi0, geo, opts)
    assert res.status == STATUS_MAX_ITERATIONS
    assert res.iterations == 2


def test_drive_realigns_without_evaluating(geo):
    # every slerp iterate keeps the all-positive sign pattern, so the design
    # never changes and the loop converges on realignments alone
    rng = np.random.default_rng(3)
    m = unit(rng.uniform(0.5, 1.5, 16), geo)

    class Keyed(LinearObjective):
        def design_key(self, psi):
            return (psi > 0).tobytes()

    ev = Keyed(m, geo)
    psi0 = unit(rng.uniform(0.5, 1.5, 16), geo)
    res = drive(ev, psi0, geo)
    assert res.status == STATUS_CONVERGED
    assert res.evaluations == 1 and ev.calls == 1
    assert res.iterations == 0
    assert len(res.trace) == 1
    assert angle_between(res.psi, m, geo) < np.radians(2.0)


def test_trace_format():
    row = TraceRow(0, 1.0, 2.0, 0.5, True, 0.125, None)
    assert row.as_csv() == "0,1.0,2.0,0.5,1,0.125,"
    val = -1625.0112451259006
    row = TraceRow(3, val, 12.25, 0.75, False, 0.125, np.array([1.5, -2.0]))
    fields = row.as_csv().split(",")
    assert float(fields[1]) == val
    assert fields[4] == "0"
    assert fields[6] == "1.5;-2.0"
    assert TRACE_HEADER == "k,J,theta_deg,s,accepted,wall_seconds,q_star"


def test_levelset_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    psi = rng.standard_normal(10)
    ids = rng.permutation(40)[:10]
    path = tmp_path / "state.rtols"
    save_levelset(psi, ids, "deadbeef01", path, iteration=7, value=-3.5)
    back, back_ids, meta = load_levelset(path, expect_fingerprint="deadbeef01")
    assert np.array_equal(back, psi)
    assert np.array_equal(back_ids, ids)
    assert meta == {"fingerprint": "deadbeef01", "iteration": 7,
                    "value": -3.5}
    with pytest.raises(UsageError):
        load_levelset(path, expect_fingerprint="other")
    bad = tmp_path / "bad.rtols"
    bad.write_text("RTOTD1\n")
    with pytest.raises(FormatError):
        load_levelset(bad)
    # value defaults to nan when not recorded
    save_levelset(psi, ids, "deadbeef01", path)
    assert np.isnan(load_levelset(path)[2]["value"])
