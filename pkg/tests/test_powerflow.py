import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinmg.netmodel import DgParams, Line, NetworkModel, build_admittance
from pinmg.powerflow import (
    MaxIterationsExceeded,
    PfSettings,
    PfUnknowns,
    fd_jacobian,
    mismatch,
    pack_unknowns,
    report_csv,
    solve_power_flow,
    unpack_unknowns,
)


def test_pack_lengths(net38):
    u = PfUnknowns.flat_start(net38, PfSettings())
    assert pack_unknowns(u).size == 85
    one = NetworkModel(2, (0,), (DgParams(0.01, 0.05),), (Line(0, 1, 0.1, 0.1),))
    assert pack_unknowns(PfUnknowns.flat_start(one, PfSettings())).size == 4


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_pack_roundtrip(seed):
    w = np.random.default_rng(seed).normal(size=85)
    assert np.array_equal(pack_unknowns(unpack_unknowns(w, 10, 38)), w)


def test_unpack_rejects_wrong_length():
    with pytest.raises(ValueError):
        unpack_unknowns(np.zeros(84), 10, 38)


def no_load_net():
    return NetworkModel(
        n_bus=3,
        dg_buses=(0, 2),
        dgs=(DgParams(0.01, 0.05), DgParams(0.02, 0.05)),
        lines=(Line(0, 1, 0.02, 0.04), Line(1, 2, 0.03, 0.05)),
        loads={},
        virtual_resistance=math.inf,
    )


def test_no_flow_identity():
    net = no_load_net()
    u = PfUnknowns.flat_start(net, PfSettings())
    assert np.max(np.abs(mismatch(u, net))) < 1e-14
    sol = solve_power_flow(net)
    assert np.allclose(sol.P_G, 0, atol=1e-12) and np.allclose(sol.Q_G, 0, atol=1e-12)
    assert np.allclose(sol.V_nl, 1.0, atol=1e-12) and np.allclose(sol.omega_nl, 1.0, atol=1e-12)


def polar_mismatch_oracle(net, w, s):
    """Element-wise polar-form evaluation of the mismatch for a small case."""
    m, n = net.m, net.n_bus
    u = unpack_unknowns(w, m, n)
    Vm = [s.V_ref] * n
    for i, b in enumerate(net.non_dg_buses):
        Vm[b] = u.V_load[i]
    th = [0.0] * n
    for i, b in enumerate([b for b in range(n) if b != net.reference_bus]):
        th[b] = u.theta[i]
    Y = build_admittance(net, s.omega_ref)
    P_cal, Q_cal = [], []
    for k in range(n):
        p = q = 0.0
        for j in range(n):
            mag, ang = abs(Y[k, j]), math.atan2(Y[k, j].imag, Y[k, j].real)
            p += Vm[k] * Vm[j] * mag * math.cos(th[k] - th[j] - ang)
            q += Vm[k] * Vm[j] * mag * math.sin(th[k] - th[j] - ang)
        P_cal.append(p)
        Q_cal.append(q)
    P_ld, Q_ld = [0.0] * n, [0.0] * n
    for b, ld in net.loads.items():
        z2 = ld.R**2 + (s.omega_ref * ld.L) ** 2
        P_ld[b] = Vm[b] ** 2 * ld.R / z2
        Q_ld[b] = Vm[b] ** 2 * s.omega_ref * ld.L / z2
    PG = [(u.omega_nl[k] - s.omega_ref) / net.dgs[k].mp for k in range(m)]
    QG = [(u.V_nl[k] - s.V_ref) / net.dgs[k].nq for k in range(m)]
    Pc, Qc = [0.0] * n, [0.0] * n
    for k, b in enumerate(net.dg_buses):
        d = net.dgs[k]
        i2 = ((P_cal[b] + P_ld[b]) ** 2 + (Q_cal[b] + Q_ld[b]) ** 2) / Vm[b] ** 2
        Pc[b] = d.rc * i2
        Qc[b] = s.omega_ref * d.Lc * i2
    dP, dQ = [], []
    dg_of = {b: k for k, b in enumerate(net.dg_buses)}
    for b in range(n):
        if b == net.reference_bus:
            continue
        pg = PG[dg_of[b]] - Pc[b] if b in dg_of else 0.0
        qg = QG[dg_of[b]] - Qc[b] if b in dg_of else 0.0
        dP.append(pg - P_ld[b] - P_cal[b])
        dQ.append(qg - Q_ld[b] - Q_cal[b])
    P_a = sum(P_ld) + sum(P_cal) + sum(Pc) - sum(PG)
    Q_a = sum(Q_ld) + sum(Q_cal) + sum(Qc) - sum(QG)
    share = [net.dgs[0].mp * PG[0] - net.dgs[k].mp * PG[k] for k in range(1, m)]
    return np.array([P_a, Q_a, *dP, *dQ, *share])


def test_mismatch_matches_independent_evaluation(net4, pf4):
    s = pf4.settings
    w = pack_unknowns(pf4.unknowns).copy()
    w[4] += 1e-3  # angle of bus 2
    got = mismatch(w, net4, s)
    assert np.max(np.abs(got - polar_mismatch_oracle(net4, w, s))) < 1e-12
    assert np.max(np.abs(got)) > 1e-4  # the perturbation is visible


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_mismatch_oracle_random_points(seed):
    from pinmg.netmodel import packaged_network

    net = packaged_network("bus4")
    s = PfSettings()
    w = pack_unknowns(PfUnknowns.flat_start(net, s)) + 0.01 * np.random.default_rng(seed).normal(size=9)
    assert np.max(np.abs(mismatch(w, net, s) - polar_mismatch_oracle(net, w, s))) < 1e-11


def damped_fixed_point_oracle(net, s, iters=20000, alpha=0.5):
    """Solve mismatch = 0 by damped Gauss-Newton with a frozen Jacobian: no shared step logic."""
    w = pack_unknowns(PfUnknowns.flat_start(net, s))
    f = lambda z: mismatch(z, net, s)
    J = fd_jacobian(f, w, 1e-7)
    Jinv = np.linalg.inv(J)
    for _ in range(iters):
        step = Jinv @ f(w)
        w = w - alpha * step
        if np.max(np.abs(f(w))) < 1e-12:
            break
    return w


def test_4bus_against_oracle(net4, pf4):
    s = pf4.settings
    w_or = damped_fixed_point_oracle(net4, s)
    assert np.max(np.abs(w_or - pack_unknowns(pf4.unknowns))) < 1e-8
    assert pf4.final_mismatch_norm < 1e-8
    mpP = net4.mp() * pf4.P_G
    assert abs(mpP[0] - mpP[1]) < 1e-8


def check_balance(sol, net, tol):
    assert sol.final_mismatch_norm <= sol.settings.tolerance
    assert abs(sol.P_G.sum() - (sol.P_load + sol.P_loss)) <= 10 * tol
    assert abs(sol.Q_G.sum() - (sol.Q_load + sol.Q_loss)) <= 10 * tol
    mpP = net.mp() * sol.P_G
    assert mpP.max() - mpP.min() <= 10 * tol
    assert sol.omega_nl.max() - sol.omega_nl.min() <= 10 * tol


def test_balance_4(pf4, net4):
    check_balance(pf4, net4, 1e-8)


def test_balance_38(pf38, net38):
    check_balance(pf38, net38, 1e-8)
    assert pf38.iterations <= 10


@pytest.mark.parametrize("scale", [0.5, 0.8, 1.5])
def test_balance_under_load_scaling(net38, scale):
    net = net38.scale_loads(list(net38.loads), scale)
    check_balance(solve_power_flow(net), net, 1e-8)


def test_fd_jacobian_richardson(net4, pf4):
    w = pack_unknowns(pf4.unknowns)
    f = lambda z: mismatch(z, net4, pf4.settings)
    J1 = fd_jacobian(f, w, 1e-3)
    J2 = fd_jacobian(f, w, 5e-4)
    J4 = fd_jacobian(f, w, 2.5e-4)
    e1 = np.max(np.abs(J1 - J2))
    e2 = np.max(np.abs(J2 - J4))
    assert e1 / e2 >= 3.0


def test_max_iterations(net38):
    with pytest.raises(MaxIterationsExceeded):
        solve_power_flow(net38, PfSettings(max_iterations=1))


def test_warm_start(net38, pf38):
    sol = solve_power_flow(net38, initial=pf38.unknowns)
    assert sol.iterations <= 1


def test_report_columns(pf38, net38):
    text = report_csv(pf38, net38)
    rows = text.splitlines()
    assert rows[0] == "bus,V,theta_deg,P,Q,V_nl"
    assert len(rows) == 39
    ref = rows[net38.reference_bus + 1].split(",")
    assert float(ref[2]) == 0.0 and float(ref[1]) == pytest.approx(1.0)
