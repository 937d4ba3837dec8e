import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinmg import _backend
from pinmg.control import ControlGains
from pinmg.cybergraph import CommGraph
from pinmg.dynamics import (
    F,
    DynamicsError,
    RhsData,
    RhsModel,
    StateLayout,
    branch_load_derivs,
    extract_steady_state,
    inner_controllers,
    lcl_derivs,
    node_voltages,
    outputs,
    power_controller_derivs,
    rotate_frame,
    system_derivs,
)
from pinmg.netmodel import DgParams, Line, LoadRL, NetworkModel
from pinmg.powerflow import solve_power_flow
from pinmg.simulate import fd_state_matrix

WB = 2 * math.pi * 50


# ---------------------------------------------------------------- power controller


def test_power_controller_zero_current():
    dP, dQ, *_ = power_controller_derivs(1.0 + 0j, 0j, 0.0, 0.0, 1.0, 1.0, 1.0 + 0j, 0.01, 0.05, 31.4, 0.002, 0.008)
    assert dP == 0.0 and dQ == 0.0


def test_power_controller_droop_frequency():
    mp = 0.0008 / 0.5
    _, _, omega, _, _ = power_controller_derivs(1.0 + 0j, 0j, 0.5, 0.0, 1.0008, 1.0, 1.0 + 0j, mp, 0.05, 31.4, 0.0, 0.01)
    assert omega == pytest.approx(1.0, abs=1e-15)


def test_power_controller_instantaneous_powers():
    wc = 10.0
    dP, dQ, *_ = power_controller_derivs(1.0 + 0j, 0.5 - 0.2j, 0.0, 0.0, 1.0, 1.0, 1.0 + 0j, 0.01, 0.05, wc, 0.0, 0.01)
    assert dP / wc == pytest.approx(0.5) and dQ / wc == pytest.approx(0.2)


def test_voltage_reference_without_current_is_command():
    *_, V_cmd, vo_ref = power_controller_derivs(
        1.0 + 0j, 0j, 0.0, 0.1, 1.02, 1.03, 0.98 + 0.05j, 0.01, 0.05, 31.4, 0.002, 0.008
    )
    assert V_cmd == pytest.approx(1.03 - 0.05 * 0.1)
    assert vo_ref.real == pytest.approx(V_cmd) and vo_ref.imag == 0.0


# ---------------------------------------------------------------- inner loops


def test_inner_proportional_chain():
    dphi, dgam, vi = inner_controllers(
        0j, 0.1 + 0j, 0j, 0j, 0j, 0j, Kpv=1.0, Kiv=0.0, Kpc=1.0, Kic=0.0, KF=0.0, Cf=0.2, Lf=0.03, decouple=False
    )
    assert dphi == pytest.approx(0.1) and dgam == pytest.approx(0.1) and vi == pytest.approx(0.1)


def test_inner_tracking_fixed_point():
    d = DgParams(0.01, 0.05)
    vo, io = 0.99 + 0j, 0.3 - 0.1j
    ii = io + 1j * d.Cf * vo
    vi = vo + (d.rf + 1j * d.Lf) * ii
    phi = (ii - d.KF * io - 1j * d.Cf * vo) / d.Kiv
    gam = (vi - 1j * d.Lf * ii) / d.Kic
    dphi, dgam, vi_out = inner_controllers(vo, vo, io, ii, phi, gam, d.Kpv, d.Kiv, d.Kpc, d.Kic, d.KF, d.Cf, d.Lf)
    assert abs(dphi) < 1e-15 and abs(dgam) < 1e-15
    assert vi_out == pytest.approx(vi, abs=1e-14)


# ---------------------------------------------------------------- LCL filter


def test_lcl_all_zero():
    out = lcl_derivs(0j, 0j, 0j, 0j, 0j, 1.0, 0.03, 0.01, 0.2, 0.008, 0.002, WB)
    assert all(v == 0 for v in out)


def test_lcl_dc_resistive_steady_state():
    rf, rc = 0.01, 0.002
    i = 0.4
    vb = 0.9
    vo = vb + rc * i
    vi = vo + rf * i
    out = lcl_derivs(i + 0j, vo + 0j, i + 0j, vi + 0j, vb + 0j, 0.0, 0.03, rf, 0.2, 0.008, rc, WB)
    assert max(abs(v) for v in out) < 1e-12


def lcl_real_transcription(iid, iiq, vod, voq, iod, ioq, vid, viq, vbd, vbq, w, Lf, rf, Cf, Lc, rc, wb):
    """Second, component-wise transcription of the filter equations."""
    return (
        wb / Lf * (-rf * iid + vid - vod) + wb * w * iiq,
        wb / Lf * (-rf * iiq + viq - voq) - wb * w * iid,
        wb / Cf * (iid - iod) + wb * w * voq,
        wb / Cf * (iiq - ioq) - wb * w * vod,
        wb / Lc * (-rc * iod + vod - vbd) + wb * w * ioq,
        wb / Lc * (-rc * ioq + voq - vbq) - wb * w * iod,
    )


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_lcl_double_entry(seed):
    r = np.random.default_rng(seed).normal(size=11)
    iid, iiq, vod, voq, iod, ioq, vid, viq, vbd, vbq, w = r
    par = (0.0292, 0.0069, 0.228, 0.0076, 0.0021)
    dii, dvo, dio = lcl_derivs(iid + 1j * iiq, vod + 1j * voq, iod + 1j * ioq, vid + 1j * viq, vbd + 1j * vbq, w, *par, WB)
    ref = lcl_real_transcription(iid, iiq, vod, voq, iod, ioq, vid, viq, vbd, vbq, w, *par, WB)
    got = (dii.real, dii.imag, dvo.real, dvo.imag, dio.real, dio.imag)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-9)


# ---------------------------------------------------------------- lines and loads


def test_line_equal_voltages_zero_current():
    v = np.array([1.0 + 0.1j, 1.0 + 0.1j])
    dl, _ = branch_load_derivs(
        np.array([0j]), np.zeros(0, complex), v, np.array([0]), np.array([1]), np.array([0.1]), np.array([0.2]),
        np.zeros(0, int), np.zeros(0), np.zeros(0), 1.0, WB,
    )  # fmt: skip
    assert dl[0] == 0


@given(st.floats(0.5, 1.5), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.001, 1), st.floats(0.001, 1))
@settings(max_examples=50, deadline=None)
def test_branch_phasor_steady_state(w, i_re, i_im, R, L):
    i = complex(i_re, i_im)
    v_to = 0.95 - 0.02j
    v_from = v_to + complex(R, w * L) * i
    v = np.array([v_from, v_to])
    i_load = np.array([i])
    v_load = complex(R, w * L) * i
    dl, _ = branch_load_derivs(
        np.array([i]), np.zeros(0, complex), v, np.array([0]), np.array([1]), np.array([R]), np.array([L]),
        np.zeros(0, int), np.zeros(0), np.zeros(0), w, WB,
    )  # fmt: skip
    _, dld = branch_load_derivs(
        np.zeros(0, complex), i_load, np.array([v_load]), np.zeros(0, int), np.zeros(0, int), np.zeros(0),
        np.zeros(0), np.array([0]), np.array([R]), np.array([L]), w, WB,
    )  # fmt: skip
    assert abs(dl[0]) <= 1e-12 * WB / L and abs(dld[0]) <= 1e-12 * WB / L


# ---------------------------------------------------------------- node voltages


def test_node_voltages_zero():
    v = node_voltages(np.zeros(1, complex), np.array([0]), np.zeros(1, complex), np.array([0]), np.array([1]),
                      np.zeros(0, complex), np.zeros(0, int), 2, 1000.0)  # fmt: skip
    assert np.all(v == 0)


def test_node_voltage_ohm():
    v = node_voltages(np.array([1e-3 + 0j]), np.array([0]), np.zeros(0, complex), np.zeros(0, int),
                      np.zeros(0, int), np.zeros(0, complex), np.zeros(0, int), 1, 1000.0)  # fmt: skip
    assert v[0] == pytest.approx(1.0)


def test_node_voltages_kirchhoff_and_linearity():
    rng = np.random.default_rng(3)
    io = rng.normal(size=2) + 1j * rng.normal(size=2)
    il = rng.normal(size=3) + 1j * rng.normal(size=3)
    ild = rng.normal(size=2) + 1j * rng.normal(size=2)
    args = (io, np.array([0, 3]), il, np.array([0, 1, 2]), np.array([1, 2, 3]), ild, np.array([1, 2]), 4)
    v1 = node_voltages(*args, 1000.0)
    v2 = node_voltages(*args, 2000.0)
    net = io.sum() - ild.sum()  # line currents cancel between their ends
    assert abs((v1 / 1000.0).sum() - net) < 1e-14
    assert np.allclose(v2, 2 * v1, rtol=1e-15)


def test_node_voltages_reject_infinite_rn():
    with pytest.raises(DynamicsError):
        node_voltages(np.zeros(1, complex), np.array([0]), np.zeros(0, complex), np.zeros(0, int), np.zeros(0, int),
                      np.zeros(0, complex), np.zeros(0, int), 1, math.inf)  # fmt: skip


# ---------------------------------------------------------------- assembled model


def test_layout(net38):
    lay = StateLayout.of(net38)
    assert lay.size == 15 * 10 + 2 * len(net38.lines) + 2 * len(net38.loads)
    assert len(lay.names()) == lay.size
    assert lay.names()[lay.index(3, "omega_nl")] == "dg4.omega_nl"


@pytest.mark.parametrize("case", ["4", "38"])
def test_steady_state_is_equilibrium(case, request):
    net = request.getfixturevalue(f"net{case}")
    x = request.getfixturevalue(f"x{case}")
    graph, pins, gains = request.getfixturevalue(f"ctrl{case}")
    for backend in ["numpy"] + (["compiled"] if _backend.HAVE_COMPILED else []):
        dx = system_derivs(0.0, x, net, graph, pins, gains, backend)
        assert np.max(np.abs(dx)) <= 1e-6, backend


def test_steady_state_integrators_at_rest(net4, x4, ctrl4):
    dx = system_derivs(0.0, x4, net4, *ctrl4, "numpy")
    lay = StateLayout.of(net4)
    g = lay.dg(dx)
    assert np.max(np.abs(g[:, [F["phi_d"], F["phi_q"], F["gamma_d"], F["gamma_q"]]])) < 1e-6


def test_steady_state_frequencies_are_reference(net38, x38, ctrl38):
    d = RhsData.build(net38, *ctrl38)
    o = outputs(x38, d)
    assert np.allclose(o.omega, 1.0, atol=1e-12)
    assert np.allclose(o.V_bus, 1.0, atol=1e-9)


def test_reference_angle_is_frozen(net38, x38, ctrl38):
    rng = np.random.default_rng(0)
    x = x38 * (1 + 1e-3 * rng.normal(size=x38.size))
    dx = system_derivs(0.0, x, net38, *ctrl38, "numpy")
    lay = StateLayout.of(net38)
    assert dx[lay.index(net38.reference_dg, "delta")] == 0.0
    # other angles move with the frequency difference to the reference DG
    o = outputs(x, RhsData.build(net38, *ctrl38))
    k = 3
    assert dx[lay.index(k, "delta")] == pytest.approx(WB * (o.omega[k] - o.omega[net38.reference_dg]), rel=1e-12)


def test_zero_load_steady_state():
    net = NetworkModel(
        n_bus=3,
        dg_buses=(0, 2),
        dgs=(DgParams(0.01, 0.05), DgParams(0.02, 0.05)),
        lines=(Line(0, 1, 0.02, 0.04), Line(1, 2, 0.03, 0.05)),
        loads={},
        virtual_resistance=1e9,
    )
    x = extract_steady_state(solve_power_flow(net), net)
    lay = StateLayout.of(net)
    assert np.max(np.abs(lay.lines(x))) < 1e-8


def test_extract_rejects_unconverged(net4, pf4):
    bad = replace(pf4, final_mismatch_norm=1.0)
    with pytest.raises(DynamicsError):
        extract_steady_state(bad, net4)


def test_dimension_mismatch(net4, x4, ctrl4):
    with pytest.raises(DynamicsError):
        system_derivs(0.0, x4[:-1], net4, *ctrl4)
    with pytest.raises(DynamicsError):
        RhsData.build(net4, CommGraph.from_edges(3, [(0, 1)]), np.zeros(3), ControlGains())


def test_frame_covariance(net38, x38, ctrl38):
    rng = np.random.default_rng(1)
    x = x38 * (1 + 1e-3 * rng.normal(size=x38.size))
    lay = StateLayout.of(net38)
    f = RhsModel.build(net38, *ctrl38, backend="numpy")
    d0 = f(0.0, x)
    xr = rotate_frame(x, lay, 0.7)
    d1 = f(0.0, xr)
    n_dg = 15 * lay.m
    dg0, dg1 = d0[:n_dg].reshape(lay.m, 15), d1[:n_dg].reshape(lay.m, 15)
    assert np.max(np.abs(dg0 - dg1)) <= 1e-10 * np.max(np.abs(d0))
    mag0 = np.hypot(d0[n_dg::2], d0[n_dg + 1 :: 2])
    mag1 = np.hypot(d1[n_dg::2], d1[n_dg + 1 :: 2])
    assert np.max(np.abs(mag0 - mag1)) <= 1e-10 * np.max(np.abs(d0))
    o0, o1 = f.outputs(x), f.outputs(xr)
    assert np.allclose(o0.P, o1.P, atol=1e-12) and np.allclose(o0.Q, o1.Q, atol=1e-12)


@pytest.mark.skipif(not _backend.HAVE_COMPILED, reason="compiled kernel not built")
@given(st.integers(0, 2**32 - 1), st.sampled_from(["4", "38"]))
@settings(max_examples=30, deadline=None)
def test_backends_agree(seed, case):
    from pinmg.netmodel import packaged_network
    from pinmg.cybergraph import ring_lattice

    net = packaged_network(f"bus{case}")
    x0 = _steady(case)
    rng = np.random.default_rng(seed)
    x = x0 * (1 + 0.05 * rng.normal(size=x0.size)) + 0.01 * rng.normal(size=x0.size)
    g = CommGraph.from_edges(2, [(0, 1)]) if net.m == 2 else ring_lattice(net.m, 4)
    pins = rng.random(net.m) < 0.5
    gains = ControlGains(20.0, 30.0, 25.0, 1.5, 0.5)
    a = RhsModel.build(net, g, pins, gains, "numpy")(0.0, x)
    b = RhsModel.build(net, g, pins, gains, "compiled")(0.0, x)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


_STEADY = {}


def _steady(case):
    if case not in _STEADY:
        from pinmg.netmodel import packaged_network

        net = packaged_network(f"bus{case}")
        _STEADY[case] = extract_steady_state(solve_power_flow(net), net)
    return _STEADY[case]


def test_sparsity_covers_jacobian(net4, x4, ctrl4):
    f = RhsModel.build(net4, *ctrl4, backend="numpy")
    rng = np.random.default_rng(2)
    x = x4 * (1 + 1e-2 * rng.normal(size=x4.size))
    J = fd_state_matrix(lambda z: f(0.0, z), x, 1e-7)
    S = f.sparsity()
    scale = np.max(np.abs(J))
    assert not np.any((np.abs(J) > 1e-9 * scale) & ~S)


def test_unknown_backend(net4, ctrl4):
    with pytest.raises(ValueError):
        RhsModel.build(net4, *ctrl4, backend="fortran")


def test_load_change_moves_state(net4, x4, ctrl4):
    loads = {b: ld.scaled(0.5) for b, ld in net4.loads.items()}
    dx = system_derivs(0.0, x4, net4.with_loads(loads), *ctrl4, "numpy")
    assert np.max(np.abs(dx)) > 1.0


def test_load_scaled_keeps_impedance_ratio():
    ld = LoadRL.from_rated(0.3, 0.1)
    s = ld.scaled(2.0)
    assert s.R / s.L == pytest.approx(ld.R / ld.L)


def test_backend_selection(monkeypatch):
    monkeypatch.setenv("PINMG_BACKEND", "numpy")
    assert _backend.default_backend() == "numpy"
    monkeypatch.delenv("PINMG_BACKEND")
    assert _backend.default_backend() == ("compiled" if _backend.HAVE_COMPILED else "numpy")
    monkeypatch.setattr(_backend, "_rhs", None)
    monkeypatch.setattr(_backend, "HAVE_COMPILED", False)
    assert _backend.default_backend() == "numpy"
    with pytest.raises(ImportError):
        _backend.compiled_kernel(None)
