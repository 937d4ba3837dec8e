# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled right-hand side of the microgrid model.

Same equations and state layout as ``pinmg.dynamics``; written with explicit
d/q components so that the two implementations check each other.
"""

from libc.math cimport cos, sin, sqrt

cdef enum:
    W = 15
    I_DELTA = 0
    I_P = 1
    I_Q = 2
    I_PHID = 3
    I_PHIQ = 4
    I_GAMD = 5
    I_GAMQ = 6
    I_IID = 7
    I_IIQ = 8
    I_VOD = 9
    I_VOQ = 10
    I_IOD = 11
    I_IOQ = 12
    I_WNL = 13
    I_VNL = 14


def rhs(double[::1] x, double[::1] dx,
        Py_ssize_t[::1] dg_bus, double[:, ::1] dgp,
        Py_ssize_t[:, ::1] line_ends, double[:, ::1] line_par,
        Py_ssize_t[::1] load_bus, double[:, ::1] load_par,
        double[:, ::1] adj, double[::1] pins, double[::1] ctrl,
        Py_ssize_t n_bus, Py_ssize_t ref, double R_N, double wb,
        double[::1] work):
    cdef Py_ssize_t m = dg_bus.shape[0]
    cdef Py_ssize_t nl = line_ends.shape[0]
    cdef Py_ssize_t nld = load_bus.shape[0]
    cdef Py_ssize_t lo = W * m
    cdef Py_ssize_t ldo = lo + 2 * nl
    cdef Py_ssize_t k, j, i, b, a, base
    # work: bus voltage D,Q (2 n_bus) | omega | Vcmd | mpP | vb_d | vb_q | unused
    cdef double[::1] vbus = work[:2 * n_bus]
    cdef double[::1] om = work[2 * n_bus:2 * n_bus + m]
    cdef double[::1] vc = work[2 * n_bus + m:2 * n_bus + 2 * m]
    cdef double[::1] sh = work[2 * n_bus + 2 * m:2 * n_bus + 3 * m]
    cdef double[::1] vbd = work[2 * n_bus + 3 * m:2 * n_bus + 4 * m]
    cdef double[::1] vbq = work[2 * n_bus + 4 * m:2 * n_bus + 5 * m]
    cdef double c, s, idd, iqq, vd, vq, ir, iq_, wcom, mag, ud, uq, ed, eq
    cdef double mp, nq, Lf, rf, Cf, Lc, rc, wc, Kpv, Kiv, Kpc, Kic, KF, xc
    cdef double p, q, vref, dvd, dvq, iird, iirq, did, diq, vid, viq
    cdef double R, L, deg, cons_w, cons_v, cons_s
    cdef double Cv = ctrl[0], Cw = ctrl[1], CP = ctrl[2], cgv = ctrl[3], cgw = ctrl[4]
    cdef double wref = ctrl[5], Vref = ctrl[6]

    for i in range(2 * n_bus):
        vbus[i] = 0.0
    # net injected current per bus (common frame)
    for k in range(m):
        base = W * k
        c = cos(x[base + I_DELTA])
        s = sin(x[base + I_DELTA])
        idd = x[base + I_IOD]
        iqq = x[base + I_IOQ]
        b = dg_bus[k]
        vbus[2 * b] += c * idd - s * iqq
        vbus[2 * b + 1] += s * idd + c * iqq
    for i in range(nld):
        b = load_bus[i]
        vbus[2 * b] -= x[ldo + 2 * i]
        vbus[2 * b + 1] -= x[ldo + 2 * i + 1]
    for i in range(nl):
        a = line_ends[i, 0]
        b = line_ends[i, 1]
        vbus[2 * a] -= x[lo + 2 * i]
        vbus[2 * a + 1] -= x[lo + 2 * i + 1]
        vbus[2 * b] += x[lo + 2 * i]
        vbus[2 * b + 1] += x[lo + 2 * i + 1]
    for i in range(2 * n_bus):
        vbus[i] *= R_N

    # droop outputs first: the common frequency is the reference DG's
    for k in range(m):
        base = W * k
        om[k] = x[base + I_WNL] - dgp[k, 0] * x[base + I_P]
        vc[k] = x[base + I_VNL] - dgp[k, 1] * x[base + I_Q]
        sh[k] = dgp[k, 0] * x[base + I_P]
    wcom = om[ref]

    for k in range(m):
        base = W * k
        mp = dgp[k, 0]; nq = dgp[k, 1]; Lf = dgp[k, 2]; rf = dgp[k, 3]; Cf = dgp[k, 4]
        Lc = dgp[k, 5]; rc = dgp[k, 6]; wc = dgp[k, 7]; Kpv = dgp[k, 8]; Kiv = dgp[k, 9]
        Kpc = dgp[k, 10]; Kic = dgp[k, 11]; KF = dgp[k, 12]; xc = dgp[k, 13]
        c = cos(x[base + I_DELTA])
        s = sin(x[base + I_DELTA])
        b = dg_bus[k]
        # bus voltage in the DG frame
        vd = c * vbus[2 * b] + s * vbus[2 * b + 1]
        vq = -s * vbus[2 * b] + c * vbus[2 * b + 1]
        vbd[k] = vd
        vbq[k] = vq

        p = x[base + I_IOD] * x[base + I_VOD] + x[base + I_IOQ] * x[base + I_VOQ]
        q = x[base + I_IOD] * x[base + I_VOQ] - x[base + I_IOQ] * x[base + I_VOD]
        dx[base + I_P] = wc * (p - x[base + I_P])
        dx[base + I_Q] = wc * (q - x[base + I_Q])

        mag = sqrt(vd * vd + vq * vq)
        if mag > 0.0:
            ud = vd / mag
            uq = vq / mag
        else:
            ud = 1.0
            uq = 0.0
        ed = vc[k] * ud + rc * x[base + I_IOD] - om[k] * Lc * x[base + I_IOQ]
        eq = vc[k] * uq + rc * x[base + I_IOQ] + om[k] * Lc * x[base + I_IOD]
        vref = sqrt(ed * ed + eq * eq)

        # voltage loop
        dvd = vref - x[base + I_VOD]
        dvq = -x[base + I_VOQ]
        dx[base + I_PHID] = dvd
        dx[base + I_PHIQ] = dvq
        iird = KF * x[base + I_IOD] - xc * Cf * x[base + I_VOQ] + Kpv * dvd + Kiv * x[base + I_PHID]
        iirq = KF * x[base + I_IOQ] + xc * Cf * x[base + I_VOD] + Kpv * dvq + Kiv * x[base + I_PHIQ]
        # current loop
        did = iird - x[base + I_IID]
        diq = iirq - x[base + I_IIQ]
        dx[base + I_GAMD] = did
        dx[base + I_GAMQ] = diq
        vid = -xc * Lf * x[base + I_IIQ] + Kpc * did + Kic * x[base + I_GAMD]
        viq = xc * Lf * x[base + I_IID] + Kpc * diq + Kic * x[base + I_GAMQ]

        # LCL filter
        dx[base + I_IID] = wb / Lf * (vid - x[base + I_VOD] - rf * x[base + I_IID]) + wb * om[k] * x[base + I_IIQ]
        dx[base + I_IIQ] = wb / Lf * (viq - x[base + I_VOQ] - rf * x[base + I_IIQ]) - wb * om[k] * x[base + I_IID]
        dx[base + I_VOD] = wb / Cf * (x[base + I_IID] - x[base + I_IOD]) + wb * om[k] * x[base + I_VOQ]
        dx[base + I_VOQ] = wb / Cf * (x[base + I_IIQ] - x[base + I_IOQ]) - wb * om[k] * x[base + I_VOD]
        dx[base + I_IOD] = wb / Lc * (x[base + I_VOD] - vd - rc * x[base + I_IOD]) + wb * om[k] * x[base + I_IOQ]
        dx[base + I_IOQ] = wb / Lc * (x[base + I_VOQ] - vq - rc * x[base + I_IOQ]) - wb * om[k] * x[base + I_IOD]

        if k == ref:
            dx[base + I_DELTA] = 0.0
        else:
            dx[base + I_DELTA] = wb * (om[k] - wcom)

    # secondary control: sum_j A_jk (x_j - x_k)
    for k in range(m):
        base = W * k
        cons_w = 0.0
        cons_v = 0.0
        cons_s = 0.0
        deg = 0.0
        for j in range(m):
            if adj[j, k] != 0.0:
                cons_w += adj[j, k] * (om[j] - om[k])
                cons_v += adj[j, k] * (vc[j] - vc[k])
                cons_s += adj[j, k] * (sh[j] - sh[k])
        dx[base + I_VNL] = Cv * (cons_v + pins[k] * cgv * (Vref - vc[k]))
        dx[base + I_WNL] = Cw * (cons_w + pins[k] * cgw * (wref - om[k])) + CP * cons_s

    for i in range(nl):
        a = line_ends[i, 0]
        b = line_ends[i, 1]
        R = line_par[i, 0]
        L = line_par[i, 1]
        ir = x[lo + 2 * i]
        iq_ = x[lo + 2 * i + 1]
        dx[lo + 2 * i] = wb / L * (vbus[2 * a] - vbus[2 * b] - R * ir) + wb * wcom * iq_
        dx[lo + 2 * i + 1] = wb / L * (vbus[2 * a + 1] - vbus[2 * b + 1] - R * iq_) - wb * wcom * ir
    for i in range(nld):
        b = load_bus[i]
        R = load_par[i, 0]
        L = load_par[i, 1]
        ir = x[ldo + 2 * i]
        iq_ = x[ldo + 2 * i + 1]
        dx[ldo + 2 * i] = wb / L * (vbus[2 * b] - R * ir) + wb * wcom * iq_
        dx[ldo + 2 * i + 1] = wb / L * (vbus[2 * b + 1] - R * iq_) - wb * wcom * ir
