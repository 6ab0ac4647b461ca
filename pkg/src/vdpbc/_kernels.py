"""Compiled kernels for the flexible-joint closed loop.

Everything here works on flat arrays. A state vector is laid out as
x = (q_l, q_m, p_l, p_m), each block of length n. Model and gain matrices
travel in the parameter tuple built by `pack_params`; reference derivatives
travel in a table `tab[j, k, :]` holding d^k q_d / dt^k at grid time j.

The controller chain `chain` is written so that it also accepts complex
states: directional derivatives are taken by complex-step differentiation,
which is exact up to rounding for these analytic expressions.
"""

import numpy as np
from numba import njit

# rows of the chain output
EQL, PLR, PLR_D, SL, ULFF, ULFB, UL = 0, 1, 2, 3, 4, 5, 6
QMD, QMD_D1, QMD_D2, EQM, PMR, PMR_D, SM = 7, 8, 9, 10, 11, 12, 13
UFF, UFB, U = 14, 15, 16
EQL_RATE, EQM_RATE, SL_RATE, SM_RATE = 17, 18, 19, 20
NROWS = 21

# (q_err_l, q_err_m, sigma_l, sigma_m) and their rates, in storage order
ERR_ROWS = np.array([EQL, EQM, SL, SM])
RATE_ROWS = np.array([EQL_RATE, EQM_RATE, SL_RATE, SM_RATE])

CS_STEP = 1e-20

# parameter tuple slots
(P_ML, P_MLI, P_MM, P_MMI, P_DL, P_DM, P_K, P_KI, P_BM, P_BMI, P_POT, P_POTM, P_POTV,
 P_LAML, P_LAMM, P_PIL, P_PIM, P_PIMI, P_KLD, P_KMD, P_FDOFF, P_FDH) = range(22)


def pack_params(Ml, Mm, Dl, Dm, K, Bm, pot_kind, pot_mat, pot_vec, Laml, Lamm, Pil, Pim, Kld, Kmd,
                fd_offset=0, fd_step=0.0):
    f = lambda A: np.ascontiguousarray(np.atleast_2d(np.asarray(A, dtype=np.float64)))
    return (
        f(Ml), f(np.linalg.inv(Ml)), f(Mm), f(np.linalg.inv(Mm)), f(Dl), f(Dm),
        f(K), f(np.linalg.inv(K)), f(Bm), f(np.linalg.inv(Bm)),
        np.int64(pot_kind), f(pot_mat), np.ascontiguousarray(np.asarray(pot_vec, dtype=np.float64)),
        f(Laml), f(Lamm), f(Pil), f(Pim), f(np.linalg.inv(Pim)), f(Kld), f(Kmd),
        np.int64(fd_offset), np.float64(fd_step),
    )


@njit(cache=True, nogil=True)
def mv(A, x):
    n, m = A.shape
    out = np.zeros(n, dtype=x.dtype)
    for i in range(n):
        s = out[i]
        for j in range(m):
            s += A[i, j] * x[j]
        out[i] = s
    return out


@njit(cache=True, nogil=True)
def pot_value(kind, G, w, q):
    if kind == 1:
        return 0.5 * np.sum(q * mv(G, q))
    elif kind == 2:
        return np.sum(w * (1.0 - np.cos(q)))
    return 0.0 * np.sum(q)


@njit(cache=True, nogil=True)
def pot_grad(kind, G, w, q):
    if kind == 1:
        return mv(G, q)
    elif kind == 2:
        return w * np.sin(q)
    return q * 0.0


@njit(cache=True, nogil=True)
def pot_hess_mv(kind, G, w, q, v):
    if kind == 1:
        return mv(G, v) + 0.0 * q
    elif kind == 2:
        return w * np.cos(q) * v
    return (q + v) * 0.0


@njit(cache=True, nogil=True)
def pot_third(kind, G, w, q, v, z):
    if kind == 2:
        return -w * np.sin(q) * v * z
    return (q + v + z) * 0.0


@njit(cache=True, nogil=True)
def link_momentum_rate(P, a, b, c):
    """Unactuated link momentum rate: -dP_l/dq_l + K (q_m - q_l) - D_l M_l^{-1} p_l."""
    vl = mv(P[P_MLI], b)
    return -pot_grad(P[P_POT], P[P_POTM], P[P_POTV], a) + mv(P[P_K], c - a) - mv(P[P_DL], vl)


@njit(cache=True, nogil=True)
def motor_position_reference(P, a, b, d):
    """q_md = q_l + K^{-1} u_l for link state (a, b) and reference row d."""
    Mli = P[P_MLI]
    vl = mv(Mli, b)
    eq = a - d[0]
    eqd = vl - d[1]
    pr = mv(P[P_ML], d[1] - mv(P[P_LAML], eq))
    prd = mv(P[P_ML], d[2] - mv(P[P_LAML], eqd))
    sl = b - pr
    ul = (prd + pot_grad(P[P_POT], P[P_POTM], P[P_POTV], a) + mv(P[P_DL], mv(Mli, pr))
          - mv(P[P_PIL], eq) - mv(P[P_KLD], mv(Mli, sl)))
    return a + mv(P[P_KI], ul)


@njit(cache=True, nogil=True)
def _qmd_rate_fd(P, a, b, c, tab, j, off, h):
    ad = mv(P[P_MLI], b)
    bd = link_momentum_rate(P, a, b, c)
    qp = motor_position_reference(P, a + h * ad, b + h * bd, tab[j + off])
    qm = motor_position_reference(P, a - h * ad, b - h * bd, tab[j - off])
    return (qp - qm) / (2.0 * h)


@njit(cache=True, nogil=True)
def chain(P, xv, tab, j, omega):
    """Controller u(x_v, t) and every intermediate of the derivative chain."""
    n = xv.shape[0] // 4
    a = xv[0:n]
    c = xv[n:2 * n]
    b = xv[2 * n:3 * n]
    e = xv[3 * n:4 * n]
    d = tab[j]
    Ml, Mli, Mm, Mmi = P[P_ML], P[P_MLI], P[P_MM], P[P_MMI]
    Dl, Dm, K, Ki = P[P_DL], P[P_DM], P[P_K], P[P_KI]
    Laml, Lamm, Pil, Pim, Pimi = P[P_LAML], P[P_LAMM], P[P_PIL], P[P_PIM], P[P_PIMI]
    Kld, Kmd = P[P_KLD], P[P_KMD]
    kind, G, w = P[P_POT], P[P_POTM], P[P_POTV]

    vl = mv(Mli, b)
    vm = mv(Mmi, e)

    # link error coordinates and link control law
    eq = a - d[0]
    eqd = vl - d[1]
    pr = mv(Ml, d[1] - mv(Laml, eq))
    prd = mv(Ml, d[2] - mv(Laml, eqd))
    sl = b - pr
    gl = pot_grad(kind, G, w, a)
    ul_ff = prd + gl + mv(Dl, mv(Mli, pr))
    ul_fb = -mv(Pil, eq) - mv(Kld, mv(Mli, sl))
    ul = ul_ff + ul_fb
    qmd = a + mv(Ki, ul)

    bd = -gl + mv(K, c - a) - mv(Dl, vl)
    sld = bd - prd

    off = P[P_FDOFF]
    if off == 0:
        eqdd = mv(Mli, bd) - d[2]
        prdd = mv(Ml, d[3] - mv(Laml, eqdd))
        sldd_ = bd * 0.0
        uld = (prdd + pot_hess_mv(kind, G, w, a, vl) + mv(Dl, mv(Mli, prd))
               - mv(Pil, eqd) - mv(Kld, mv(Mli, sld)))
        qmd1 = vl + mv(Ki, uld)
        bdd = -pot_hess_mv(kind, G, w, a, vl) + mv(K, vm - vl) - mv(Dl, mv(Mli, bd))
        eqddd = mv(Mli, bdd) - d[3]
        prddd = mv(Ml, d[4] - mv(Laml, eqddd))
        sldd_ = bdd - prdd
        uldd = (prddd + pot_third(kind, G, w, a, vl, vl) + pot_hess_mv(kind, G, w, a, mv(Mli, bd))
                + mv(Dl, mv(Mli, prdd)) - mv(Pil, eqdd) - mv(Kld, mv(Mli, sldd_)))
        qmd2 = mv(Mli, bd) + mv(Ki, uldd)
    else:
        h = P[P_FDH]
        qmd1 = _qmd_rate_fd(P, a, b, c, tab, j, off, h)
        hp = _qmd_rate_fd(P, a + h * vl, b + h * bd, c + h * vm, tab, j + off, off, h)
        hm = _qmd_rate_fd(P, a - h * vl, b - h * bd, c - h * vm, tab, j - off, off, h)
        qmd2 = (hp - hm) / (2.0 * h)

    # motor error coordinates and motor control law
    eqm = c - qmd
    eqmd = vm - qmd1
    coupling = mv(Pimi, mv(K.T, mv(Mli, sl)))
    coupling_d = mv(Pimi, mv(K.T, mv(Mli, sld)))
    pmr = mv(Mm, qmd1 - mv(Lamm, eqm) - coupling)
    pmrd = mv(Mm, qmd2 - mv(Lamm, eqmd) - coupling_d)
    sm = e - pmr
    spring = mv(K, c - a)
    tau_ff = pmrd + spring + mv(Dm, mv(Mmi, pmr))
    tau_fb = -mv(Pim, eqm) - mv(Kmd, mv(Mmi, sm))
    u_ff = mv(P[P_BMI], tau_ff)
    u_fb = mv(P[P_BMI], tau_fb) + omega
    u = u_ff + u_fb
    ed = -spring - mv(Dm, vm) + mv(P[P_BM], u)

    out = np.zeros((NROWS, n), dtype=xv.dtype)
    out[EQL] = eq
    out[PLR] = pr
    out[PLR_D] = prd
    out[SL] = sl
    out[ULFF] = ul_ff
    out[ULFB] = ul_fb
    out[UL] = ul
    out[QMD] = qmd
    out[QMD_D1] = qmd1
    out[QMD_D2] = qmd2
    out[EQM] = eqm
    out[PMR] = pmr
    out[PMR_D] = pmrd
    out[SM] = sm
    out[UFF] = u_ff
    out[UFB] = u_fb
    out[U] = u
    out[EQL_RATE] = eqd
    out[EQM_RATE] = eqmd
    out[SL_RATE] = sld
    out[SM_RATE] = ed - pmrd
    return out


@njit(cache=True, nogil=True)
def chain_directional(P, xv, dxv, tab, j):
    """Derivative of every chain row along dxv (complex step)."""
    n = xv.shape[0] // 4
    s = np.max(np.abs(dxv))
    if s == 0.0:
        return np.zeros((NROWS, n))
    z = xv + 1j * (CS_STEP / s) * dxv
    out = chain(P, z, tab, j, np.zeros(n))
    return out.imag * (s / CS_STEP)


@njit(cache=True, nogil=True)
def plant(P, x, u):
    n = x.shape[0] // 4
    a = x[0:n]
    c = x[n:2 * n]
    b = x[2 * n:3 * n]
    e = x[3 * n:4 * n]
    vl = mv(P[P_MLI], b)
    vm = mv(P[P_MMI], e)
    spring = mv(P[P_K], c - a)
    out = np.empty(4 * n, dtype=x.dtype)
    out[0:n] = vl
    out[n:2 * n] = vm
    out[2 * n:3 * n] = -pot_grad(P[P_POT], P[P_POTM], P[P_POTV], a) + spring - mv(P[P_DL], vl)
    out[3 * n:4 * n] = -spring - mv(P[P_DM], vm) + mv(P[P_BM], u)
    return out


@njit(cache=True, nogil=True)
def hamiltonian(P, x):
    n = x.shape[0] // 4
    a = x[0:n]
    c = x[n:2 * n]
    b = x[2 * n:3 * n]
    e = x[3 * n:4 * n]
    z = c - a
    return (0.5 * np.sum(b * mv(P[P_MLI], b)) + 0.5 * np.sum(e * mv(P[P_MMI], e))
            + pot_value(P[P_POT], P[P_POTM], P[P_POTV], a) + 0.5 * np.sum(z * mv(P[P_K], z)))


@njit(cache=True, nogil=True)
def closed_loop_rhs(P, x, tab, j, omega):
    return plant(P, x, chain(P, x, tab, j, omega)[U])


@njit(cache=True, nogil=True)
def tangent_rhs(P, xv, dxv, tab, j, domega):
    """Variational virtual dynamics [J_v - R_v] d2H_v/dx_v2 dx_v + g du with du = Du dx_v + domega."""
    n = xv.shape[0] // 4
    a = xv[0:n]
    dql = dxv[0:n]
    dqm = dxv[n:2 * n]
    dpl = dxv[2 * n:3 * n]
    dpm = dxv[3 * n:4 * n]
    # d2H_v/dx_v2 dx_v
    dspring = mv(P[P_K], dqm - dql)
    hq_l = pot_hess_mv(P[P_POT], P[P_POTM], P[P_POTV], a, dql) - dspring
    hq_m = dspring
    hp_l = mv(P[P_MLI], dpl)
    hp_m = mv(P[P_MMI], dpm)
    du = chain_directional(P, xv, dxv, tab, j)[U] + domega
    out = np.empty(4 * n)
    out[0:n] = hp_l
    out[n:2 * n] = hp_m
    out[2 * n:3 * n] = -hq_l - mv(P[P_DL], hp_l)
    out[3 * n:4 * n] = -hq_m - mv(P[P_DM], hp_m) + mv(P[P_BM], du)
    return out


@njit(cache=True, nogil=True)
def _bad(x, bound):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]) or abs(x[i]) > bound:
            return True
    return False


@njit(cache=True, nogil=True)
def integrate_closed_loop(P, x0, tab, wtab, pad, dt, nsteps, rk4, stride, bound):
    """Fixed-step integration of x' = plant(x, u(x, t)). Returns (X, K, failed_step)."""
    nrec = nsteps // stride + 1
    if nsteps % stride != 0:
        nrec += 1
    X = np.empty((nrec, x0.shape[0]))
    steps = np.empty(nrec, dtype=np.int64)
    x = x0.copy()
    X[0] = x
    steps[0] = 0
    r = 1
    for k in range(nsteps):
        j = pad + 2 * k
        if rk4:
            k1 = closed_loop_rhs(P, x, tab, j, wtab[j])
            k2 = closed_loop_rhs(P, x + 0.5 * dt * k1, tab, j + 1, wtab[j + 1])
            k3 = closed_loop_rhs(P, x + 0.5 * dt * k2, tab, j + 1, wtab[j + 1])
            k4 = closed_loop_rhs(P, x + dt * k3, tab, j + 2, wtab[j + 2])
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            x = x + dt * closed_loop_rhs(P, x, tab, j, wtab[j])
        if _bad(x, bound):
            return X[:r], steps[:r], k + 1
        if (k + 1) % stride == 0 or k + 1 == nsteps:
            X[r] = x
            steps[r] = k + 1
            r += 1
    return X[:r], steps[:r], -1


@njit(cache=True, nogil=True)
def integrate_prolonged(P, x0, xv0, dx0, tab, wtab, dwtab, pad, dt, nsteps, rk4, stride, bound):
    """Co-integrate the actual closed loop x, the virtual state x_v and its tangent dx_v."""
    N = x0.shape[0]
    nrec = nsteps // stride + 1
    if nsteps % stride != 0:
        nrec += 1
    X = np.empty((nrec, N))
    XV = np.empty((nrec, N))
    DX = np.empty((nrec, N))
    steps = np.empty(nrec, dtype=np.int64)
    x = x0.copy()
    xv = xv0.copy()
    dx = dx0.copy()
    X[0] = x
    XV[0] = xv
    DX[0] = dx
    steps[0] = 0
    r = 1
    for k in range(nsteps):
        j = pad + 2 * k
        if rk4:
            a1 = closed_loop_rhs(P, x, tab, j, wtab[j])
            b1 = closed_loop_rhs(P, xv, tab, j, wtab[j])
            c1 = tangent_rhs(P, xv, dx, tab, j, dwtab[j])
            a2 = closed_loop_rhs(P, x + 0.5 * dt * a1, tab, j + 1, wtab[j + 1])
            b2 = closed_loop_rhs(P, xv + 0.5 * dt * b1, tab, j + 1, wtab[j + 1])
            c2 = tangent_rhs(P, xv + 0.5 * dt * b1, dx + 0.5 * dt * c1, tab, j + 1, dwtab[j + 1])
            a3 = closed_loop_rhs(P, x + 0.5 * dt * a2, tab, j + 1, wtab[j + 1])
            b3 = closed_loop_rhs(P, xv + 0.5 * dt * b2, tab, j + 1, wtab[j + 1])
            c3 = tangent_rhs(P, xv + 0.5 * dt * b2, dx + 0.5 * dt * c2, tab, j + 1, dwtab[j + 1])
            a4 = closed_loop_rhs(P, x + dt * a3, tab, j + 2, wtab[j + 2])
            b4 = closed_loop_rhs(P, xv + dt * b3, tab, j + 2, wtab[j + 2])
            c4 = tangent_rhs(P, xv + dt * b3, dx + dt * c3, tab, j + 2, dwtab[j + 2])
            x = x + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            xv = xv + (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            dx = dx + (dt / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        else:
            a1 = closed_loop_rhs(P, x, tab, j, wtab[j])
            b1 = closed_loop_rhs(P, xv, tab, j, wtab[j])
            c1 = tangent_rhs(P, xv, dx, tab, j, dwtab[j])
            x = x + dt * a1
            xv = xv + dt * b1
            dx = dx + dt * c1
        if _bad(x, bound) or _bad(xv, bound):
            return X[:r], XV[:r], DX[:r], steps[:r], k + 1
        if (k + 1) % stride == 0 or k + 1 == nsteps:
            X[r] = x
            XV[r] = xv
            DX[r] = dx
            steps[r] = k + 1
            r += 1
    return X, XV, DX, steps, -1


@njit(cache=True, nogil=True)
def evaluate_rows(P, X, tab, wtab, idx):
    """Chain outputs and Hamiltonian at recorded states; idx are table rows."""
    N = X.shape[0]
    n = X.shape[1] // 4
    out = np.empty((N, NROWS, n))
    H = np.empty(N)
    for r in range(N):
        out[r] = chain(P, X[r], tab, idx[r], wtab[idx[r]])
        H[r] = hamiltonian(P, X[r])
    return out, H


@njit(cache=True, nogil=True)
def evaluate_tangent_rows(P, XV, DX, tab, idx):
    """Directional chain derivatives at recorded (x_v, dx_v) pairs."""
    N = XV.shape[0]
    n = XV.shape[1] // 4
    out = np.empty((N, NROWS, n))
    for r in range(N):
        out[r] = chain_directional(P, XV[r], DX[r], tab, idx[r])
    return out


@njit(cache=True, nogil=True)
def _open_rhs(P, z, u):
    n = (z.shape[0] - 2) // 4
    x = z[: 4 * n]
    out = np.empty(z.shape[0])
    out[: 4 * n] = plant(P, x, u)
    vl = mv(P[P_MLI], x[2 * n : 3 * n])
    vm = mv(P[P_MMI], x[3 * n : 4 * n])
    out[4 * n] = np.sum(vl * mv(P[P_DL], vl)) + np.sum(vm * mv(P[P_DM], vm))
    out[4 * n + 1] = np.sum(mv(P[P_BM].T, vm) * u)
    return out


@njit(cache=True, nogil=True)
def integrate_open_loop(P, z0, utab, dt, nsteps, rk4, stride, bound):
    """Plant under a tabulated input; z = (x, dissipated energy, supplied energy)."""
    nrec = nsteps // stride + 1
    if nsteps % stride != 0:
        nrec += 1
    Z = np.empty((nrec, z0.shape[0]))
    steps = np.empty(nrec, dtype=np.int64)
    z = z0.copy()
    Z[0] = z
    steps[0] = 0
    r = 1
    N = z0.shape[0] - 2
    for k in range(nsteps):
        j = 2 * k
        if rk4:
            k1 = _open_rhs(P, z, utab[j])
            k2 = _open_rhs(P, z + 0.5 * dt * k1, utab[j + 1])
            k3 = _open_rhs(P, z + 0.5 * dt * k2, utab[j + 1])
            k4 = _open_rhs(P, z + dt * k3, utab[j + 2])
            z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            z = z + dt * _open_rhs(P, z, utab[j])
        if _bad(z[:N], bound):
            return Z[:r], steps[:r], k + 1
        if (k + 1) % stride == 0 or k + 1 == nsteps:
            Z[r] = z
            steps[r] = k + 1
            r += 1
    return Z[:r], steps[:r], -1
