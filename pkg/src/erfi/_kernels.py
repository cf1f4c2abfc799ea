"""Compiled per-environment kernels behind :mod:`erfi.dynamics`.

Every kernel loops over the batch axis and touches only the row it is
working on, so results for one environment never depend on the others.
"""
from __future__ import annotations

import numpy as np
from numba import njit

NB = 3  # base dofs
SEPARATED, STICK, SLIDE = 0, 1, 2


@njit(cache=True)
def _rot(angle, vx, vz):
    c = np.cos(angle)
    s = np.sin(angle)
    return c * vx + s * vz, -s * vx + c * vz


@njit(cache=True)
def kin_one(q, parents, jorig, com, foot_link, foot_off, angles, origins, coms, feet):
    L = parents.shape[0]
    angles[0] = q[2]
    origins[0, 0] = q[0]
    origins[0, 1] = q[1]
    for k in range(1, L):
        p = parents[k]
        angles[k] = angles[p] + q[NB + k - 1]
        dx, dz = _rot(angles[p], jorig[k, 0], jorig[k, 1])
        origins[k, 0] = origins[p, 0] + dx
        origins[k, 1] = origins[p, 1] + dz
    for k in range(L):
        dx, dz = _rot(angles[k], com[k, 0], com[k, 1])
        coms[k, 0] = origins[k, 0] + dx
        coms[k, 1] = origins[k, 1] + dz
    for f in range(foot_link.shape[0]):
        l = foot_link[f]
        dx, dz = _rot(angles[l], foot_off[f, 0], foot_off[f, 1])
        feet[f, 0] = origins[l, 0] + dx
        feet[f, 1] = origins[l, 1] + dz


@njit(cache=True)
def point_jac(link, px, pz, origins, anc, J):
    """Fill ``J`` (2, n) for a point fixed to ``link``; perp(r) = (r_z, -r_x)."""
    J[:, :] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    J[0, 2] = pz - origins[0, 1]
    J[1, 2] = -(px - origins[0, 0])
    for l in range(1, anc.shape[0]):
        if anc[link, l]:
            J[0, NB + l - 1] = pz - origins[l, 1]
            J[1, NB + l - 1] = -(px - origins[l, 0])


@njit(cache=True)
def point_bias(link, px, pz, origins, omegas, anc):
    """Acceleration of a body point when all generalized accelerations vanish."""
    ax = 0.0
    az = 0.0
    L = anc.shape[0]
    l = 0
    while True:
        nxt = -1
        for m in range(l + 1, L):
            if anc[link, m]:
                nxt = m
                break
        if nxt >= 0:
            ex = origins[nxt, 0]
            ez = origins[nxt, 1]
        else:
            ex = px
            ez = pz
        w2 = omegas[l] * omegas[l]
        ax -= w2 * (ex - origins[l, 0])
        az -= w2 * (ez - origins[l, 1])
        if nxt < 0:
            break
        l = nxt
    return ax, az


@njit(cache=True)
def terms_one(q, parents, jorig, com, mass, inertia, anc, foot_link, foot_off,
              angles, origins, coms, feet, Jc, Jf, M):
    kin_one(q, parents, jorig, com, foot_link, foot_off, angles, origins, coms, feet)
    L = parents.shape[0]
    n = q.shape[0]
    M[:, :] = 0.0
    for k in range(L):
        point_jac(k, coms[k, 0], coms[k, 1], origins, anc, Jc[k])
        for i in range(n):
            for j in range(i, n):
                v = mass[k] * (Jc[k, 0, i] * Jc[k, 0, j] + Jc[k, 1, i] * Jc[k, 1, j])
                wi = 1.0 if (i == 2 or (i >= NB and anc[k, i - NB + 1])) else 0.0
                wj = 1.0 if (j == 2 or (j >= NB and anc[k, j - NB + 1])) else 0.0
                v += inertia[k] * wi * wj
                M[i, j] += v
    for i in range(n):
        for j in range(i):
            M[i, j] = M[j, i]
    for f in range(foot_link.shape[0]):
        point_jac(foot_link[f], feet[f, 0], feet[f, 1], origins, anc, Jf[f])


@njit(cache=True)
def omegas_one(u, parents, out):
    out[0] = u[2]
    for k in range(1, parents.shape[0]):
        out[k] = out[parents[k]] + u[NB + k - 1]


@njit(cache=True)
def bias_one(u, gravity, parents, mass, anc, origins, coms, Jc, omegas, h):
    omegas_one(u, parents, omegas)
    n = u.shape[0]
    h[:] = 0.0
    for k in range(parents.shape[0]):
        ax, az = point_bias(k, coms[k, 0], coms[k, 1], origins, omegas, anc)
        az -= gravity
        for i in range(n):
            h[i] += mass[k] * (Jc[k, 0, i] * ax + Jc[k, 1, i] * az)


@njit(cache=True)
def lu_solve(A, b, free, x):
    """Solve ``A[free][:, free] y = b[free]`` by Gaussian elimination with partial pivoting."""
    m = free.shape[0]
    a = np.empty((m, m + 1))
    for i in range(m):
        for j in range(m):
            a[i, j] = A[free[i], free[j]]
        a[i, m] = b[free[i]]
    for c in range(m):
        piv = c
        best = abs(a[c, c])
        for r in range(c + 1, m):
            if abs(a[r, c]) > best:
                best = abs(a[r, c])
                piv = r
        if piv != c:
            for j in range(c, m + 1):
                tmp = a[c, j]
                a[c, j] = a[piv, j]
                a[piv, j] = tmp
        d = a[c, c]
        for r in range(c + 1, m):
            f = a[r, c] / d
            if f != 0.0:
                for j in range(c, m + 1):
                    a[r, j] -= f * a[c, j]
    x[:] = 0.0
    for i in range(m - 1, -1, -1):
        s = a[i, m]
        for j in range(i + 1, m):
            s -= a[i, j] * x[free[j]]
        x[free[i]] = s / a[i, i]


@njit(cache=True)
def mass_matrix_batch(Q, parents, jorig, com, mass, inertia, anc, foot_link, foot_off):
    B, n = Q.shape
    L = parents.shape[0]
    F = foot_link.shape[0]
    out = np.empty((B, n, n))
    angles = np.empty(L)
    origins = np.empty((L, 2))
    coms = np.empty((L, 2))
    feet = np.empty((F, 2))
    Jc = np.empty((L, 2, n))
    Jf = np.empty((F, 2, n))
    for b in range(B):
        terms_one(Q[b], parents, jorig, com, mass, inertia, anc, foot_link, foot_off,
                  angles, origins, coms, feet, Jc, Jf, out[b])
    return out


@njit(cache=True)
def bias_batch(Q, U, gravity, parents, jorig, com, mass, inertia, anc, foot_link, foot_off):
    B, n = Q.shape
    L = parents.shape[0]
    F = foot_link.shape[0]
    out = np.empty((B, n))
    angles = np.empty(L)
    origins = np.empty((L, 2))
    coms = np.empty((L, 2))
    feet = np.empty((F, 2))
    Jc = np.empty((L, 2, n))
    Jf = np.empty((F, 2, n))
    M = np.empty((n, n))
    om = np.empty(L)
    for b in range(B):
        terms_one(Q[b], parents, jorig, com, mass, inertia, anc, foot_link, foot_off,
                  angles, origins, coms, feet, Jc, Jf, M)
        bias_one(U[b], gravity, parents, mass, anc, origins, coms, Jc, om, out[b])
    return out


@njit(cache=True)
def kinematics_batch(Q, parents, jorig, com, foot_link, foot_off):
    B = Q.shape[0]
    L = parents.shape[0]
    F = foot_link.shape[0]
    angles = np.empty((B, L))
    origins = np.empty((B, L, 2))
    coms = np.empty((B, L, 2))
    feet = np.empty((B, F, 2))
    for b in range(B):
        kin_one(Q[b], parents, jorig, com, foot_link, foot_off, angles[b], origins[b], coms[b], feet[b])
    return angles, origins, coms, feet


@njit(cache=True)
def foot_jac_batch(Q, parents, jorig, com, anc, foot_link, foot_off):
    B, n = Q.shape
    L = parents.shape[0]
    F = foot_link.shape[0]
    out = np.empty((B, F, 2, n))
    angles = np.empty(L)
    origins = np.empty((L, 2))
    coms = np.empty((L, 2))
    feet = np.empty((F, 2))
    for b in range(B):
        kin_one(Q[b], parents, jorig, com, foot_link, foot_off, angles, origins, coms, feet)
        for f in range(F):
            point_jac(foot_link[f], feet[f, 0], feet[f, 1], origins, anc, out[b, f])
    return out


@njit(cache=True)
def momenta_one(mass, inertia, coms, origins, M, u):
    """Linear momentum and angular momentum about the whole-body CoM."""
    n = u.shape[0]
    mtot = 0.0
    cx = 0.0
    cz = 0.0
    for k in range(mass.shape[0]):
        mtot += mass[k]
        cx += mass[k] * coms[k, 0]
        cz += mass[k] * coms[k, 1]
    cx /= mtot
    cz /= mtot
    px = 0.0
    pz = 0.0
    lb = 0.0
    for j in range(n):
        px += M[0, j] * u[j]
        pz += M[1, j] * u[j]
        lb += M[2, j] * u[j]
    # L_com = L_base - (c - base) x P, with a x b = a_z b_x - a_x b_z
    rx = cx - origins[0, 0]
    rz = cz - origins[0, 1]
    lc = lb - (rz * px - rx * pz)
    return px, pz, lc, cx, cz, mtot


@njit(cache=True)
def step_batch(Q, U, tau, wforce, wtorque, depth, normal, mu, dt, gravity, kn, dn, kt,
               parents, jorig, coms_local, masses, inertias, anc, foot_link, foot_off, lower, upper,
               free, project):
    """Semi-implicit Euler step with implicit penalty damping/friction.

    ``coms_local``, ``masses`` and ``inertias`` carry a leading batch axis
    so every environment may own a differently loaded model.  Returns new
    (Q, U), per-foot (normal, tangential) forces, world-frame contact forces
    and a per-environment count of active-set iterations (negative when the
    explicit fallback was needed).
    """
    B, n = Q.shape
    L = parents.shape[0]
    F = foot_link.shape[0]
    Q1 = np.empty_like(Q)
    U1 = np.empty_like(U)
    forces = np.zeros((B, F, 2))
    world = np.zeros((B, F, 2))
    iters = np.zeros(B, dtype=np.int64)

    angles = np.empty(L)
    origins = np.empty((L, 2))
    coms = np.empty((L, 2))
    feet = np.empty((F, 2))
    Jc = np.empty((L, 2, n))
    Jf = np.empty((F, 2, n))
    M = np.empty((n, n))
    h = np.empty(n)
    om = np.empty(L)
    rhs0 = np.empty(n)
    A = np.empty((n, n))
    rhs = np.empty(n)
    x = np.empty(n)
    unit = np.empty(n)
    col = np.empty(n)
    Jn = np.empty((F, n))
    Jt = np.empty((F, n))
    mode = np.empty(F, dtype=np.int64)
    sign = np.empty(F)
    new_mode = np.empty(F, dtype=np.int64)
    new_sign = np.empty(F)
    fn = np.empty(F)
    ft = np.empty(F)

    for b in range(B):
        q = Q[b]
        u = U[b]
        mass = masses[b]
        inertia = inertias[b]
        com = coms_local[b]
        terms_one(q, parents, jorig, com, mass, inertia, anc, foot_link, foot_off,
                  angles, origins, coms, feet, Jc, Jf, M)
        bias_one(u, gravity, parents, mass, anc, origins, coms, Jc, om, h)
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += M[i, j] * u[j]
            g = -h[i] + Jc[0, 0, i] * wforce[b, 0] + Jc[0, 1, i] * wforce[b, 1]
            if i == 2:
                g += wtorque[b]
            if i >= NB:
                g += tau[b, i - NB]
            rhs0[i] = s + dt * g
        for f in range(F):
            nx = normal[b, f, 0]
            nz = normal[b, f, 1]
            tx = nz
            tz = -nx
            for i in range(n):
                Jn[f, i] = nx * Jf[f, 0, i] + nz * Jf[f, 1, i]
                Jt[f, i] = tx * Jf[f, 0, i] + tz * Jf[f, 1, i]
            mode[f] = STICK if depth[b, f] > 0.0 else SEPARATED
            sign[f] = 0.0

        converged = False
        count = 0
        for it in range(8):
            count = it + 1
            for i in range(n):
                rhs[i] = rhs0[i]
                for j in range(n):
                    A[i, j] = M[i, j]
            for f in range(F):
                if mode[f] == SEPARATED:
                    continue
                a_n = kn * depth[b, f]
                b_nn = -dn
                if mode[f] == SLIDE:
                    a_t = -mu[b, f] * sign[f] * a_n
                    b_tn = -mu[b, f] * sign[f] * b_nn
                    b_tt = 0.0
                else:
                    a_t = 0.0
                    b_tn = 0.0
                    b_tt = -kt
                for i in range(n):
                    rhs[i] += dt * (a_n * Jn[f, i] + a_t * Jt[f, i])
                    for j in range(n):
                        A[i, j] -= dt * (b_nn * Jn[f, i] * Jn[f, j]
                                         + b_tn * Jt[f, i] * Jn[f, j]
                                         + b_tt * Jt[f, i] * Jt[f, j])
            lu_solve(A, rhs, free, x)
            same = True
            for f in range(F):
                vn = 0.0
                vt = 0.0
                for i in range(n):
                    vn += Jn[f, i] * x[i]
                    vt += Jt[f, i] * x[i]
                fn_trial = kn * depth[b, f] - dn * vn
                if depth[b, f] > 0.0 and fn_trial > 0.0:
                    if abs(kt * vt) <= mu[b, f] * fn_trial:
                        new_mode[f] = STICK
                        new_sign[f] = 0.0
                    else:
                        new_mode[f] = SLIDE
                        new_sign[f] = 1.0 if vt > 0.0 else (-1.0 if vt < 0.0 else 0.0)
                else:
                    new_mode[f] = SEPARATED
                    new_sign[f] = 0.0
                if new_mode[f] != mode[f] or (new_mode[f] == SLIDE and new_sign[f] != sign[f]):
                    same = False
            if same:
                converged = True
                break
            for f in range(F):
                mode[f] = new_mode[f]
                sign[f] = new_sign[f]

        for f in range(F):
            vn = 0.0
            vt = 0.0
            for i in range(n):
                vn += Jn[f, i] * x[i]
                vt += Jt[f, i] * x[i]
            if mode[f] == SEPARATED:
                fn[f] = 0.0
                ft[f] = 0.0
            else:
                fn[f] = kn * depth[b, f] - dn * vn
                if mode[f] == STICK:
                    ft[f] = -kt * vt
                else:
                    ft[f] = -mu[b, f] * sign[f] * fn[f]
        if not converged:
            # explicit, clamped forces
            for i in range(n):
                rhs[i] = rhs0[i]
            for f in range(F):
                fn[f] = max(fn[f], 0.0)
                lim = mu[b, f] * fn[f]
                ft[f] = min(max(ft[f], -lim), lim)
                for i in range(n):
                    rhs[i] += dt * (fn[f] * Jn[f, i] + ft[f] * Jt[f, i])
            lu_solve(M, rhs, free, x)
            count = -count

        iters[b] = count
        fx_tot = 0.0
        fz_tot = 0.0
        for f in range(F):
            forces[b, f, 0] = fn[f]
            forces[b, f, 1] = ft[f]
            wx = fn[f] * normal[b, f, 0] + ft[f] * normal[b, f, 1]
            wz = fn[f] * normal[b, f, 1] - ft[f] * normal[b, f, 0]
            world[b, f, 0] = wx
            world[b, f, 1] = wz
            fx_tot += wx
            fz_tot += wz

        for i in range(n):
            U1[b, i] = x[i]
            Q1[b, i] = q[i] + dt * x[i]
        # joint limits: inelastic impulse along each limited joint, then clamp.
        # u' = u + M^-1 e_k lam with u'_k = 0 never adds kinetic energy.
        for sweep in range(4):
            hit = False
            for j in range(n - NB):
                k = NB + j
                v = Q1[b, k]
                if (v < lower[j] and U1[b, k] < 0.0) or (v > upper[j] and U1[b, k] > 0.0):
                    unit[:] = 0.0
                    unit[k] = 1.0
                    lu_solve(M, unit, free, col)
                    if col[k] > 0.0:
                        lam = -U1[b, k] / col[k]
                        for i in range(n):
                            U1[b, i] += lam * col[i]
                        hit = True
            if not hit:
                break
        for j in range(n - NB):
            v = Q1[b, NB + j]
            if v < lower[j]:
                Q1[b, NB + j] = lower[j]
                if U1[b, NB + j] < 0.0:
                    U1[b, NB + j] = 0.0
            elif v > upper[j]:
                Q1[b, NB + j] = upper[j]
                if U1[b, NB + j] > 0.0:
                    U1[b, NB + j] = 0.0

        if project:
            px0, pz0, l0, cx, cz, mtot = momenta_one(mass, inertia, coms, origins, M, u)
            fx_tot += mtot * 0.0 + wforce[b, 0]
            fz_tot += mtot * gravity + wforce[b, 1]
            moment = wtorque[b]
            for f in range(F):
                moment += (feet[f, 1] - cz) * world[b, f, 0] - (feet[f, 0] - cx) * world[b, f, 1]
            moment += (coms[0, 1] - cz) * wforce[b, 0] - (coms[0, 0] - cx) * wforce[b, 1]
            px_t = px0 + dt * fx_tot
            pz_t = pz0 + dt * fz_tot
            l_t = l0 + dt * moment

            terms_one(Q1[b], parents, jorig, com, mass, inertia, anc, foot_link, foot_off,
                      angles, origins, coms, feet, Jc, Jf, M)
            px1, pz1, l1, cx, cz, mtot = momenta_one(mass, inertia, coms, origins, M, U1[b])
            ic = 0.0
            for k in range(L):
                rx = coms[k, 0] - cx
                rz = coms[k, 1] - cz
                ic += inertia[k] + mass[k] * (rx * rx + rz * rz)
            U1[b, 2] += (l_t - l1) / ic
            px1 = 0.0
            pz1 = 0.0
            for j in range(n):
                px1 += M[0, j] * U1[b, j]
                pz1 += M[1, j] * U1[b, j]
            U1[b, 0] += (px_t - px1) / mtot
            U1[b, 1] += (pz_t - pz1) / mtot
    return Q1, U1, forces, world, iters
