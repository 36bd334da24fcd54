"""Hot numeric kernels.

Everything here is written in the numba-compatible subset of Python and
compiled through :func:`cislunar_sda._accel.jit`. Kernels report failures
through integer status codes; the public modules translate those into
exceptions.
"""
import math

import numpy as np

from ._accel import jit

# integrator / dynamics status codes
OK = 0
SINGULAR = 1
STEP_TOO_SMALL = 2
TOO_MANY_STEPS = 3

# measurement status codes
GEOM_OK = 0
GEOM_DEGENERATE = 1
GEOM_SINGULAR_DERIV = 2

# correction status codes
CORR_OK = 0
CORR_SKIPPED = 1
CORR_SINGULAR = 2

# track status codes (beyond the integrator ones)
TRACK_INNOVATION_SINGULAR = 10

MODE_STATE = 0
MODE_COVARIANCE = 1

SINGULAR_RADIUS = 1e-6
PROJECTION_EPS = 1e-12
DERIV_EPS = 1e-12
MAX_STEPS = 2_000_000

# Dormand-Prince 5(4) tableau
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0)
_A71, _A73, _A74, _A75, _A76 = (
    35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0)
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)

# PI controller (Hairer & Wanner DOPRI5 defaults)
_BETA = 0.04
_EXPO1 = 0.2 - 0.75 * _BETA
_SAFE = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------

@jit
def primary_distances(x, y, z, mu):
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    r1 = math.sqrt(dx1 * dx1 + y * y + z * z)
    r2 = math.sqrt(dx2 * dx2 + y * y + z * z)
    return r1, r2


@jit
def pseudo_potential(s, mu):
    r1, r2 = primary_distances(s[0], s[1], s[2], mu)
    return 0.5 * (s[0] * s[0] + s[1] * s[1]) + (1.0 - mu) / r1 + mu / r2


@jit
def eom_into(s, mu, out):
    """Write the CR3BP state derivative into ``out``; False at a primary."""
    x, y, z = s[0], s[1], s[2]
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    r1sq = dx1 * dx1 + y * y + z * z
    r2sq = dx2 * dx2 + y * y + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    if r1 < SINGULAR_RADIUS or r2 < SINGULAR_RADIUS:
        return False
    g1 = (1.0 - mu) / (r1sq * r1)
    g2 = mu / (r2sq * r2)
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = 2.0 * s[4] + x - g1 * dx1 - g2 * dx2
    out[4] = -2.0 * s[3] + y - g1 * y - g2 * y
    out[5] = -g1 * z - g2 * z
    return True


@jit
def hessian_into(s, mu, G):
    """Second partials of the pseudo-potential; False at a primary."""
    x, y, z = s[0], s[1], s[2]
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    r1sq = dx1 * dx1 + y * y + z * z
    r2sq = dx2 * dx2 + y * y + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    if r1 < SINGULAR_RADIUS or r2 < SINGULAR_RADIUS:
        return False
    a3 = (1.0 - mu) / (r1sq * r1)
    b3 = mu / (r2sq * r2)
    a5 = 3.0 * a3 / r1sq
    b5 = 3.0 * b3 / r2sq
    G[0, 0] = 1.0 - a3 - b3 + a5 * dx1 * dx1 + b5 * dx2 * dx2
    G[1, 1] = 1.0 - a3 - b3 + (a5 + b5) * y * y
    G[2, 2] = -a3 - b3 + (a5 + b5) * z * z
    G[0, 1] = a5 * dx1 * y + b5 * dx2 * y
    G[0, 2] = a5 * dx1 * z + b5 * dx2 * z
    G[1, 2] = (a5 + b5) * y * z
    G[1, 0] = G[0, 1]
    G[2, 0] = G[0, 2]
    G[2, 1] = G[1, 2]
    return True


@jit
def jacobian_into(s, mu, A):
    G = np.empty((3, 3))
    if not hessian_into(s, mu, G):
        return False
    A[:, :] = 0.0
    for i in range(3):
        A[i, i + 3] = 1.0
        for j in range(3):
            A[i + 3, j] = G[i, j]
    A[3, 4] = 2.0
    A[4, 3] = -2.0
    return True


@jit
def rhs(mode, y, mu, Q, out):
    """State (mode 0) or state + Riccati covariance (mode 1) derivative."""
    if not eom_into(y[:6], mu, out[:6]):
        return False
    if mode == MODE_STATE:
        return True
    G = np.empty((3, 3))
    hessian_into(y[:6], mu, G)
    # M = A P with A = [[0, I], [G, C]], C the Coriolis block
    M = np.empty((6, 6))
    for j in range(6):
        p0 = y[6 + 0 * 6 + j]
        p1 = y[6 + 1 * 6 + j]
        p2 = y[6 + 2 * 6 + j]
        p3 = y[6 + 3 * 6 + j]
        p4 = y[6 + 4 * 6 + j]
        p5 = y[6 + 5 * 6 + j]
        M[0, j] = p3
        M[1, j] = p4
        M[2, j] = p5
        M[3, j] = G[0, 0] * p0 + G[0, 1] * p1 + G[0, 2] * p2 + 2.0 * p4
        M[4, j] = G[1, 0] * p0 + G[1, 1] * p1 + G[1, 2] * p2 - 2.0 * p3
        M[5, j] = G[2, 0] * p0 + G[2, 1] * p1 + G[2, 2] * p2
    for i in range(6):
        for j in range(6):
            out[6 + 6 * i + j] = M[i, j] + M[j, i] + Q[i, j]
    return True


# --------------------------------------------------------------------------
# Dormand-Prince 5(4)
# --------------------------------------------------------------------------

@jit
def _dp_step(mode, y, f0, h, mu, Q, K, ytmp, ynew, fnew, atol, rtol):
    """One trial step. Returns (ok, scaled max-norm error)."""
    n = y.shape[0]
    for i in range(n):
        ytmp[i] = y[i] + h * _A21 * f0[i]
    if not rhs(mode, ytmp, mu, Q, K[1]):
        return False, 0.0
    for i in range(n):
        ytmp[i] = y[i] + h * (_A31 * f0[i] + _A32 * K[1, i])
    if not rhs(mode, ytmp, mu, Q, K[2]):
        return False, 0.0
    for i in range(n):
        ytmp[i] = y[i] + h * (_A41 * f0[i] + _A42 * K[1, i] + _A43 * K[2, i])
    if not rhs(mode, ytmp, mu, Q, K[3]):
        return False, 0.0
    for i in range(n):
        ytmp[i] = y[i] + h * (_A51 * f0[i] + _A52 * K[1, i] + _A53 * K[2, i] + _A54 * K[3, i])
    if not rhs(mode, ytmp, mu, Q, K[4]):
        return False, 0.0
    for i in range(n):
        ytmp[i] = y[i] + h * (_A61 * f0[i] + _A62 * K[1, i] + _A63 * K[2, i]
                              + _A64 * K[3, i] + _A65 * K[4, i])
    if not rhs(mode, ytmp, mu, Q, K[5]):
        return False, 0.0
    for i in range(n):
        ynew[i] = y[i] + h * (_A71 * f0[i] + _A73 * K[2, i] + _A74 * K[3, i]
                              + _A75 * K[4, i] + _A76 * K[5, i])
    if not rhs(mode, ynew, mu, Q, fnew):
        return False, 0.0
    err = 0.0
    for i in range(n):
        e = h * (_E1 * f0[i] + _E3 * K[2, i] + _E4 * K[3, i] + _E5 * K[4, i]
                 + _E6 * K[5, i] + _E7 * fnew[i])
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        r = abs(e) / sc
        if r > err:
            err = r
    return True, err


@jit
def initial_step(mode, y, f0, direction, mu, Q, atol, rtol, max_step):
    n = y.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, max_step)
    y1 = np.empty(n)
    f1 = np.empty(n)
    for i in range(n):
        y1[i] = y[i] + direction * h0 * f0[i]
    if not rhs(mode, y1, mu, Q, f1):
        return h0
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0
    dm = max(d1, d2)
    if dm <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / dm) ** 0.2
    return min(100.0 * h0, h1, max_step)


@jit
def integrate_segment(mode, y, t0, t1, h_guess, rtol, atol, max_step, mu, Q, out):
    """Integrate from ``t0`` to exactly ``t1``; the final state goes to ``out``.

    Returns ``(status, h_next, n_accepted)`` where ``h_next`` is the step
    size the controller would try next, for warm-starting the next call.
    """
    n = y.shape[0]
    out[:] = y
    if t1 == t0:
        return OK, h_guess, 0
    direction = 1.0 if t1 > t0 else -1.0
    f0 = np.empty(n)
    if not rhs(mode, out, mu, Q, f0):
        return SINGULAR, h_guess, 0
    if h_guess <= 0.0:
        h = initial_step(mode, out, f0, direction, mu, Q, atol, rtol, max_step)
    else:
        h = min(h_guess, max_step)
    K = np.empty((7, n))
    ytmp = np.empty(n)
    ynew = np.empty(n)
    fnew = np.empty(n)
    t = t0
    err_old = 1e-4
    rejected = False
    h_next = h
    naccept = 0
    for _ in range(MAX_STEPS):
        remaining = (t1 - t) * direction
        if remaining <= 0.0:
            return OK, h_next, naccept
        last = False
        h_try = h
        if h_try >= remaining:
            h_try = remaining
            last = True
        if h_try < 16.0 * 2.220446049250313e-16 * max(abs(t), 1.0):
            return STEP_TOO_SMALL, h, naccept
        ok, err = _dp_step(mode, out, f0, direction * h_try, mu, Q, K, ytmp, ynew, fnew,
                           atol, rtol)
        if not ok:
            # probe inside a primary: shrink and retry, give up below tolerance
            h = 0.25 * h_try
            rejected = True
            if h < 1e-14:
                return SINGULAR, h, naccept
            continue
        if err <= 1.0:
            fac11 = err ** _EXPO1 if err > 0.0 else 0.0
            fac = fac11 / err_old ** _BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFE))
            h_new = h_try / fac
            if rejected:
                h_new = min(h_new, h_try)
            err_old = max(err, 1e-4)
            rejected = False
            out[:] = ynew
            f0[:] = fnew
            naccept += 1
            if last:
                t = t1
                # keep the untruncated suggestion when the last step was clipped
                h_next = max(h_new, h) if h_try < h else h_new
                h_next = min(h_next, max_step)
                return OK, h_next, naccept
            t = t + direction * h_try
            h = min(h_new, max_step)
            h_next = h
        else:
            fac11 = err ** _EXPO1
            h = h_try / min(1.0 / _FAC_MIN, fac11 / _SAFE)
            rejected = True
    return TOO_MANY_STEPS, h, naccept


@jit
def propagate_grid(y0, times, rtol, atol, max_step, mu, out):
    """State at each entry of ``times`` (``times[0]`` is the epoch of ``y0``)."""
    Q = np.zeros((6, 6))
    out[0, :] = y0
    h = 0.0
    buf = np.empty(6)
    for k in range(1, times.shape[0]):
        status, h, _ = integrate_segment(MODE_STATE, out[k - 1], times[k - 1], times[k], h,
                                         rtol, atol, max_step, mu, Q, buf)
        if status != OK:
            return status, k
        out[k, :] = buf
    return OK, times.shape[0]


@jit
def integrate_record(y0, t0, t1, rtol, atol, max_step, mu):
    """Integrate and keep every accepted step (for dense Hermite output).

    Returns ``(status, times, states, derivatives)``.
    """
    Q = np.zeros((6, 6))
    cap = 256
    ts = np.empty(cap)
    ys = np.empty((cap, 6))
    fs = np.empty((cap, 6))
    cur = y0.copy()
    f0 = np.empty(6)
    if not rhs(MODE_STATE, cur, mu, Q, f0):
        return SINGULAR, ts[:0], ys[:0], fs[:0]
    ts[0] = t0
    ys[0] = cur
    fs[0] = f0
    count = 1
    if t1 == t0:
        return OK, ts[:1], ys[:1], fs[:1]
    direction = 1.0 if t1 > t0 else -1.0
    t = t0
    h = 0.0
    nxt = np.empty(6)
    while (t1 - t) * direction > 0.0:
        # advance one accepted step at a time by capping the segment length
        status, h_new, t_new = accepted_step(cur, t, t1, h, rtol, atol, max_step, mu, Q, nxt)
        if status != OK:
            return status, ts[:count], ys[:count], fs[:count]
        t = t_new
        h = h_new
        cur[:] = nxt
        if count == cap:
            cap *= 2
            ts2 = np.empty(cap)
            ys2 = np.empty((cap, 6))
            fs2 = np.empty((cap, 6))
            ts2[:count] = ts[:count]
            ys2[:count] = ys[:count]
            fs2[:count] = fs[:count]
            ts, ys, fs = ts2, ys2, fs2
        rhs(MODE_STATE, cur, mu, Q, f0)
        ts[count] = t
        ys[count] = cur
        fs[count] = f0
        count += 1
    return OK, ts[:count], ys[:count], fs[:count]


@jit
def accepted_step(y, t, t_end, h, rtol, atol, max_step, mu, Q, out):
    """Take exactly one accepted step toward ``t_end``.

    Returns ``(status, h_next, t_new)``.
    """
    n = y.shape[0]
    direction = 1.0 if t_end > t else -1.0
    f0 = np.empty(n)
    if not rhs(MODE_STATE, y, mu, Q, f0):
        return SINGULAR, h, t
    if h <= 0.0:
        h = initial_step(MODE_STATE, y, f0, direction, mu, Q, atol, rtol, max_step)
    K = np.empty((7, n))
    ytmp = np.empty(n)
    fnew = np.empty(n)
    rejected = False
    for _ in range(1000):
        remaining = (t_end - t) * direction
        h_try = min(h, remaining)
        if h_try < 16.0 * 2.220446049250313e-16 * max(abs(t), 1.0):
            return STEP_TOO_SMALL, h, t
        ok, err = _dp_step(MODE_STATE, y, f0, direction * h_try, mu, Q, K, ytmp, out, fnew,
                           atol, rtol)
        if not ok:
            h = 0.25 * h_try
            if h < 1e-14:
                return SINGULAR, h, t
            continue
        if err <= 1.0:
            fac11 = err ** _EXPO1 if err > 0.0 else 0.0
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac11 / _SAFE))
            h_new = h_try / fac
            if rejected:
                h_new = min(h_new, h_try)
            if h_try == remaining:
                return OK, min(max(h_new, h), max_step), t_end
            return OK, min(h_new, max_step), t + direction * h_try
        h = h_try / min(1.0 / _FAC_MIN, err ** _EXPO1 / _SAFE)
        rejected = True
    return STEP_TOO_SMALL, h, t


# --------------------------------------------------------------------------
# measurement geometry
# --------------------------------------------------------------------------

@jit
def _clamp_unit(c):
    if c > 1.0:
        return 1.0
    if c < -1.0:
        return -1.0
    return c


@jit
def angles(gamma, rho):
    """Azimuth (xy-plane) and elevation (xz-plane) angles. Returns (status, a, e)."""
    nga = math.sqrt(gamma[0] * gamma[0] + gamma[1] * gamma[1])
    nra = math.sqrt(rho[0] * rho[0] + rho[1] * rho[1])
    nge = math.sqrt(gamma[0] * gamma[0] + gamma[2] * gamma[2])
    nre = math.sqrt(rho[0] * rho[0] + rho[2] * rho[2])
    if nga < PROJECTION_EPS or nra < PROJECTION_EPS or nge < PROJECTION_EPS or nre < PROJECTION_EPS:
        return GEOM_DEGENERATE, 0.0, 0.0
    ca = _clamp_unit((gamma[0] * rho[0] + gamma[1] * rho[1]) / (nga * nra))
    ce = _clamp_unit((gamma[0] * rho[0] + gamma[2] * rho[2]) / (nge * nre))
    return GEOM_OK, math.acos(ca), math.acos(ce)


@jit
def partial_rows(gamma, rho, out):
    """d(alpha, eps)/d(rho) into the 2x3 array ``out``, row by row.

    Returns ``(status, ok_alpha, ok_eps)``. A row whose angle sits at 0 or pi
    has an unbounded arccos derivative and is flagged rather than filled.
    """
    nga = math.sqrt(gamma[0] * gamma[0] + gamma[1] * gamma[1])
    nra2 = rho[0] * rho[0] + rho[1] * rho[1]
    nra = math.sqrt(nra2)
    nge = math.sqrt(gamma[0] * gamma[0] + gamma[2] * gamma[2])
    nre2 = rho[0] * rho[0] + rho[2] * rho[2]
    nre = math.sqrt(nre2)
    if nga < PROJECTION_EPS or nra < PROJECTION_EPS or nge < PROJECTION_EPS or nre < PROJECTION_EPS:
        return GEOM_DEGENERATE, False, False
    ca = (gamma[0] * rho[0] + gamma[1] * rho[1]) / (nga * nra)
    ce = (gamma[0] * rho[0] + gamma[2] * rho[2]) / (nge * nre)
    sa = 1.0 - ca * ca
    se = 1.0 - ce * ce
    ok_a = sa > DERIV_EPS * DERIV_EPS
    ok_e = se > DERIV_EPS * DERIV_EPS
    # d acos(c) = -dc / sqrt(1 - c^2)
    if ok_a:
        sa = math.sqrt(sa)
        out[0, 0] = -(gamma[0] / (nga * nra) - ca * rho[0] / nra2) / sa
        out[0, 1] = -(gamma[1] / (nga * nra) - ca * rho[1] / nra2) / sa
        out[0, 2] = 0.0
    if ok_e:
        se = math.sqrt(se)
        out[1, 0] = -(gamma[0] / (nge * nre) - ce * rho[0] / nre2) / se
        out[1, 1] = 0.0
        out[1, 2] = -(gamma[2] / (nge * nre) - ce * rho[2] / nre2) / se
    if ok_a and ok_e:
        return GEOM_OK, True, True
    return GEOM_SINGULAR_DERIV, ok_a, ok_e


@jit
def angle_partials(gamma, rho, out):
    """d(alpha, eps)/d(rho) into the 2x3 array ``out``. Returns status."""
    status, _, _ = partial_rows(gamma, rho, out)
    return status


@jit
def tangent_half_angle(radius, dist):
    """Half-angle between the body-center line and a tangent to its surface."""
    ratio = radius / dist
    return math.atan(ratio * math.sqrt(dist * dist - radius * radius) / (dist - radius * ratio))


@jit
def separation_angle(gamma_p, rho):
    ng = math.sqrt(gamma_p[0] ** 2 + gamma_p[1] ** 2 + gamma_p[2] ** 2)
    nr = math.sqrt(rho[0] ** 2 + rho[1] ** 2 + rho[2] ** 2)
    c = (gamma_p[0] * rho[0] + gamma_p[1] * rho[1] + gamma_p[2] * rho[2]) / (ng * nr)
    return math.acos(_clamp_unit(c))


@jit
def is_visible(obs_pos, tgt_pos, mu, max_range, r_earth, r_moon):
    rho = np.empty(3)
    for i in range(3):
        rho[i] = tgt_pos[i] - obs_pos[i]
    rng = math.sqrt(rho[0] ** 2 + rho[1] ** 2 + rho[2] ** 2)
    if rng > max_range or rng == 0.0:
        return False
    g = np.empty(3)
    for body in range(2):
        if body == 0:
            cx = -mu
            radius = r_earth
        else:
            cx = 1.0 - mu
            radius = r_moon
        g[0] = cx - obs_pos[0]
        g[1] = -obs_pos[1]
        g[2] = -obs_pos[2]
        dist = math.sqrt(g[0] ** 2 + g[1] ** 2 + g[2] ** 2)
        if dist <= radius:
            return False
        if separation_angle(g, rho) < tangent_half_angle(radius, dist):
            return False
    return True


# --------------------------------------------------------------------------
# EKF
# --------------------------------------------------------------------------

@jit
def symmetrize(P):
    for i in range(P.shape[0]):
        for j in range(i + 1, P.shape[0]):
            v = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = v
            P[j, i] = v


@jit
def clamp_psd(P):
    """Clamp negative eigenvalues to zero. Returns the smallest eigenvalue seen."""
    w, V = np.linalg.eigh(P)
    wmin = w[0]
    if wmin < 0.0:
        for i in range(w.shape[0]):
            if w[i] < 0.0:
                w[i] = 0.0
        P[:, :] = (V * w) @ V.T
        symmetrize(P)
    return wmin


@jit
def cholesky_solve(S, B):
    """Solve S X = B for symmetric positive-definite S (in place in B).

    Returns ``(ok, condition estimate)``; the estimate is the squared ratio of
    the largest to smallest Cholesky pivot.
    """
    n = S.shape[0]
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(S[i, i]))
    for j in range(n):
        s = S[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 1e-15 * scale or s <= 0.0:
            return False, np.inf
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    dmax = 0.0
    dmin = np.inf
    for i in range(n):
        dmax = max(dmax, L[i, i])
        dmin = min(dmin, L[i, i])
    m = B.shape[1]
    for c in range(m):
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * B[k, c]
            B[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = B[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * B[k, c]
            B[i, c] = s / L[i, i]
    return True, (dmax / dmin) ** 2


@jit
def correct_core(x, P, obs_pos, meas, use, sigma, mu, x_out, P_out, innov):
    """Stacked multi-observer EKF correction with partial information.

    Rows are stacked for observers with ``use[i]``; an observer whose
    predicted geometry is degenerate is dropped (``use[i]`` cleared), and
    an angle with a singular derivative contributes no row.
    Returns ``(status, n_used, condition)``.
    """
    x_out[:] = x
    P_out[:, :] = P
    m = obs_pos.shape[0]
    rows = np.empty((2 * m, 3))
    resid = np.empty(2 * m)
    part = np.empty((2, 3))
    gamma = np.empty(3)
    rho = np.empty(3)
    n_used = 0
    r = 0
    for i in range(m):
        innov[i, 0] = 0.0
        innov[i, 1] = 0.0
        if not use[i]:
            continue
        gamma[0] = 1.0 - mu - obs_pos[i, 0]
        gamma[1] = -obs_pos[i, 1]
        gamma[2] = -obs_pos[i, 2]
        for j in range(3):
            rho[j] = x[j] - obs_pos[i, j]
        status, a, e = angles(gamma, rho)
        if status != GEOM_OK:
            use[i] = False
            continue
        status, ok_a, ok_e = partial_rows(gamma, rho, part)
        if not (ok_a or ok_e):
            use[i] = False
            continue
        # a coplanar pair keeps its azimuth row; the pinned angle is dropped
        if ok_a:
            innov[i, 0] = meas[i, 0] - a
            resid[r] = innov[i, 0]
            rows[r] = part[0]
            r += 1
        if ok_e:
            innov[i, 1] = meas[i, 1] - e
            resid[r] = innov[i, 1]
            rows[r] = part[1]
            r += 1
        n_used += 1
    if n_used == 0:
        return CORR_SKIPPED, 0, 0.0
    H = np.zeros((r, 6))
    H[:, :3] = rows[:r]
    HP = H @ P
    S = HP @ H.T
    var = sigma * sigma
    for i in range(r):
        S[i, i] += var
    X = HP.copy()
    ok, cond = cholesky_solve(S, X)
    if not ok:
        return CORR_SINGULAR, n_used, cond
    # P symmetric => K = P H^T S^-1 = (S^-1 H P)^T
    K = X.T
    dx = K @ resid[:r]
    for i in range(6):
        x_out[i] = x[i] + dx[i]
    IKH = np.eye(6) - K @ H
    P_out[:, :] = IKH @ P
    symmetrize(P_out)
    return CORR_OK, n_used, cond


@jit
def predict_core(x, P, t0, t1, h, Q, rtol, atol, max_step, mu, x_out, P_out):
    y = np.empty(42)
    y[:6] = x
    for i in range(6):
        for j in range(6):
            y[6 + 6 * i + j] = P[i, j]
    out = np.empty(42)
    status, h_next, _ = integrate_segment(MODE_COVARIANCE, y, t0, t1, h, rtol, atol, max_step,
                                          mu, Q, out)
    x_out[:] = out[:6]
    for i in range(6):
        for j in range(6):
            P_out[i, j] = out[6 + 6 * i + j]
    symmetrize(P_out)
    return status, h_next


@jit
def ekf_track(truth, obs, tasked, noise, times, x0, P0, Q, sigma_meas, sigma_filter,
              max_range, r_earth, r_moon, mu, rtol, atol, max_step,
              est, pdiag, visible, corrected, innov_max, min_eig, pfull):
    """Run the full predict/correct loop over a precomputed epoch grid.

    ``truth`` is (n+1, 6), ``obs`` is (n_obs, n+1, 6), ``tasked`` and
    ``visible`` are (n+1, n_obs), ``noise`` holds unit normal draws of shape
    (n+1, n_obs, 2). ``pfull`` receives the full covariance per epoch when
    it has n+1 rows and is ignored when empty. Epoch 0 is the
    initialization epoch. Returns
    ``(status, last_completed_epoch)``.
    """
    n_ep = truth.shape[0]
    n_obs = obs.shape[0]
    x = x0.copy()
    P = P0.copy()
    xp = np.empty(6)
    Pp = np.empty((6, 6))
    est[0] = x
    for i in range(6):
        pdiag[0, i] = P[i, i]
    corrected[0] = False
    innov_max[0] = 0.0
    min_eig[0] = np.linalg.eigvalsh(P)[0]
    keep_full = pfull.shape[0] == n_ep
    if keep_full:
        pfull[0] = P
    for j in range(n_obs):
        visible[0, j] = False
    obs_pos = np.empty((n_obs, 3))
    meas = np.empty((n_obs, 2))
    use = np.empty(n_obs, dtype=np.bool_)
    innov = np.empty((n_obs, 2))
    gamma = np.empty(3)
    rho = np.empty(3)
    h = 0.0
    pi = math.pi
    for k in range(1, n_ep):
        status, h = predict_core(x, P, times[k - 1], times[k], h, Q, rtol, atol, max_step, mu,
                                 xp, Pp)
        if status != OK:
            return status, k - 1
        for j in range(n_obs):
            use[j] = False
            visible[k, j] = False
            for c in range(3):
                obs_pos[j, c] = obs[j, k, c]
            if not tasked[k, j]:
                continue
            if not is_visible(obs_pos[j], truth[k], mu, max_range, r_earth, r_moon):
                continue
            gamma[0] = 1.0 - mu - obs_pos[j, 0]
            gamma[1] = -obs_pos[j, 1]
            gamma[2] = -obs_pos[j, 2]
            for c in range(3):
                rho[c] = truth[k, c] - obs_pos[j, c]
            st, a, e = angles(gamma, rho)
            if st != GEOM_OK:
                continue
            a += sigma_meas * noise[k, j, 0]
            e += sigma_meas * noise[k, j, 1]
            meas[j, 0] = min(max(a, 0.0), pi)
            meas[j, 1] = min(max(e, 0.0), pi)
            use[j] = True
            visible[k, j] = True
        st, n_used, cond = correct_core(xp, Pp, obs_pos, meas, use, sigma_filter, mu, x, P, innov)
        if st == CORR_SINGULAR:
            est[k] = xp
            for i in range(6):
                pdiag[k, i] = Pp[i, i]
            return TRACK_INNOVATION_SINGULAR, k - 1
        corrected[k] = st == CORR_OK
        im = 0.0
        for j in range(n_obs):
            if use[j]:
                im = max(im, abs(innov[j, 0]), abs(innov[j, 1]))
        innov_max[k] = im
        min_eig[k] = clamp_psd(P)
        est[k] = x
        if keep_full:
            pfull[k] = P
        for i in range(6):
            pdiag[k, i] = P[i, i]
    return OK, n_ep - 1
