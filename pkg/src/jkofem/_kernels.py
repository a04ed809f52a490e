"""Compiled node-by-node Newton solver for the reduced Step-B problems.

Mobility terms are packed into flat arrays:

* ``kind[j]`` is 0 for c*rho**gamma (``pa[j]`` = gamma) and 1 for
  c*l(A rho**alpha, B rho**beta) (``pa[j]``, ``pb[j]`` = alpha, beta);
* ``LAB[j, n]`` = log(A/B) and ``SAB[j, n]`` = sqrt(A*B) carry the per-node
  log-mean coefficients (SAB = 0 marks a dead reaction);
* ``C2[j, n]`` are the squared target coefficients.

The energy is 0 (none), 1 (entropy, derivative alpha*(log rho + elog)) or
2 (alpha*rho**m/(m-1)).  The algorithm is a safeguarded Newton iteration like the
vectorized reference ``alg2.solve_nodes_numpy``, with a lazily built bracket.
Terms flagged in ``ncv`` (mobility not concave) can make a node problem
nonconvex; at such nodes a log-spaced scan of the derivative looks for other
local minima and the one with the lowest objective is kept.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

RHO_MIN = 1e-12
SCAN_DECADES = 10.0
EPS = np.finfo(np.float64).eps


@njit(cache=True)
def _sinhc3(x):
    y = 0.5 * x
    if abs(y) < 0.1:
        y2 = y * y
        h = 1.0 + y2 / 6.0 * (1.0 + y2 / 20.0 * (1.0 + y2 / 42.0 * (1.0 + y2 / 72.0)))
        d1 = y / 3.0 + y * y2 / 30.0 + y * y2 * y2 / 840.0 + y * y2 ** 3 / 45360.0
        d2 = 1.0 / 3.0 + y2 / 10.0 + y2 * y2 / 168.0 + y2 ** 3 / 6480.0
    else:
        sh = math.sinh(y)
        ch = math.cosh(y)
        h = sh / y
        d1 = (y * ch - sh) / (y * y)
        d2 = sh / y - 2.0 * ch / (y * y) + 2.0 * sh / (y * y * y)
    return h, 0.5 * d1, 0.25 * d2


@njit(cache=True)
def _mobility(kind, c, a, b, lab, sab, rho):
    """(V, V', V'') of one term; for log means ``lab`` = log(A/B), ``sab`` = sqrt(A*B)."""
    if kind == 0:
        g = a
        if g == 0.0:
            return c, 0.0, 0.0
        if g == 1.0:
            return c * rho, c, 0.0
        if rho == 0.0:
            return 0.0, (math.inf if g < 1.0 else 0.0), 0.0
        return c * rho ** g, c * g * rho ** (g - 1.0), c * g * (g - 1.0) * rho ** (g - 2.0)
    if sab == 0.0:
        return 0.0, 0.0, 0.0
    rho = max(rho, RHO_MIN)
    u = math.log(rho)
    q = 0.5 * (a + b)
    nu = a - b
    h, h1, h2 = _sinhc3(lab + nu * u)
    base = c * sab * math.exp(q * u)
    du = base * (q * h + nu * h1)
    duu = base * (q * q * h + 2.0 * q * nu * h1 + nu * nu * h2)
    return base * h, du / rho, (duu - du) / (rho * rho)


@njit(cache=True)
def _split(lo, hi, j):
    """Safeguard point inside (lo, hi); geometric when the bracket spans decades.

    With lo = 0 the j-th call takes hi * 2**-(2**j) (capped), so roots many
    decades below hi are reached in a few dozen steps instead of one halving
    per binary digit.
    """
    if lo == 0.0 and hi < math.inf:
        x = hi * 2.0 ** (-(2.0 ** min(j, 9)))
        return x if x > 0.0 else 0.5 * hi
    if lo > 0.0 and hi < math.inf and hi > 4.0 * lo:
        return math.sqrt(lo) * math.sqrt(hi)
    return 0.5 * (lo + hi)


@njit(cache=True)
def _grad_hess(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin):
    g = (x - r * rbar[n]) / r
    h = 1.0 / r
    for j in range(kind.shape[0]):
        c2 = C2[j, n]
        if c2 <= 0.0:
            continue
        v, d1, d2 = _mobility(kind[j], cs[j], pa[j], pb[j], LAB[j, n], SAB[j, n], x)
        den = r + v
        g -= r * r * c2 * d1 / (2.0 * den * den)
        if math.isfinite(d1):
            h += r * r * c2 * (2.0 * d1 * d1 - den * d2) / (2.0 * den * den * den)
    if ekind == 1:
        if x > 0.0:
            g += dt * ealpha * (math.log(x) + elog)
            h += dt * ealpha / x
        else:
            g = -math.inf
    elif ekind == 2:
        g += dt * ealpha * em / (em - 1.0) * x ** (em - 1.0)
        if x > 0.0:
            h += dt * ealpha * em * x ** (em - 2.0)
    g += dt * lin[n]
    return g, h


@njit(cache=True)
def _value(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin):
    f = (x - r * rbar[n]) ** 2 / (2.0 * r)
    for j in range(kind.shape[0]):
        c2 = C2[j, n]
        if c2 <= 0.0:
            continue
        v, _, _ = _mobility(kind[j], cs[j], pa[j], pb[j], LAB[j, n], SAB[j, n], x)
        f += r * r * c2 / (2.0 * (r + v))
    if ekind == 1:
        if x > 0.0:
            f += dt * ealpha * x * (math.log(x) + elog - 1.0)
    elif ekind == 2:
        f += dt * ealpha * x ** em / (em - 1.0)
    return f + dt * lin[n] * x


@njit(cache=True)
def _bracketed(lo, hi, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin,
               tol, maxit):
    """Safeguarded Newton inside [lo, hi] with grad(lo) < 0 <= grad(hi)."""
    j = 0
    x = _split(lo, hi, j)
    for _ in range(maxit):
        g, h = _grad_hess(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
        if g < 0.0:
            lo = x
        elif g > 0.0:
            hi = x
        step = g / h
        if abs(g) <= tol or abs(step) <= 4.0 * EPS * x or hi - lo <= 4.0 * EPS * hi:
            break
        xn = x - step
        if not (h > 0.0) or not (lo < xn < hi):
            j += 1
            xn = _split(lo, hi, j)
        x = xn
    return x


@njit(cache=True)
def _globalize(xs, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin,
               tol, maxit, scan):
    """Compare the local minimizer ``xs`` with every other minimum the scan brackets."""
    s = 0.0
    for j in range(kind.shape[0]):
        s += math.sqrt(max(C2[j, n], 0.0))
    hi = max(max(r * rbar[n], 0.0) + r * s + 1.0, 2.0 * xs)
    for _ in range(60):
        g, _ = _grad_hess(hi, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
        if g > 0.0:
            break
        hi *= 2.0
    best = xs
    fbest = _value(xs, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
    pg, _ = _grad_hess(0.0, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
    if pg >= 0.0:
        f0 = _value(0.0, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
        if f0 < fbest:
            best, fbest = 0.0, f0
    px = 0.0
    for i in range(scan):
        p = hi * 10.0 ** (-SCAN_DECADES * (scan - 1 - i) / (scan - 1))
        gp, _ = _grad_hess(p, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
        if pg < 0.0 and gp >= 0.0 and not (px <= xs <= p):
            x = _bracketed(px, p, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt,
                           lin, tol, maxit)
            fx = _value(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
            if fx < fbest:
                best, fbest = x, fx
        px, pg = p, gp
    return best


@njit(cache=True)
def solve_nodes_packed(r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin,
                       ncv, scan, x0, tol, maxit, out):
    """Solve every node; returns -1 on success, else the index of a failing node.

    Newton starts from ``x0`` (the previous iterate) with the bracket
    [lo, hi] = [0, inf) tightened by the sign of every residual.  Steps that
    leave the bracket become bisections (or doublings while hi is infinite);
    the derivative at 0 is only examined when an iterate tries to cross it.
    """
    N = rbar.shape[0]
    for n in range(N):
        lo = 0.0
        hi = math.inf
        x = x0[n]
        checked0 = False
        conv = False
        j = 0
        if not (x > 0.0 and math.isfinite(x)):
            g0, _ = _grad_hess(0.0, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
            if g0 >= 0.0:
                x = 0.0
                conv = True
            else:
                s = 0.0
                for j in range(kind.shape[0]):
                    s += math.sqrt(max(C2[j, n], 0.0))
                x = 0.5 * (max(r * rbar[n], 0.0) + r * s + 1.0)
        for _ in range(0 if conv else maxit):
            g, h = _grad_hess(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog, dt, lin)
            if g < 0.0:
                lo = x
            elif g > 0.0:
                hi = x
            step = g / h
            if abs(g) <= tol or abs(step) <= 4.0 * EPS * x or (hi < math.inf and hi - lo <= 4.0 * EPS * hi):
                conv = True
                break
            xn = x - step
            if not (h > 0.0) or not math.isfinite(xn):
                xn = -1.0 if g > 0.0 else math.inf
            if xn <= lo:
                if lo == 0.0 and not checked0:
                    checked0 = True
                    g0, _ = _grad_hess(0.0, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em,
                                       elog, dt, lin)
                    if g0 >= 0.0:
                        x = 0.0
                        conv = True
                        break
                j += 1
                xn = _split(lo, hi, j)
            elif xn >= hi:
                j += 1
                xn = _split(lo, hi, j)
            elif hi == math.inf and xn > 1e15:
                break
            x = xn
        if not conv:
            out[n] = x
            return n
        if scan > 0:
            for j in range(kind.shape[0]):
                if ncv[j] and C2[j, n] > 0.0:
                    x = _globalize(x, n, r, rbar, kind, cs, pa, pb, LAB, SAB, C2, ekind, ealpha, em, elog,
                                   dt, lin, tol, maxit, scan)
                    break
        out[n] = x
    return -1
