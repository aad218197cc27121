"""Compiled inner loops for the fluid solvers.

Both solvers store age profiles by *cohort*: column ``b`` of the mass array holds
the mass that entered service at a common time, so its age is ``k + n0 - 1 - b``
grid steps after ``k`` steps (``n0`` initial bins).  Ageing by one step is then
free, and every per-level update is a contiguous, vectorizable loop.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# a level is dropped (its mass booked as leak) while the level below carries
# less mass than this; such levels only cost time and eventually denormals
LEVEL_FLOOR = 1e-30
BLOCK = 512


@njit(cache=True)
def poly_p(d, x, y):
    """sum_{m<d} x^m y^(d-1-m)."""
    acc = 0.0
    xm = 1.0
    for m in range(d):
        acc += xm * y ** (d - 1 - m)
        xm *= x
    return acc


@njit(cache=True, fastmath=True)
def _transport(cur, below, out, rr, qr, hc):
    """Route, age and kill one level over one step; returns (mass, departures)."""
    acc = 0.0
    dsum = 0.0
    for i in range(cur.shape[0]):
        x = cur[i] + hc * (below[i] - cur[i])
        dsum += qr[i] * x
        y = rr[i] * x
        out[i] = y
        acc += y
    return acc, dsum


@njit(cache=True)
def explicit_run(wa, wb, S, n0, nb, nsteps, dt, lam, d, rrev, qrev, snap_steps, snaps,
                 S_hist, D_hist, leak_hist, flags):
    """Advance the explicit transport scheme ``nsteps`` steps.

    ``wa``/``wb`` (L, n0 + nsteps) alternate as pre- and post-step cohort
    arrays; ``S`` holds current level masses.  ``rrev[i]`` is the one-step
    survival ratio of age bin ``nb - 1 - i`` and ``qrev`` its complement.
    ``flags[0]`` counts clamped negative inflows.
    """
    L = wa.shape[0]
    dep = np.zeros(L + 1)
    S_new = np.zeros(L)
    hc = np.zeros(L)
    skip = np.zeros(L, dtype=np.bool_)
    D = D_hist[0].copy()
    leak = leak_hist[0]
    isnap = 0
    for j in range(L):
        S_hist[0, j] = S[j]
    if isnap < snap_steps.shape[0] and snap_steps[isnap] == 0:
        _snapshot(wa, 0, n0, nb, snaps[isnap])
        isnap += 1
    for k in range(nsteps):
        if k % 2 == 0:
            cur = wa
            nxt = wb
        else:
            cur = wb
            nxt = wa
        K = k + n0 - 1  # newest cohort index; its age is 0
        lo = K - nb + 1
        if lo < 0:
            lo = 0
        off = nb - 1 - K
        for j in range(L + 1):
            dep[j] = 0.0
        for j in range(L):
            S_new[j] = 0.0
            s_below = 1.0 if j == 0 else S[j - 1]
            skip[j] = j > 0 and s_below < LEVEL_FLOOR
            hc[j] = 0.0 if j == 0 else dt * lam * poly_p(d, s_below, S[j])
            if skip[j] and S[j] != 0.0:
                for b in range(lo, K + 1):
                    leak += cur[j, b]
        # cohort blocks outermost so each block stays in cache across levels
        for c0 in range(lo, K + 1, BLOCK):
            c1 = min(c0 + BLOCK, K + 1)
            for j in range(L):
                if skip[j]:
                    for b in range(c0, c1):
                        nxt[j, b] = 0.0
                    continue
                jb = j - 1 if j > 0 else 0
                acc, dsum = _transport(cur[j, c0:c1], cur[jb, c0:c1], nxt[j, c0:c1],
                                       rrev[c0 + off:c1 + off], qrev[c0 + off:c1 + off], hc[j])
                S_new[j] += acc
                dep[j] += dsum
        for j in range(L):
            # the oldest cohort would move past a_max: retire it as departures
            if K - lo == nb - 1 and not skip[j]:
                y = nxt[j, lo]
                if y != 0.0:
                    leak += y
                    dep[j] += y
                    S_new[j] -= y
                    nxt[j, lo] = 0.0
            if S_new[j] < 0.0:
                S_new[j] = 0.0
        # routing past the top level is lost
        leak += dt * lam * S[L - 1] ** d
        newb = K + 1
        for j in range(L):
            inflow = dep[j + 1]
            if j == 0:
                inflow += dt * lam * (1.0 - S[0] ** d)
            if inflow < 0.0:
                flags[0] += 1
                inflow = 0.0
            nxt[j, newb] = inflow
            S_new[j] += inflow
        for j in range(L):
            S[j] = S_new[j]
            D[j] += dep[j]
            S_hist[k + 1, j] = S[j]
            D_hist[k + 1, j] = D[j]
        leak_hist[k + 1] = leak
        if isnap < snap_steps.shape[0] and snap_steps[isnap] == k + 1:
            _snapshot(nxt, k + 1, n0, nb, snaps[isnap])
            isnap += 1


@njit(cache=True)
def _snapshot(w, k, n0, nb, out):
    """Write the age profile (L, nb) of the cohort array after ``k`` steps."""
    L = w.shape[0]
    K = k + n0 - 1
    lo = K - nb + 1
    for j in range(L):
        for a in range(nb):
            b = K - a
            out[j, a] = w[j, b] if b >= lo and b >= 0 else 0.0


@njit(cache=True, fastmath=True)
def _relax(cur, cur_below, nxt_below, nxt, rr, h_old, h_new, hc_old, hc_new, inv):
    """Trapezoid routing step for one level; returns (<h, old>, <h, new>, mass)."""
    haz_old = 0.0
    haz_new = 0.0
    mass = 0.0
    for i in range(cur.shape[0]):
        x = cur[i]
        haz_old += h_old[i] * x
        y = rr[i] * (x + hc_old * (cur_below[i] - x))
        y = (y + hc_new * nxt_below[i]) * inv
        nxt[i] = y
        haz_new += h_new[i] * y
        mass += y
    return haz_old, haz_new, mass


@njit(cache=True)
def picard_sweep(wa, wb, k0, n0, nb, nsteps, dt, lam, d, rrev, hrev, S_prev, D_prev, S_out,
                 D_out, leak_out):
    """One relaxation sweep over a window of ``nsteps`` steps.

    The window-start cohort array is ``wa``; the arrays alternate, so the end
    state is in ``wa`` for even ``nsteps`` and in ``wb`` otherwise.
    ``S_prev``/``D_prev`` (nsteps + 1, L [+1]) are the previous iterate's scalar
    paths; they supply the routing coefficients and the service-entry flux.
    Routing uses a trapezoid rule in time (implicit at the new time level) and
    departures the trapezoid rule of ``<h, nu>``.  ``rrev[i]`` is the survival
    ratio of age bin ``nb - 1 - i`` and ``hrev[i]`` the hazard at bin ``nb - i``.
    """
    L = wa.shape[0]
    for k in range(nsteps):
        if k % 2 == 0:
            cur = wa
            nxt = wb
        else:
            cur = wb
            nxt = wa
        leak = 0.0
        K = k0 + k + n0 - 1
        lo = K - nb + 1
        if lo < 0:
            lo = 0
        newb = K + 1
        start = lo
        retire = K - lo == nb - 1
        if retire:
            start = lo + 1
        ro = nb - 1 - K
        ho = nb - K
        for j in range(L):
            s_below_old = 1.0 if j == 0 else S_prev[k, j - 1]
            s_below_new = 1.0 if j == 0 else S_prev[k + 1, j - 1]
            if j > 0 and s_below_old < LEVEL_FLOOR and s_below_new < LEVEL_FLOOR:
                for b in range(lo, newb + 1):
                    leak += cur[j, b]
                    nxt[j, b] = 0.0
                S_out[k + 1, j] = 0.0
                D_out[k + 1, j] = D_out[k, j]
                continue
            hc_old = 0.0
            hc_new = 0.0
            jb = j
            if j > 0:
                hc_old = 0.5 * dt * lam * poly_p(d, s_below_old, S_prev[k, j])
                hc_new = 0.5 * dt * lam * poly_p(d, s_below_new, S_prev[k + 1, j])
                jb = j - 1
            inv = 1.0 / (1.0 + hc_new)
            flux = 0.5 * (D_prev[k + 1, j + 1] - D_prev[k, j + 1])
            e0 = flux
            e1 = flux * rrev[nb - 1]
            if j == 0:
                e0 += 0.5 * dt * lam * (1.0 - S_prev[k + 1, 0] ** d)
                e1 += 0.5 * dt * lam * (1.0 - S_prev[k, 0] ** d) * rrev[nb - 1]
            haz_old = 0.0
            if retire:
                # oldest cohort leaves the grid
                x = cur[j, lo]
                haz_old += hrev[1] * x
                leak += x
                nxt[j, lo] = 0.0
            ho_, hn_, mass = _relax(cur[j, start:K + 1], cur[jb, start:K + 1],
                                    nxt[jb, start:K + 1], nxt[j, start:K + 1],
                                    rrev[start + ro:nb], hrev[start + ho:nb + 1],
                                    hrev[start + ho - 1:nb], hc_old, hc_new, inv)
            haz_old += ho_
            haz_new = hn_
            # entries during the step: half at the new time, half one step earlier
            if nb > 1:
                extra = e1 * inv
                nxt[j, K] += extra
                haz_new += hrev[nb - 1] * extra
                mass += extra
            else:
                leak += e1
            y0 = e0
            if j > 0:
                y0 = (e0 + hc_new * nxt[j - 1, newb]) * inv
            nxt[j, newb] = y0
            haz_new += hrev[nb] * y0
            mass += y0
            S_out[k + 1, j] = mass
            D_out[k + 1, j] = D_out[k, j] + 0.5 * dt * (haz_old + haz_new)
        leak_out[k + 1] = leak_out[k] + leak


@njit(cache=True)
def _ode_rhs(s, lam, d, out):
    L = s.shape[0]
    for j in range(L):
        below = 1.0 if j == 0 else s[j - 1]
        above = s[j + 1] if j + 1 < L else 0.0
        out[j] = lam * (below**d - s[j] ** d) - (s[j] - above)


@njit(cache=True)
def ode_rk4(s0, lam, d, dt, nsteps):
    L = s0.shape[0]
    out = np.empty((nsteps + 1, L))
    s = s0.copy()
    k1 = np.empty(L)
    k2 = np.empty(L)
    k3 = np.empty(L)
    k4 = np.empty(L)
    tmp = np.empty(L)
    out[0] = s
    for n in range(nsteps):
        _ode_rhs(s, lam, d, k1)
        for j in range(L):
            tmp[j] = s[j] + 0.5 * dt * k1[j]
        _ode_rhs(tmp, lam, d, k2)
        for j in range(L):
            tmp[j] = s[j] + 0.5 * dt * k2[j]
        _ode_rhs(tmp, lam, d, k3)
        for j in range(L):
            tmp[j] = s[j] + dt * k3[j]
        _ode_rhs(tmp, lam, d, k4)
        for j in range(L):
            s[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        out[n + 1] = s
    return out
