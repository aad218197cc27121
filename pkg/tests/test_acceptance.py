"""Acceptance criteria at their stated tolerances.

Each ``criterion_*`` function returns ``(ok, detail)``.  Under pytest the
results are collected and printed as one PASS/FAIL line per criterion in the
terminal summary; ``python tests/test_acceptance.py`` runs them directly.
Runtimes exclude one-off JIT compilation, which is triggered by a small
warm-up call before the clock starts.
"""
import os
import sys
import time

import numpy as np
import pytest
from scipy import stats

os.environ.setdefault("SQD_HYDRO_DEBUG", "1")

from sqd_hydro import analysis, dists, hydro, sim  # noqa: E402
from sqd_hydro.dists import (Erlang, Exponential, HyperExponential, LogNormal, Lomax,  # noqa: E402
                             Uniform, Weibull)

RESULTS: dict[int, tuple[bool, str]] = {}


def _warm_fluid():
    G = Exponential(1.0)
    init = hydro.FluidState.empty(4, 1e-2)
    hydro.solve(init, 0.05, 1e-2, 0.5, 2, G, ell_max=4, record_measures=True, sample_times=[0.0])
    hydro.solve_picard(init, 0.05, 1e-2, 0.5, 2, G, ell_max=4)


def _line(n, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"


# ---- criteria ---------------------------------------------------------------------------


def criterion_1():
    _warm_fluid()
    t0 = time.perf_counter()
    tr = hydro.solve(hydro.FluidState.empty(12, 1e-3), 10.0, 1e-3, 0.9, 2, Exponential(1.0),
                     ell_max=12, sample_times=np.arange(0, 10.0 + 1e-9, 0.1))
    ref = hydro.ode_reference(0.9, 2, np.zeros(12), 10.0, 1e-3)
    wall = time.perf_counter() - t0
    rows = tr.sample_steps
    err = float(np.max(np.abs(tr.S[rows, :10] - ref.S[rows, :10])))
    ok = err <= 5e-3 and wall < 10
    return ok, f"exponential reduction sup error {err:.3g} (<= 5e-3), {wall:.1f}s (< 10s)"


def criterion_2():
    _warm_fluid()
    t0 = time.perf_counter()
    tr = hydro.solve(hydro.FluidState.empty(12, 1e-3), 200.0, 1e-3, 0.7, 2, Exponential(1.0),
                     ell_max=12)
    wall = time.perf_counter() - t0
    # fixed point of the exponential ODE, obtained from the RK4 oracle run to equilibrium
    ref = hydro.ode_reference(0.7, 2, np.zeros(12), 200.0, 1e-2).S[-1, :5]
    closed = 0.7 ** (2.0 ** np.arange(1, 6) - 1)
    err = float(np.max(np.abs(tr.S[-1, :5] - ref)))
    ok = err <= 1e-3 and wall < 60 and np.allclose(ref, closed, atol=1e-9)
    return ok, f"equilibrium error {err:.3g} (<= 1e-3), {wall:.1f}s (< 60s)"


def criterion_3():
    _warm_fluid()
    laws = [Exponential(1.0), Uniform(2.0), Weibull(2.0, 1.0)]
    worst, wall = 0.0, 0.0
    for G in laws:
        t0 = time.perf_counter()
        tr = hydro.solve(hydro.FluidState.from_atoms([1.0], 1e-3, ell_max=2), 10.0, 1e-3, 0.0, 2,
                         G, ell_max=2, a_max=10.001)
        wall += time.perf_counter() - t0
        worst = max(worst, float(np.max(np.abs(tr.S[:, 0] - G.survival(tr.times)))))
    ok = worst <= 1e-12 and wall < 1
    return ok, f"pure-death S_1 vs survival max error {worst:.3g} (<= 1e-12), {wall:.2f}s (< 1s)"


def criterion_4():
    _warm_fluid()
    G = LogNormal(0.0, 1.0).normalized()
    t0 = time.perf_counter()
    gaps = []
    for dt in (1e-3, 5e-4):
        init = hydro.FluidState.empty(8, dt)
        a = hydro.solve(init, 10.0, dt, 0.9, 2, G)
        b = hydro.solve_picard(init, 10.0, dt, 0.9, 2, G)
        gaps.append(float(np.max(np.abs(a.S - b.S))))
    wall = time.perf_counter() - t0
    ratio = gaps[0] / gaps[1]
    ok = gaps[0] <= 1e-2 and 1.7 <= ratio <= 2.3 and wall < 120
    return ok, (f"explicit vs Picard gap {gaps[0]:.3g} (<= 1e-2), halving ratio {ratio:.2f} "
                f"(~2), {wall:.1f}s (< 120s)")


def criterion_5():
    _warm_fluid()
    sim.SimState(sim.SimParams(N=10, d=2, lam=0.9, service=Exponential(1.0)), sim.Empty(),
                 0).run(0.5)
    T, dt = 10.0, 1e-3
    times = np.arange(0, T + 1e-9, 0.5)
    parts, ok = [], True
    t0 = time.perf_counter()
    for name, G in (("Exponential(1)", Exponential(1.0)),
                    ("Weibull(2)", Weibull(2.0, 1.0).normalized())):
        fl = hydro.solve(hydro.FluidState.empty(10, dt), T, dt, 0.9, 2, G, ell_max=10,
                         sample_times=times, record_measures=True)
        mk = lambda N, G=G: sim.SimParams(N=N, d=2, lam=0.9, service=G, ell_max=10,
                                          record_ages=True)
        tab = analysis.convergence_study(fl, mk, sim.Empty(), [100, 1000, 10000], 20, T=T,
                                         sample_times=times)
        dec = tab.decreasing()
        scal = float(tab.scalar_mean[-1])
        ok &= dec and scal <= 0.02
        means = ", ".join(f"{m:.3g}" for m in tab.mean)
        parts.append(f"{name}: aggregate means [{means}] decreasing={dec}, "
                     f"scalar gap at 1e4 {scal:.3g} (<= 0.02)")
    wall = time.perf_counter() - t0
    ok &= wall < 900
    return ok, "; ".join(parts) + f"; {wall:.0f}s (< 900s)"


def criterion_6():
    configs = [
        dict(d=2, lam=0.9, service=Exponential(1.0)),
        dict(d=3, lam=0.95, service=LogNormal(0.0, 1.0).normalized()),
        dict(d=2, lam=0.8, service=Uniform(2.0).normalized(),
             arrival=Erlang(3, 3.0).normalized(1 / 0.8), R=0.3),
        dict(d=1, lam=0.6, service=Weibull(2.0, 1.0).normalized()),
    ]
    events = 0
    ok = True
    for i, kw in enumerate(configs):
        p = sim.SimParams(N=200, ell_max=8, debug=True, **kw)
        s = sim.SimState(p, sim.IidQueueLengths((0.4, 0.3, 0.2, 0.1)), seed=100 + i)
        try:
            tr = s.run(20.0)
            s.check_all()
        except sim.InvariantViolation as exc:
            return False, f"identity violated: {exc}"
        events += tr.n_events
        X, X0 = np.asarray(s.X), np.asarray(s.X0)
        top = max(int(X.max()), int(X0.max()), len(s.dep_exact), len(s.route_exact)) + 1
        dep = np.zeros(top + 2, dtype=np.int64)
        dep[: len(s.dep_exact)] = s.dep_exact
        rte = np.zeros(top + 1, dtype=np.int64)
        rte[: len(s.route_exact)] = s.route_exact
        for l in range(1, top + 1):
            # S_l = S_l(0) - D_l + D_{l+1} + R_{1,l}
            rhs = np.sum(X0 >= l) - dep[l:].sum() + dep[l + 1:].sum() + rte[l]
            ok &= bool(np.sum(X >= l) == rhs)
        ok &= s.K == s.dep_ge2 + s.arrivals_to_empty
        ok &= bool(np.array_equal(X, X0 + np.asarray(s.E_i) - np.asarray(s.D_i)))
    return ok, f"balance, K and per-queue mass identities exact over {events} events"


def criterion_7():
    specs = (sim.TrackerSpec(sim.One(), 1), sim.TrackerSpec(sim.One(), 2),
             sim.TrackerSpec(sim.IndicatorAgeAbove(0.5), 1))
    p = sim.SimParams(N=50, d=2, lam=0.5, service=Exponential(1.0), trackers=specs)
    sim.SimState(p, sim.Empty(), 0).run(0.5)
    t0 = time.perf_counter()
    outs = []
    for r in range(500):
        s = sim.SimState(p, sim.Empty(), r)
        s.run(5.0)
        outs.append(s.martingale_values())
    good = analysis.martingale_report(outs)
    bad = analysis.martingale_report(outs, b_scale=1.1)
    wall = time.perf_counter() - t0
    good_ok = all(e["pass"] for e in good)
    control_fails = not all(e["pass"] for e in bad)
    ok = good_ok and control_fails and wall < 300
    return ok, (f"trackers pass={good_ok}, 1.1-scaled control fails={control_fails}, "
                f"{wall:.1f}s (< 300s)")


def criterion_8():
    _warm_fluid()
    p = sim.SimParams(N=1000, d=2, lam=0.9, service=Exponential(1.0), ell_max=10,
                      record_queues=True)
    sim.SimState(p, sim.Empty(), 0).run(0.5, [0.5])
    t0 = time.perf_counter()
    fl = hydro.solve(hydro.FluidState.empty(10, 1e-3), 5.0, 1e-3, 0.9, 2, Exponential(1.0),
                     ell_max=10)
    traces = [sim.SimState(p, sim.Empty(), r).run(5.0, [5.0]) for r in range(500)]
    rep = analysis.chaos_estimate(traces, fl, 5.0, [1, 2])
    pc = sim.SimParams(N=50, d=1, lam=0.9, service=Exponential(1.0), ell_max=10,
                       record_queues=True)
    ctl = [sim.SimState(pc, sim.Empty(), 10_000 + r).run(5.0, [5.0]) for r in range(500)]
    rep1 = analysis.chaos_estimate(ctl, None, 5.0, [1, 2], reference="empirical")
    wall = time.perf_counter() - t0
    bound = max(3 * rep.stderr, 0.02)
    ok = rep.passes() and rep1.passes() and wall < 600
    return ok, (f"|joint - product| {abs(rep.gap):.3g} <= {bound:.3g}, d=1 independence "
                f"control pass={rep1.passes()}, {wall:.1f}s (< 600s)")


def criterion_9():
    fams = [Exponential(1.0), Erlang(3, 3.0), HyperExponential((0.3, 0.7), (0.5, 2.0)),
            Weibull(2.0, 1.0), LogNormal(0.0, 1.0), Lomax(3.0, 2.0), Uniform(2.0)]
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    ks_worst = fd_worst = co_worst = 0.0
    h = 1e-4
    for G in fams:
        x = G.samples(1_000_000, rng)
        ks_worst = max(ks_worst, float(stats.kstest(x, G.cdf).statistic))
        end = min(G.support_end, 20.0)
        grid = np.linspace(0.01, end - 0.01, 400)
        fd = (G.cdf(grid + h) - G.cdf(grid - h)) / (2 * h)
        fd_worst = max(fd_worst, float(np.max(np.abs(fd - G.density(grid)))))
        for _ in range(300):
            a, d1, d2 = rng.uniform(0, end * 0.9), rng.uniform(0, 3), rng.uniform(0, 3)
            if G.survival(a + d1) == 0:
                continue
            lhs = G.survival_ratio(a, d1 + d2)
            rhs = G.survival_ratio(a, d1) * G.survival_ratio(a + d1, d2)
            co_worst = max(co_worst, abs(lhs - rhs))
    wall = time.perf_counter() - t0
    ok = ks_worst <= 0.002 and fd_worst <= 1e-6 and co_worst <= 1e-12 and wall < 120
    return ok, (f"KS {ks_worst:.3g} (<= 0.002), FD {fd_worst:.3g} (<= 1e-6), cocycle "
                f"{co_worst:.3g} (<= 1e-12), {wall:.1f}s (< 120s)")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = CRITERIA[n]()
    RESULTS[n] = (ok, detail)
    print(_line(n, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]()
        failed += not ok
        print(_line(n, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
