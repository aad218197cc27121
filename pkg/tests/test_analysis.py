import copy

import numpy as np
import pytest

from sqd_hydro import analysis
from sqd_hydro.analysis import (AlignmentError, StatisticalPowerError, chaos_estimate,
                                convergence_study, martingale_report, state_distance)
from sqd_hydro.dists import Exponential
from sqd_hydro.hydro import FluidState, solve
from sqd_hydro.sim import Empty, IidQueueLengths, One, SimParams, SimState, TrackerSpec

EXP = Exponential(1.0)
TIMES = [0.0, 1.0, 2.0, 3.0]


@pytest.fixture(scope="module")
def fluid():
    return solve(FluidState.empty(6, 1e-2), 3.0, 1e-2, 0.8, 2, EXP, ell_max=6,
                 sample_times=TIMES, record_measures=True)


def sim_trace(N=200, seed=0, lam=0.8, **kw):
    p = SimParams(N=N, d=2, lam=lam, service=EXP, ell_max=6, record_ages=True,
                  record_queues=True, **kw)
    return SimState(p, Empty(), seed).run(3.0, TIMES)


# ---- distances --------------------------------------------------------------------------------


def test_identical_traces_have_zero_distance(fluid):
    tr = sim_trace()
    for a in (tr, fluid):
        rep = state_distance(a, a, grid=fluid.grid)
        assert np.all(rep.scalar_gap == 0) and np.all(rep.age_gap == 0)
        assert rep.sup_aggregate == 0


def test_distance_symmetric_and_nonnegative(fluid):
    tr = sim_trace(seed=3)
    ab = state_distance(tr, fluid)
    ba = state_distance(fluid, tr)
    assert np.array_equal(ab.scalar_gap, ba.scalar_gap)
    assert np.array_equal(ab.age_gap, ba.age_gap)
    assert np.all(ab.scalar_gap >= 0) and np.all(ab.age_gap >= 0)
    assert ab.sup_aggregate > 0
    assert ab.scalar_gap[0].max() == 0  # both start empty
    # the age gap dominates the scalar gap since the total mass is the last CDF value
    assert np.all(ab.age_gap >= ab.scalar_gap - 1e-15)
    assert "Kolmogorov" in ab.note


def test_distance_detects_any_change(fluid):
    tr = sim_trace(seed=4)
    other = copy.deepcopy(tr)
    other.ages[2] = other.ages[2] + 0.5
    rep = state_distance(tr, other, grid=fluid.grid)
    assert rep.age_gap[2].max() > 0 and rep.scalar_gap.max() == 0
    assert rep.sup_aggregate > 0


def test_alignment_errors(fluid):
    tr = sim_trace()
    coarse = solve(FluidState.empty(6, 5e-2), 3.0, 5e-2, 0.8, 2, EXP, sample_times=TIMES,
                   record_measures=True)
    with pytest.raises(AlignmentError):
        state_distance(fluid, coarse)
    p = SimParams(N=50, d=2, lam=0.8, service=EXP, ell_max=6)
    odd = SimState(p, Empty(), 0).run(3.0, [0.0, 1.234])
    with pytest.raises(AlignmentError):
        state_distance(odd, fluid)
    with pytest.raises(TypeError):
        state_distance(tr, np.zeros(3))


def test_sim_pair_without_grid_has_no_age_gap():
    assert state_distance(sim_trace(), sim_trace(seed=1)).age_gap is None


def test_distance_without_ages_uses_scalar_gap(fluid):
    p = SimParams(N=100, d=2, lam=0.8, service=EXP, ell_max=6)
    tr = SimState(p, Empty(), 1).run(3.0, TIMES)
    rep = state_distance(tr, fluid)
    assert rep.age_gap is None
    assert np.allclose(rep.aggregate, rep.weighted)
    rows = list(rep.rows())
    assert len(rows) == 4 * 6 and np.isnan(rows[0][3])


# ---- chaos ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def chaos_traces():
    p = SimParams(N=30, d=2, lam=0.8, service=EXP, ell_max=6, record_queues=True)
    return [SimState(p, Empty(), s).run(2.0, [2.0]) for s in range(120)]


@pytest.fixture(scope="module")
def chaos_fluid():
    return solve(FluidState.empty(6, 1e-2), 2.0, 1e-2, 0.8, 2, EXP, ell_max=6)


def test_chaos_k1_is_marginal(chaos_traces, chaos_fluid):
    rep = chaos_estimate(chaos_traces, chaos_fluid, 2.0, [1])
    p_hat = np.mean([tr.lengths[0, 0] >= 1 for tr in chaos_traces])
    assert rep.joint == p_hat
    assert abs(rep.gap) == pytest.approx(abs(p_hat - chaos_fluid.S_at(2.0)[0]), abs=1e-15)
    assert 0 <= rep.joint <= 1 and 0 <= rep.product <= 1


@pytest.mark.parametrize("levels", [[1, 2], [1, 1, 2], [2, 1, 1, 1]])
@pytest.mark.parametrize("ref", ["fluid", "empirical"])
def test_chaos_decomposition_telescopes(chaos_traces, chaos_fluid, levels, ref):
    rep = chaos_estimate(chaos_traces, chaos_fluid, 2.0, levels, reference=ref)
    assert rep.dependence + rep.marginal_terms.sum() == pytest.approx(rep.gap, abs=1e-12)
    assert abs(rep.gap) <= abs(rep.dependence) + np.abs(rep.marginal_terms).sum() + 1e-15
    if ref == "empirical":
        assert np.all(rep.marginal_terms == 0)


def test_chaos_power_and_arguments(chaos_traces, chaos_fluid):
    with pytest.raises(StatisticalPowerError):
        chaos_estimate(chaos_traces[:50], chaos_fluid, 2.0, [1, 2])
    with pytest.raises(ValueError):
        chaos_estimate(chaos_traces, chaos_fluid, 2.0, [1, 1, 1, 1, 1])
    with pytest.raises(AlignmentError):
        chaos_estimate(chaos_traces, chaos_fluid, 1.0, [1, 2])


def test_chaos_independent_queues_d1():
    p = SimParams(N=50, d=1, lam=0.8, service=EXP, ell_max=6, record_queues=True)
    traces = [SimState(p, Empty(), 1000 + s).run(3.0, [3.0]) for s in range(300)]
    rep = chaos_estimate(traces, None, 3.0, [1, 1], reference="empirical")
    assert rep.passes()


# ---- martingales ---------------------------------------------------------------------------


def _mart_outputs(lam, n, seed0=0):
    p = SimParams(N=20, d=2, lam=lam, service=EXP, ell_max=6,
                  trackers=(TrackerSpec(One(), 1), TrackerSpec(One(), 2)))
    out = []
    for s in range(n):
        st = SimState(p, IidQueueLengths((0.5, 0.5)), seed0 + s)
        st.run(2.0)
        out.append(st.martingale_values())
    return out


def test_martingale_report_without_arrivals():
    rep = martingale_report(_mart_outputs(0.0, 200))
    for e in rep:
        assert e["meanN"] == 0 and e["varN"] == 0 and e["meanQuadN"] == 0
        assert e["pass_meanN"] and e["pass_varN"]
    assert rep[0]["pass"]


def test_martingale_report_flags_and_control():
    outs = _mart_outputs(0.6, 240)
    good = martingale_report(outs)
    assert all(e["pass"] for e in good)
    bad = martingale_report(outs, b_scale=1.5)
    assert not bad[0]["pass_meanN"]
    assert bad[0]["pass_meanM"]  # the departure side is untouched
    with pytest.raises(StatisticalPowerError):
        martingale_report(outs[:100])


def test_martingale_bootstrap_reproducible():
    outs = _mart_outputs(0.6, 200, seed0=50)
    a = martingale_report(outs, seed=1)
    b = martingale_report(outs, seed=1)
    assert a == b


# ---- convergence ----------------------------------------------------------------------------


def test_convergence_deterministic(fluid):
    mk = lambda N: SimParams(N=N, d=2, lam=0.8, service=EXP, ell_max=6, record_ages=True)
    a = convergence_study(fluid, mk, Empty(), [50, 200], 4, T=3.0, sample_times=TIMES)
    b = convergence_study(fluid, mk, Empty(), [50, 200], 4, T=3.0, sample_times=TIMES)
    assert np.array_equal(a.mean, b.mean) and a.raw == b.raw
    assert [r["seed"] for r in a.raw[0]] == [0, 1, 2, 3]
    assert len(list(a.rows())) == 2


def test_pure_death_gap_scales_like_inverse_sqrt_N():
    dt = 1e-2
    times = [0.5, 1.0, 1.5, 2.0]
    fl = solve(FluidState.from_atoms([1.0], dt, ell_max=2), 2.0, dt, 0.0, 2, EXP, ell_max=2,
               sample_times=times, record_measures=True)
    mk = lambda N: SimParams(N=N, d=2, lam=0.0, service=EXP, ell_max=2, record_ages=True)
    tab = convergence_study(fl, mk, IidQueueLengths((0.0, 1.0)), [100, 400, 1600, 6400], 30,
                            T=2.0, sample_times=times, base_seed=7)
    assert -0.7 <= tab.fit_exponent() <= -0.3
    assert tab.decreasing()


def test_mismatched_fluid_plateaus():
    dt = 1e-2
    times = [0.0, 1.0, 2.0, 3.0, 4.0]
    wrong = solve(FluidState.empty(8, dt), 4.0, dt, 0.9 * 1.1, 2, EXP, ell_max=8,
                  sample_times=times, record_measures=True)
    mk = lambda N: SimParams(N=N, d=2, lam=0.9, service=EXP, ell_max=8, record_ages=True)
    tab = convergence_study(wrong, mk, Empty(), [1000, 10000], 4, T=4.0, sample_times=times)
    # the gap stays above the model-mismatch floor instead of shrinking like 1/sqrt(N)
    assert tab.mean[1] > 0.6 * tab.mean[0]
    assert tab.mean[1] > 0.02


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SQD_HYDRO_THREADS", "3")
    assert analysis._workers(None) == 3
    assert analysis._workers(1) == 1
    monkeypatch.delenv("SQD_HYDRO_THREADS")
    assert analysis._workers(None) == 1
