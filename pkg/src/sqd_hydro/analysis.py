"""Statistical harness comparing simulated paths with the fluid limit.

Distances between states use, per level, the scalar gap ``|S_l - S'_l|`` and a
Kolmogorov-type gap between age measures: the sup over ages of the difference
of their cumulative masses.  The measures are deliberately *not* normalized
to probability measures first, so that sparsely populated high levels do not
dominate.  This surrogate replaces the Prohorov metric, which is impractical to
compute; it vanishes iff the binned measures coincide.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hydro import AgeGrid, FluidTrace
from .sim import SimParams, SimState, SimTrace, bin_index

__all__ = [
    "AlignmentError",
    "ChaosReport",
    "ConvergenceTable",
    "DistanceReport",
    "StatisticalPowerError",
    "chaos_estimate",
    "convergence_study",
    "martingale_report",
    "state_distance",
]

CONFIDENCE = 3.0
METRIC_NOTE = ("Prohorov distance replaced by per-level Kolmogorov distance between "
               "unnormalized age measures plus the scalar S gap")


class AlignmentError(ValueError):
    """Traces do not share sample times or age grids."""


class StatisticalPowerError(ValueError):
    """Too few replications for the requested test."""


# ---- distances --------------------------------------------------------------------------


class _View:
    """Uniform access to S paths and cumulative age masses of either trace type."""

    def __init__(self, trace, grid: AgeGrid | None):
        self.trace = trace
        self.grid = grid
        if isinstance(trace, FluidTrace):
            self.times = trace.sample_times
            self._S = trace.S[trace.sample_steps]
            self.has_ages = trace.measures is not None
        elif isinstance(trace, SimTrace):
            self.times = trace.times
            self._S = trace.S_bar
            self.has_ages = trace.ages is not None
        else:
            raise TypeError(f"cannot compare objects of type {type(trace).__name__}")

    def rows(self, times: np.ndarray) -> np.ndarray:
        idx = []
        for t in times:
            hit = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))[0]
            if hit.size == 0:
                raise AlignmentError(f"sample time {t} missing from one trace")
            idx.append(hit[0])
        return np.asarray(idx)

    def S(self, rows: np.ndarray, L: int) -> np.ndarray:
        out = np.zeros((rows.size, L))
        m = min(L, self._S.shape[1])
        out[:, :m] = self._S[rows, :m]
        return out

    def cum(self, row: int, L: int) -> np.ndarray:
        """(L, n_bins + 1) cumulative masses; the last column includes overflow."""
        nb = self.grid.n_bins
        out = np.zeros((L, nb + 1))
        if isinstance(self.trace, FluidTrace):
            m = self.trace.measures[row]
            k = min(L, m.shape[0])
            n = min(nb, m.shape[1])
            out[:k, :n] = np.cumsum(m[:k, :n], axis=1)
            out[:k, n:] = out[:k, n - 1: n] if n else 0.0
            out[:k, nb] += m[:k, n:].sum(axis=1) if m.shape[1] > n else 0.0
        else:
            ages = self.trace.ages[row]
            lens = self.trace.age_lengths[row]
            idx = np.minimum(bin_index(ages, self.grid.width), nb)
            N = self.trace.N
            for j in range(L):
                sel = lens >= j + 1
                if not np.any(sel):
                    continue
                out[j] = np.cumsum(np.bincount(idx[sel], minlength=nb + 1)) / N
        return out


@dataclass
class DistanceReport:
    times: np.ndarray
    scalar_gap: np.ndarray
    age_gap: np.ndarray | None
    note: str = METRIC_NOTE

    @property
    def weighted(self) -> np.ndarray:
        L = self.scalar_gap.shape[1]
        return self.scalar_gap @ (0.5 ** np.arange(1, L + 1))

    @property
    def age_agg(self) -> np.ndarray:
        if self.age_gap is None:
            return np.zeros(self.times.size)
        L = self.age_gap.shape[1]
        return np.max(self.age_gap / np.arange(1, L + 1), axis=1)

    @property
    def aggregate(self) -> np.ndarray:
        return self.weighted + self.age_agg

    @property
    def sup_aggregate(self) -> float:
        return float(self.aggregate.max())

    def sup_scalar(self, max_level: int | None = None) -> float:
        g = self.scalar_gap if max_level is None else self.scalar_gap[:, :max_level]
        return float(g.max())

    def rows(self):
        for k, t in enumerate(self.times):
            for j in range(self.scalar_gap.shape[1]):
                age = self.age_gap[k, j] if self.age_gap is not None else float("nan")
                yield (t, j + 1, self.scalar_gap[k, j], age, self.weighted[k], self.age_agg[k],
                       self.aggregate[k])


def state_distance(a, b, *, ell_max: int | None = None, grid: AgeGrid | None = None,
                   ages: bool = True) -> DistanceReport:
    """Distance between two traces (simulation or fluid) at the sample times of ``a``.

    Age gaps are computed when both traces carry age information; the bin width
    is taken from a fluid trace or from ``grid``.
    """
    grids = [t.grid for t in (a, b) if isinstance(t, FluidTrace)]
    if len(grids) == 2 and not grids[0].compatible(grids[1]):
        raise AlignmentError("fluid traces use different age grids")
    if grid is None and grids:
        grid = grids[0]
    elif grid is not None and grids and not grid.compatible(grids[0]):
        raise AlignmentError("requested grid does not match the fluid grid")
    va, vb = _View(a, grid), _View(b, grid)
    L = ell_max or max(va._S.shape[1], vb._S.shape[1])
    times = va.times
    ra, rb = va.rows(times), vb.rows(times)
    scalar = np.abs(va.S(ra, L) - vb.S(rb, L))
    age_gap = None
    if ages and va.has_ages and vb.has_ages and grid is not None:
        age_gap = np.zeros_like(scalar)
        for k in range(times.size):
            ca = va.cum(ra[k], L)
            cb = vb.cum(rb[k], L)
            age_gap[k] = np.max(np.abs(ca - cb), axis=1)
    return DistanceReport(np.asarray(times, dtype=float), scalar, age_gap)


# ---- propagation of chaos --------------------------------------------------------------


@dataclass
class ChaosReport:
    t: float
    levels: tuple
    n: int
    joint: float
    stderr: float
    marginals: np.ndarray
    reference: np.ndarray
    product: float
    gap: float
    dependence: float
    marginal_terms: np.ndarray
    reference_kind: str = "fluid"

    def passes(self, floor: float = 0.0, k: float = CONFIDENCE) -> bool:
        return abs(self.gap) <= max(k * self.stderr, floor)

    def as_dict(self) -> dict:
        return {
            "t": self.t, "levels": list(self.levels), "n": self.n, "joint": self.joint,
            "stderr": self.stderr, "marginals": self.marginals.tolist(),
            "reference": self.reference.tolist(), "product": self.product, "gap": self.gap,
            "dependence": self.dependence, "marginal_terms": self.marginal_terms.tolist(),
            "reference_kind": self.reference_kind,
        }


def chaos_estimate(traces: Sequence[SimTrace], fluid: FluidTrace | None, t: float,
                   levels: Sequence[int], reference: str = "fluid",
                   min_reps: int = 100) -> ChaosReport:
    """Joint tail probability of the first ``k`` queues versus a product of marginals.

    With ``reference="fluid"`` the product uses fluid ``S_l(t)``; with
    ``"empirical"`` it uses the empirical marginals, which tests exact
    independence (the stderr is then that of the sample covariance).
    The signed gap splits as a dependence term plus one term per marginal.
    """
    levels = tuple(int(v) for v in levels)
    k = len(levels)
    if not 1 <= k <= 4:
        raise ValueError("between 1 and 4 levels are supported")
    n = len(traces)
    if n < min_reps:
        raise StatisticalPowerError(f"{n} replications given, at least {min_reps} needed")
    ind = np.zeros((n, k))
    for r, tr in enumerate(traces):
        if tr.lengths is None:
            raise ValueError("traces need record_queues=True")
        hit = np.nonzero(np.abs(tr.times - t) <= 1e-9 * max(1.0, t))[0]
        if hit.size == 0:
            raise AlignmentError(f"time {t} not sampled")
        x = tr.lengths[hit[0], :k]
        ind[r] = x >= np.asarray(levels)
    prod_ind = ind.prod(axis=1)
    joint = float(prod_ind.mean())
    marg = ind.mean(axis=0)
    if reference == "fluid":
        ref = np.array([fluid.S_at(t)[l - 1] if l <= fluid.ell_max else 0.0 for l in levels])
        stderr = math.sqrt(max(joint * (1 - joint), 0.0) / n)
    elif reference == "empirical":
        ref = marg.copy()
        # influence function of joint - prod(marginals)
        infl = prod_ind - joint
        for m in range(k):
            others = np.prod(np.delete(marg, m)) if k > 1 else 1.0
            infl = infl - others * (ind[:, m] - marg[m])
        stderr = float(infl.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    else:
        raise ValueError("reference must be 'fluid' or 'empirical'")
    product = float(np.prod(ref))
    gap = joint - product
    dependence = joint - float(np.prod(marg))
    terms = np.array([np.prod(ref[:m]) * (marg[m] - ref[m]) * np.prod(marg[m + 1:])
                      for m in range(k)])
    return ChaosReport(float(t), levels, n, joint, stderr, marg, ref, product, gap, dependence,
                       terms, reference)


# ---- martingales ----------------------------------------------------------------------------


def martingale_report(outputs: Sequence[Sequence[dict]], *, b_scale: float = 1.0,
                      n_boot: int = 1000, seed: int = 0, k: float = CONFIDENCE,
                      min_reps: int = 200) -> list[dict]:
    """Mean-zero and quadratic-variation checks across replications.

    ``outputs[r]`` is the list of tracker values of replication ``r`` at the
    horizon.  ``b_scale`` multiplies the routing compensator (a negative control
    uses 1.1).
    """
    n = len(outputs)
    if n < min_reps:
        raise StatisticalPowerError(f"{n} replications given, at least {min_reps} needed")
    rng = np.random.default_rng(seed)
    boot_idx = rng.integers(0, n, size=(n_boot, n))
    report = []
    for j in range(len(outputs[0])):
        rows = [o[j] for o in outputs]
        M = np.array([r["D"] - r["A"] for r in rows])
        Nm = np.array([r["R"] - b_scale * r["B"] for r in rows])
        qM = np.array([r["quadM"] for r in rows])
        qN = np.array([r["quadN"] for r in rows])
        entry = {"phi": rows[0]["phi"], "level": rows[0]["level"], "n": n, "b_scale": b_scale}
        for tag, x, q in (("M", M, qM), ("N", Nm, qN)):
            mean = float(x.mean())
            se = float(x.std(ddof=1) / math.sqrt(n))
            var = float(x.var(ddof=1))
            mq = float(q.mean())
            xb = x[boot_idx]
            diffs = xb.var(axis=1, ddof=1) - q[boot_idx].mean(axis=1)
            bse = float(diffs.std(ddof=1))
            entry.update({
                f"mean{tag}": mean, f"stderr{tag}": se, f"var{tag}": var,
                f"meanQuad{tag}": mq, f"bootstrapStderr{tag}": bse,
                f"pass_mean{tag}": bool(abs(mean) <= k * se),
                f"pass_var{tag}": bool(abs(var - mq) <= k * bse),
            })
        entry["pass"] = all(entry[f"pass_{a}{b}"] for a in ("mean", "var") for b in ("M", "N"))
        report.append(entry)
    return report


# ---- convergence in N --------------------------------------------------------------------------


def _replicate(job) -> dict:
    params, initial, seed, T, times, fluid, scalar_levels = job
    sim = SimState(params, initial, seed)
    tr = sim.run(T, times)
    rep = state_distance(tr, fluid)
    return {
        "seed": seed,
        "aggregate": rep.sup_aggregate,
        "scalar": rep.sup_scalar(scalar_levels),
        "weighted": float(rep.weighted.max()),
        "age": float(rep.age_agg.max()),
        "max_length": tr.max_length,
        "events": tr.n_events,
    }


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(int(workers), 1)
    env = os.environ.get("SQD_HYDRO_THREADS")
    if env:
        return max(int(env), 1)
    return 1


@dataclass
class ConvergenceTable:
    N: list
    mean: np.ndarray
    stderr: np.ndarray
    scalar_mean: np.ndarray
    scalar_stderr: np.ndarray
    raw: list = field(default_factory=list)

    def decreasing(self, z: float = 1.645) -> bool:
        """One-sided test that each mean is below the previous one."""
        for i in range(len(self.N) - 1):
            diff = self.mean[i] - self.mean[i + 1]
            if not diff > z * math.hypot(self.stderr[i], self.stderr[i + 1]):
                return False
        return True

    def fit_exponent(self) -> float:
        """Slope of log(mean gap) against log N."""
        x = np.log(np.asarray(self.N, dtype=float))
        return float(np.polyfit(x, np.log(self.mean), 1)[0])

    def rows(self):
        for i, n in enumerate(self.N):
            yield (n, self.mean[i], self.stderr[i], self.scalar_mean[i], self.scalar_stderr[i])


def convergence_study(fluid: FluidTrace, make_params: Callable[[int], SimParams], initial,
                      N_list: Sequence[int], replications: int, *, T: float,
                      sample_times: Sequence[float], base_seed: int = 0,
                      scalar_levels: int = 3, workers: int | None = None) -> ConvergenceTable:
    """Replicated simulations per N, each reduced to its sup-in-time aggregate distance.

    Replication ``r`` uses seed ``base_seed + r``; results are folded in index order.
    The fluid trace must record age measures at ``sample_times``.
    """
    means, ses, smeans, sses, raw = [], [], [], [], []
    nw = _workers(workers)
    for N in N_list:
        params = make_params(int(N))
        jobs = [(params, initial, base_seed + r, T, list(sample_times), fluid, scalar_levels)
                for r in range(replications)]
        if nw > 1:
            with ProcessPoolExecutor(max_workers=nw) as ex:
                res = list(ex.map(_replicate, jobs))
        else:
            res = [_replicate(j) for j in jobs]
        agg = np.array([r["aggregate"] for r in res])
        sc = np.array([r["scalar"] for r in res])
        means.append(agg.mean())
        ses.append(agg.std(ddof=1) / math.sqrt(len(agg)) if len(agg) > 1 else 0.0)
        smeans.append(sc.mean())
        sses.append(sc.std(ddof=1) / math.sqrt(len(sc)) if len(sc) > 1 else 0.0)
        raw.append([dict(r, N=int(N)) for r in res])
    return ConvergenceTable([int(n) for n in N_list], np.array(means), np.array(ses),
                            np.array(smeans), np.array(sses), raw)
