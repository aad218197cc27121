"""Hydrodynamic limit of the SQ(d) network with general service times.

The fluid state is a nested family of finite measures ``nu_1 >= nu_2 >= ...`` on
service ages; ``S_l = <1, nu_l>`` is the limiting fraction of queues holding at
least ``l`` jobs.  Two independent discretizations are provided:

* :func:`solve` integrates the age-structured transport equation with an
  explicit scheme whose age step equals the time step, so transport is an exact
  shift and killing uses survival ratios instead of the (possibly unbounded)
  hazard rate.
* :func:`solve_picard` iterates the renewal representation of the measures on
  short time windows (waveform relaxation) with trapezoid quadrature and
  hazard-based departures.

:func:`ode_reference` is the classical ODE for exponential service, used as an
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .dists import Distribution

__all__ = [
    "AgeGrid",
    "AgeMeasure",
    "EtaRates",
    "FluidState",
    "FluidTrace",
    "OdeTrace",
    "PicardDivergenceError",
    "StepSizeError",
    "balance_residual",
    "default_a_max",
    "default_ell_max",
    "eta",
    "fluid_step",
    "ode_reference",
    "poly_P",
    "solve",
    "solve_picard",
]

TRUNCATION_TOL = 1e-10
ORDER_SLACK = 1e-12


class StepSizeError(ValueError):
    """Raised when ``dt * lam * d >= 1`` and the explicit scheme may go negative."""


class PicardDivergenceError(RuntimeError):
    """Raised when the relaxation does not reach ``tol`` within ``max_iters``."""

    def __init__(self, message: str, last_change: float):
        super().__init__(message)
        self.last_change = last_change


def poly_P(d: int, x, y):
    """``sum_{m=0}^{d-1} x^m y^(d-1-m)``, i.e. ``(x^d - y^d) / (x - y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = sum(x**m * y ** (d - 1 - m) for m in range(d))
    return float(out) if out.ndim == 0 else out


def default_ell_max(lam: float, d: int, tol: float = 1e-8, cap: int = 30) -> int:
    """Smallest level whose equilibrium tail ``lam^((d^l - 1)/(d - 1))`` is below ``tol``."""
    if lam <= 0.0:
        return 2
    if lam >= 1.0:
        return cap
    for ell in range(1, cap + 1):
        expo = ell if d == 1 else (d**ell - 1) / (d - 1)
        if expo * math.log(lam) < math.log(tol):
            return max(ell, 2)
    return cap


def default_a_max(G: Distribution, T: float, dt: float, max_initial_age: float = 0.0,
                  tol: float = TRUNCATION_TOL) -> float:
    """Age truncation: the first of L, the ``tol`` survival quantile and ``T + max age + dt``."""
    horizon = T + max_initial_age + dt
    cands = [horizon, G.inverse_survival(tol)]
    if math.isfinite(G.support_end):
        cands.append(G.support_end)
    return min(cands)


@dataclass(frozen=True)
class AgeGrid:
    """Uniform age bins ``[i*width, (i+1)*width)``; the width equals the time step."""

    width: float
    a_max: float

    @property
    def n_bins(self) -> int:
        return max(int(math.ceil(self.a_max / self.width - 1e-9)), 1)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.width

    def compatible(self, other: "AgeGrid") -> bool:
        return abs(self.width - other.width) <= 1e-15 * max(self.width, 1.0)


@dataclass
class AgeMeasure:
    """A finite measure on ages: bin masses plus optional point atoms.

    ``masses[i]`` is the mass in ``[i*width, (i+1)*width)``; ``overflow`` is mass
    at ages beyond the last bin.
    """

    width: float
    masses: np.ndarray
    atoms: tuple = ()
    overflow: float = 0.0

    @property
    def total(self) -> float:
        return float(self.masses.sum() + sum(m for _, m in self.atoms) + self.overflow)

    def binned(self) -> np.ndarray:
        """Bin masses with atoms folded into their bins."""
        out = np.array(self.masses, dtype=float)
        for age, m in self.atoms:
            i = min(int(age // self.width), out.size - 1)
            out[i] += m
        return out

    def cdf(self) -> np.ndarray:
        """Cumulative mass at the right edge of every bin."""
        return np.cumsum(self.binned())


@dataclass
class FluidState:
    """Fluid state at time ``t``: age profiles ``nu[l-1, i]`` on bins of width ``dt``."""

    t: float
    nu: np.ndarray
    dt: float
    D: np.ndarray | None = None
    mass_leak: float = 0.0

    def __post_init__(self):
        self.nu = np.atleast_2d(np.asarray(self.nu, dtype=float))
        if self.D is None:
            self.D = np.zeros(self.nu.shape[0])

    @property
    def ell_max(self) -> int:
        return self.nu.shape[0]

    @property
    def S(self) -> np.ndarray:
        return self.nu.sum(axis=1)

    def measure(self, ell: int) -> AgeMeasure:
        return AgeMeasure(self.dt, self.nu[ell - 1].copy())

    def check(self, slack: float = ORDER_SLACK) -> None:
        if np.any(self.nu < -slack):
            raise ValueError("fluid state has negative mass")
        if np.any(np.diff(self.nu, axis=0) > slack):
            raise ValueError("fluid state violates nu_{l+1} <= nu_l binwise")
        if self.nu.shape[0] and self.S[0] > 1.0 + 1e-9:
            raise ValueError("fluid state has S_1 > 1")

    def padded(self, ell_max: int, n_bins: int | None = None) -> "FluidState":
        nb = self.nu.shape[1] if n_bins is None else n_bins
        out = np.zeros((ell_max, max(nb, 1)))
        ll = min(ell_max, self.nu.shape[0])
        nn = min(out.shape[1], self.nu.shape[1])
        out[:ll, :nn] = self.nu[:ll, :nn]
        D = np.zeros(ell_max)
        D[:ll] = self.D[:ll]
        return FluidState(self.t, out, self.dt, D, self.mass_leak)

    # ---- initial conditions ---------------------------------------------------
    @classmethod
    def empty(cls, ell_max: int, dt: float) -> "FluidState":
        return cls(0.0, np.zeros((ell_max, 1)), dt)

    @classmethod
    def from_atoms(cls, S0: Sequence[float], dt: float, age: float = 0.0,
                   ell_max: int | None = None) -> "FluidState":
        """Every busy queue's job has the same age; ``S0[l-1]`` is the level mass."""
        S0 = np.asarray(S0, dtype=float)
        L = max(ell_max or S0.size, S0.size)
        i = int(round(age / dt))
        nu = np.zeros((L, i + 1))
        nu[: S0.size, i] = S0
        st = cls(0.0, nu, dt)
        st.check()
        return st

    @classmethod
    def from_density(cls, S0: Sequence[float], age_law: Distribution, dt: float,
                     a_max: float, ell_max: int | None = None) -> "FluidState":
        """Level masses ``S0`` spread over ages with law ``age_law`` (binned exactly)."""
        S0 = np.asarray(S0, dtype=float)
        L = max(ell_max or S0.size, S0.size)
        nb = max(int(math.ceil(a_max / dt)), 1)
        edges = np.arange(nb + 1) * dt
        p = np.diff(age_law.cdf(edges))
        p[-1] += float(age_law.survival(edges[-1]))
        nu = np.zeros((L, nb))
        nu[: S0.size] = np.outer(S0, p)
        st = cls(0.0, nu, dt)
        st.check()
        return st

    @classmethod
    def from_measures(cls, measures: Sequence[AgeMeasure], ell_max: int | None = None) -> "FluidState":
        """Ingest empirical age measures (e.g. a simulation snapshot)."""
        dt = measures[0].width
        if any(abs(m.width - dt) > 1e-15 for m in measures):
            raise ValueError("age measures must share one bin width")
        L = max(ell_max or len(measures), len(measures))
        nb = max(m.masses.size for m in measures)
        nu = np.zeros((L, nb))
        for j, m in enumerate(measures):
            b = m.binned()
            nu[j, : b.size] = b
            nu[j, -1] += m.overflow
        st = cls(0.0, nu, dt)
        st.check(1e-9)
        return st


@dataclass
class EtaRates:
    """Routing rates: ``boundary`` is the level-1 influx at age 0, ``rates[l-2]`` the
    binwise rate vector of level ``l >= 2``."""

    boundary: float
    rates: list

    def masses(self) -> np.ndarray:
        return np.array([self.boundary] + [float(r.sum()) for r in self.rates])


def eta(state: FluidState, lam: float, d: int) -> EtaRates:
    S = state.S
    rates = []
    for j in range(1, state.ell_max):
        c = lam * poly_P(d, S[j - 1], S[j])
        rates.append(c * np.maximum(state.nu[j - 1] - state.nu[j], 0.0))
    return EtaRates(lam * (1.0 - S[0] ** d) if state.ell_max else lam, rates)


def _check_cfl(dt: float, lam: float, d: int) -> None:
    if dt * lam * d >= 1.0:
        raise StepSizeError(
            f"dt * lam * d = {dt * lam * d:.3g} >= 1; use dt < {1.0 / (lam * d):.3g}, "
            f"e.g. dt = {0.5 / (lam * d):.3g}"
        )


def fluid_step(state: FluidState, dt: float, lam: float, d: int, G: Distribution,
               diagnostics: dict | None = None) -> FluidState:
    """One explicit step on an age-indexed state (reference implementation).

    Routing increments use the pre-step state, the routed profile is then aged
    by one bin with survival ratios, and new service entries land in bin 0.
    Mass leaving the last bin is counted as a departure and as leak.
    """
    _check_cfl(dt, lam, d)
    if abs(state.dt - dt) > 1e-15:
        raise ValueError("the age bin width must equal the time step")
    w = state.nu
    L, nb = w.shape
    ages = np.arange(nb) * dt
    r = G.survival_ratio_table(ages, dt)
    q = 1.0 - r
    S = state.S
    x = w.copy()
    leak = state.mass_leak
    for j in range(1, L):
        if S[j - 1] < _kernels.LEVEL_FLOOR:
            leak += x[j].sum()
            x[j] = 0.0
            continue
        c = lam * poly_P(d, S[j - 1], S[j])
        x[j] = w[j] + dt * c * (w[j - 1] - w[j])
    dep = (q * x).sum(axis=1)
    new = np.zeros((L, nb + 1))
    new[:, 1:] = r * x
    over = new[:, nb].copy()
    dep += over
    leak += over.sum() + dt * lam * S[L - 1] ** d
    new = new[:, :nb]
    new[:, 0] = np.append(dep[1:], 0.0)
    new[0, 0] += dt * lam * (1.0 - S[0] ** d)
    neg = new < 0.0
    if np.any(neg):
        if diagnostics is not None:
            diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(neg.sum())
        new[neg] = 0.0
    return FluidState(state.t + dt, new, dt, state.D + dep, leak)


@dataclass
class FluidTrace:
    """Fluid trajectory on the full time grid.

    ``S``, ``D`` and ``eta_mass`` have one row per grid time; ``measures`` (if
    recorded) holds age profiles at ``sample_steps``.
    """

    times: np.ndarray
    S: np.ndarray
    D: np.ndarray
    leak: np.ndarray
    eta_mass: np.ndarray
    grid: AgeGrid
    lam: float
    d: int
    sample_steps: np.ndarray
    measures: np.ndarray | None = None
    method: str = "explicit"
    iterations: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.grid.width

    @property
    def ell_max(self) -> int:
        return self.S.shape[1]

    @property
    def sample_times(self) -> np.ndarray:
        return self.times[self.sample_steps]

    def index_of(self, t: float) -> int:
        i = int(round(t / self.dt))
        if i < 0 or i >= self.times.size or abs(self.times[i] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not on the solver grid")
        return i

    def S_at(self, t: float) -> np.ndarray:
        return self.S[self.index_of(t)]

    def measure_at(self, t: float, ell: int) -> AgeMeasure:
        if self.measures is None:
            raise ValueError("trace was solved without record_measures")
        i = self.index_of(t)
        hit = np.nonzero(self.sample_steps == i)[0]
        if hit.size == 0:
            raise ValueError(f"no age snapshot recorded at t={t}")
        return AgeMeasure(self.dt, self.measures[hit[0], ell - 1].copy())

    def residual(self) -> np.ndarray:
        return balance_residual(self)

    def rows(self, steps: Sequence[int] | None = None):
        """CSV rows (time, level, S, D, eta_mass, residual, mass_leak)."""
        res = balance_residual(self)
        steps = self.sample_steps if steps is None else steps
        for i in steps:
            for j in range(self.ell_max):
                yield (self.times[i], j + 1, self.S[i, j], self.D[i, j], self.eta_mass[i, j],
                       res[i, j], self.leak[i])


def _eta_mass(S: np.ndarray, lam: float, d: int) -> np.ndarray:
    below = np.hstack([np.ones((S.shape[0], 1)), S[:, :-1]])
    return lam * (below**d - S**d)


def balance_residual(trace: FluidTrace) -> np.ndarray:
    """``|S_l(t) - S_l(0) - D_{l+1}(t) - int_0^t <1, eta_l> ds + D_l(t)|`` per grid time.

    The routing integral is the trapezoid rule over the recorded path, so for a
    first-order scheme the residual is O(dt).  Truncation leak is subtracted as
    an allowance and the result floored at 0.
    """
    S, D, em = trace.S, trace.D, trace.eta_mass
    dt = trace.dt
    eta_int = np.zeros_like(em)
    eta_int[1:] = np.cumsum(0.5 * dt * (em[1:] + em[:-1]), axis=0)
    Dup = np.hstack([D[:, 1:], np.zeros((D.shape[0], 1))])
    res = np.abs(S - S[0] - Dup - eta_int + D)
    allowance = (trace.leak - trace.leak[0])[:, None] if trace.method == "explicit" else 0.0
    return np.maximum(res - allowance, 0.0)


def _prepare(init: FluidState, T: float, dt: float, lam: float, d: int, G: Distribution,
             ell_max: int | None, a_max: float | None):
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    _check_cfl(dt, lam, d)
    if abs(init.dt - dt) > 1e-15:
        raise ValueError("initial state bin width must equal dt")
    nsteps = int(round(T / dt))
    if nsteps < 1 or abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not a positive multiple of dt={dt}")
    init.check()
    L = ell_max or max(init.ell_max, default_ell_max(lam, d))
    nz = np.nonzero(init.nu.sum(axis=0) > 0)[0]
    max_age = (nz[-1] * dt) if nz.size else 0.0
    if a_max is None:
        a_max = default_a_max(G, T, dt, max_age)
    grid = AgeGrid(dt, a_max)
    nb = grid.n_bins
    if nz.size and nz[-1] >= nb:
        raise ValueError(f"initial ages reach {max_age}, beyond a_max={a_max}")
    st = init.padded(L, nb)
    ages = np.arange(nb + 1) * dt
    ratio = G.survival_ratio_table(ages, dt)
    # 1 - ratio without cancellation where possible
    la = np.asarray(G.log_survival(ages), dtype=float)
    lb = np.asarray(G.log_survival(ages + dt), dtype=float)
    with np.errstate(invalid="ignore"):
        q = np.where(np.isfinite(la), -np.expm1(np.minimum(lb - la, 0.0)), 1.0)
    q = np.nan_to_num(q, nan=1.0)
    return nsteps, L, grid, nb, st, ratio, q


def _sample_steps(sample_times, nsteps: int, dt: float) -> np.ndarray:
    if sample_times is None:
        return np.arange(nsteps + 1)
    steps = np.unique(np.rint(np.asarray(sample_times, dtype=float) / dt).astype(np.int64))
    if steps.size and (steps[0] < 0 or steps[-1] > nsteps):
        raise ValueError("sample times must lie in [0, T]")
    return steps


def solve(init: FluidState, T: float, dt: float, lam: float, d: int, G: Distribution, *,
          ell_max: int | None = None, a_max: float | None = None,
          sample_times: Sequence[float] | None = None,
          record_measures: bool = False) -> FluidTrace:
    """Explicit transport scheme from ``init`` to ``T``.

    Scalars are kept at every step; age profiles only at ``sample_times`` and
    only with ``record_measures``.
    """
    nsteps, L, grid, nb, st, ratio, q = _prepare(init, T, dt, lam, d, G, ell_max, a_max)
    n0 = nb
    wa = np.zeros((L, n0 + nsteps))
    # cohort b has age n0 - 1 - b at t = 0
    wa[:, :n0] = st.nu[:, ::-1]
    wb = np.zeros_like(wa)
    S = st.nu.sum(axis=1)
    steps = _sample_steps(sample_times, nsteps, dt)
    snaps = np.zeros((steps.size if record_measures else 0, L, nb))
    snap_steps = steps if record_measures else np.zeros(0, dtype=np.int64)
    S_hist = np.zeros((nsteps + 1, L))
    D_hist = np.zeros((nsteps + 1, L))
    D_hist[0] = st.D
    leak_hist = np.zeros(nsteps + 1)
    leak_hist[0] = st.mass_leak
    flags = np.zeros(1, dtype=np.int64)
    _kernels.explicit_run(wa, wb, S, n0, nb, nsteps, dt, float(lam), int(d),
                          ratio[:nb][::-1].copy(), q[:nb][::-1].copy(),
                          snap_steps.astype(np.int64), snaps, S_hist, D_hist, leak_hist, flags)
    times = np.arange(nsteps + 1) * dt
    return FluidTrace(times, S_hist, D_hist, leak_hist, _eta_mass(S_hist, lam, d), grid, lam, d,
                      steps, snaps if record_measures else None, "explicit",
                      diagnostics={"clamped": int(flags[0]), "n_bins": nb})


def solve_picard(init: FluidState, T: float, dt: float, lam: float, d: int, G: Distribution, *,
                 max_iters: int = 100, tol: float = 1e-10, window: float = 0.5,
                 ell_max: int | None = None, a_max: float | None = None,
                 sample_times: Sequence[float] | None = None) -> FluidTrace:
    """Fixed-point iteration on the renewal representation of the fluid measures.

    Time is cut into windows of length ``window``.  On each window the scalar
    paths ``S_l`` and ``D_l`` of the previous iterate fix the routing
    coefficients and the service-entry flux; the measures are rebuilt from the
    window-start state, new paths are read off, and the sweep is repeated until
    the sup change of ``S`` drops below ``tol``.  Iterate 0 is free decay.
    """
    nsteps, L, grid, nb, st, ratio, _ = _prepare(init, T, dt, lam, d, G, ell_max, a_max)
    n0 = nb
    rrev = ratio[:nb][::-1].copy()
    hrev = G.hazard_table(np.arange(nb + 1) * dt)[::-1].copy()
    w = np.zeros((L, n0 + nsteps + 1))
    w[:, :n0] = st.nu[:, ::-1]
    spare = np.zeros_like(w)
    S_hist = np.zeros((nsteps + 1, L))
    D_hist = np.zeros((nsteps + 1, L + 1))
    leak_hist = np.zeros(nsteps + 1)
    S_hist[0] = st.nu.sum(axis=1)
    D_hist[0, :L] = st.D
    leak_hist[0] = st.mass_leak
    wsteps = max(int(round(window / dt)), 1)
    iterations, changes = [], []
    for k0 in range(0, nsteps, wsteps):
        m = min(wsteps, nsteps - k0)
        hi = min(k0 + n0 + m + 1, w.shape[1])
        lo = max(k0 + n0 - nb - 1, 0)
        w0 = w[:, lo:hi].copy()

        def sweep(S_prev, D_prev, rate):
            S_out = np.zeros((m + 1, L))
            D_out = np.zeros((m + 1, L + 1))
            lk = np.zeros(m + 1)
            S_out[0] = S_hist[k0]
            D_out[0] = D_hist[k0]
            w[:, lo:hi] = w0
            _kernels.picard_sweep(w, spare, k0, n0, nb, m, dt, rate, int(d), rrev, hrev,
                                  S_prev, D_prev, S_out, D_out, lk)
            return S_out, D_out, lk

        S_prev = np.repeat(S_hist[k0:k0 + 1], m + 1, axis=0)
        D_prev = np.repeat(D_hist[k0:k0 + 1], m + 1, axis=0)
        S_prev, D_prev, lk = sweep(S_prev, D_prev, 0.0)
        hist = []
        for it in range(1, max_iters + 1):
            S_new, D_new, lk = sweep(S_prev, D_prev, float(lam))
            change = float(np.max(np.abs(S_new - S_prev)))
            hist.append(change)
            S_prev, D_prev = S_new, D_new
            if change < tol:
                break
        else:
            raise PicardDivergenceError(
                f"no convergence on window starting at t={k0 * dt:.6g} after {max_iters} "
                f"iterations; last change {hist[-1]:.3g}", hist[-1])
        if m % 2 == 1:
            w[:, lo:hi] = spare[:, lo:hi]
        iterations.append(it)
        changes.append(hist)
        S_hist[k0:k0 + m + 1] = S_prev
        D_hist[k0:k0 + m + 1] = D_prev
        leak_hist[k0 + 1:k0 + m + 1] = leak_hist[k0] + lk[1:]
    times = np.arange(nsteps + 1) * dt
    steps = _sample_steps(sample_times, nsteps, dt)
    return FluidTrace(times, S_hist, D_hist[:, :L], leak_hist, _eta_mass(S_hist, lam, d), grid,
                      lam, d, steps, None, "picard", iterations, changes,
                      {"n_bins": nb, "window_steps": wsteps})


@dataclass
class OdeTrace:
    times: np.ndarray
    S: np.ndarray


def ode_reference(lam: float, d: int, s0: Sequence[float], T: float, dt: float) -> OdeTrace:
    """RK4 for ``s_l' = lam (s_{l-1}^d - s_l^d) - (s_l - s_{l+1})`` with ``s_0 = 1``.

    Valid for unit-mean exponential service; the truncation is ``s_{L+1} = 0``.
    """
    s0 = np.asarray(s0, dtype=float)
    nsteps = int(round(T / dt))
    out = _kernels.ode_rk4(s0, float(lam), int(d), float(dt), nsteps)
    return OdeTrace(np.arange(nsteps + 1) * dt, out)
