"""Exact event-driven simulation of the N-server SQ(d) network.

Arrivals form a renewal process run on an accelerated clock (inter-arrival
times are the base law divided by N).  Each arrival samples d queue indices
uniformly with replacement and joins a shortest one, ties broken uniformly
over the distinct minimizing queues.  Servers are FCFS and non-idling; service
times are drawn when a job enters service.

Besides queue lengths the simulator keeps the counting processes that appear
in the prelimit dynamics (departures from queues of length >= l, routings to
queues of length l - 1, service entries) and, optionally, martingale trackers
pairing weighted departure and routing counts with their compensators.  With
``debug=True`` (or ``SQD_HYDRO_DEBUG=1``) the pathwise accounting identities are
asserted after every event.
"""

from __future__ import annotations

import heapq
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dists import Distribution
from .hydro import AgeGrid, AgeMeasure

__all__ = [
    "Empty",
    "EventRecord",
    "ExpDecay",
    "IidQueueLengths",
    "IndicatorAgeAbove",
    "InitialConditionError",
    "InvariantViolation",
    "Job",
    "One",
    "SimParams",
    "SimState",
    "SimTrace",
    "TrackerSpec",
    "bin_index",
    "init_sim",
    "martingale_values",
    "route",
    "run",
    "snapshot_measures",
    "step",
]

# 8-point Gauss-Legendre nodes and weights on [-1, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X = [float(v) for v in _GL_X]
_GL_W = [float(v) for v in _GL_W]


class InvariantViolation(AssertionError):
    """A pathwise accounting identity failed."""


class InitialConditionError(ValueError):
    pass


def _debug_default() -> bool:
    return os.environ.get("SQD_HYDRO_DEBUG", "") not in ("", "0", "false", "False")


# ---- weights ---------------------------------------------------------------------


def _gl(f, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return half * sum(w * f(mid + half * x) for x, w in zip(_GL_X, _GL_W))


@dataclass(frozen=True)
class One:
    """phi = 1."""

    name = "One"

    def __call__(self, age: float) -> float:
        return 1.0

    def hazard_integral(self, G: Distribution, a0: float, a1: float) -> float:
        """int_{a0}^{a1} phi(a) h(a) da."""
        return G.cumulative_hazard(a1) - G.cumulative_hazard(a0)

    def clock_integral(self, arrival: Distribution, r0: float, dt: float, a0: float,
                       full: float | None = None) -> float:
        """int_0^dt h_E(r0 + s) phi(a0 + s) ds for the arrival hazard h_E.

        ``full`` may carry the precomputed value for phi = 1 over the interval.
        """
        if full is not None:
            return full
        HE = arrival.cumulative_hazard
        return HE(r0 + dt) - HE(r0)

    def describe(self) -> str:
        return "One"


@dataclass(frozen=True)
class IndicatorAgeAbove:
    """phi(x) = 1{x > m}."""

    m: float

    def __call__(self, age: float) -> float:
        return 1.0 if age > self.m else 0.0

    def hazard_integral(self, G, a0, a1):
        lo = max(a0, self.m)
        hi = max(a1, self.m)
        if hi <= lo:
            return 0.0
        return G.cumulative_hazard(hi) - G.cumulative_hazard(lo)

    def clock_integral(self, arrival, r0, dt, a0, full=None):
        s0 = self.m - a0
        if s0 >= dt:
            return 0.0
        HE = arrival.cumulative_hazard
        if s0 <= 0.0:
            return HE(r0 + dt) - HE(r0) if full is None else full
        return HE(r0 + dt) - HE(r0 + s0)

    def describe(self) -> str:
        return f"IndicatorAgeAbove({self.m:g})"


@dataclass(frozen=True)
class ExpDecay:
    """phi(x) = exp(-c x) on the age."""

    c: float

    def __call__(self, age: float) -> float:
        return math.exp(-self.c * age)

    def hazard_integral(self, G, a0, a1):
        if a1 <= a0:
            return 0.0
        if G.family == "Exponential" and self.c > 0:
            return G.rate * (math.exp(-self.c * a0) - math.exp(-self.c * a1)) / self.c
        return _gl(lambda x: math.exp(-self.c * x) * float(G.hazard(x)), a0, a1)

    def clock_integral(self, arrival, r0, dt, a0, full=None):
        return _gl(lambda s: float(arrival.hazard(r0 + s)) * math.exp(-self.c * (a0 + s)), 0.0, dt)

    def describe(self) -> str:
        return f"ExpDecay({self.c:g})"


@dataclass(frozen=True)
class TrackerSpec:
    weight: object
    level: int

    @property
    def name(self) -> str:
        return f"{self.weight.describe()}@{self.level}"


class Tracker:
    """Accumulators of one (phi, level) pair; M = D - A and N = R - B."""

    __slots__ = ("spec", "weight", "level", "D", "A", "R", "B", "quadD", "quadR")

    def __init__(self, spec: TrackerSpec):
        self.spec = spec
        self.weight = spec.weight
        self.level = spec.level
        self.D = self.A = self.R = self.B = self.quadD = self.quadR = 0.0

    def values(self) -> dict:
        return {
            "phi": self.weight.describe(), "level": self.level,
            "D": self.D, "A": self.A, "R": self.R, "B": self.B,
            "M": self.D - self.A, "N": self.R - self.B,
            "quadM": self.quadD, "quadN": self.quadR,
        }


# ---- initial conditions --------------------------------------------------------------


@dataclass(frozen=True)
class Empty:
    pass


@dataclass(frozen=True)
class IidQueueLengths:
    """Queue lengths i.i.d. from ``pmf`` over {0, 1, ...}; head-job ages i.i.d.
    from ``age_law`` (``None`` means every initial age is 0)."""

    pmf: tuple
    age_law: Distribution | None = None

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InitialConditionError(f"initial pmf must be a probability vector, got {self.pmf}")
        object.__setattr__(self, "pmf", tuple(float(v) for v in p))


# ---- simulation state ----------------------------------------------------------------------


class Job:
    __slots__ = ("id", "arrival_time", "service_start", "service_time", "queue")

    def __init__(self, id, arrival_time, service_start, service_time, queue):
        self.id = id
        self.arrival_time = arrival_time
        self.service_start = service_start
        self.service_time = service_time
        self.queue = queue

    @property
    def departure_time(self) -> float:
        return self.service_start + self.service_time


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str
    queue: int


class UniformStream:
    """Buffered U[0, 1) draws from a numpy Generator (cuts per-call overhead)."""

    __slots__ = ("_rng", "_buf", "_pos", "_size")

    def __init__(self, rng: np.random.Generator, size: int = 8192):
        self._rng = rng
        self._size = size
        self._buf = rng.random(size).tolist()
        self._pos = 0

    def random(self) -> float:
        if self._pos == self._size:
            self._buf = self._rng.random(self._size).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


def route(lengths_at_sampled: Sequence[int], sampled_indices: Sequence[int], rng) -> int:
    """Index of a shortest sampled queue; ties uniform over distinct queues."""
    m = min(lengths_at_sampled)
    cands: list[int] = []
    for x, i in zip(lengths_at_sampled, sampled_indices):
        if x == m and i not in cands:
            cands.append(i)
    if len(cands) == 1:
        return cands[0]
    return cands[int(rng.random() * len(cands))]


@dataclass
class SimParams:
    """Model and recording parameters of one simulation run.

    ``arrival`` is the base inter-arrival law with mean ``1/lam`` (Poisson when
    omitted); the N-server system uses it scaled by ``1/N``.  ``R`` is the age of
    the base arrival clock at time 0.
    """

    N: int
    d: int
    lam: float
    service: Distribution
    arrival: Distribution | None = None
    R: float = 0.0
    ell_max: int = 10
    trackers: tuple = ()
    record_queues: bool = False
    record_ages: bool = False
    debug: bool | None = None

    def __post_init__(self):
        if self.N < 1 or self.d < 1:
            raise ValueError("N and d must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lam > 0 and self.arrival is not None:
            if abs(self.arrival.mean * self.lam - 1.0) > 1e-9:
                raise ValueError("arrival law must have mean 1/lam")


@dataclass
class SimTrace:
    """Recorded sample path at ``times``.

    ``ages[k]``/``age_lengths[k]`` hold the in-service ages and the lengths of
    their queues at sample ``k`` (when ``record_ages``).
    """

    N: int
    times: np.ndarray
    S_bar: np.ndarray
    D_bar: np.ndarray
    lengths: np.ndarray | None
    ages: list | None
    age_lengths: list | None
    trackers: dict
    max_length: int
    n_events: int
    seed: int | None = None

    @property
    def ell_max(self) -> int:
        return self.S_bar.shape[1]

    def measures(self, k: int, grid: AgeGrid) -> list:
        if self.ages is None:
            raise ValueError("trace was recorded without record_ages")
        return _bin_ages(self.ages[k], self.age_lengths[k], self.N, self.ell_max, grid)

    def rows(self):
        """CSV rows (time, level, S_bar, D_bar)."""
        for k, t in enumerate(self.times):
            for j in range(self.ell_max):
                yield (t, j + 1, self.S_bar[k, j], self.D_bar[k, j])


def bin_index(ages: np.ndarray, width: float) -> np.ndarray:
    """Age bin of each age; ages that are exact grid multiples up to rounding
    land in the bin they start, matching the fluid cohorts."""
    return np.floor(np.asarray(ages) / width + 1e-9).astype(np.int64)


def _bin_ages(ages: np.ndarray, lengths: np.ndarray, N: int, ell_max: int, grid: AgeGrid) -> list:
    nb = grid.n_bins
    idx = bin_index(ages, grid.width)
    over = idx >= nb
    out = []
    for ell in range(1, ell_max + 1):
        sel = lengths >= ell
        masses = np.bincount(idx[sel & ~over], minlength=nb)[:nb] / N
        out.append(AgeMeasure(grid.width, masses.astype(float), (), float(np.sum(sel & over)) / N))
    return out


class SimState:
    """Full network state; advance with :meth:`step` or :meth:`run`."""

    def __init__(self, params: SimParams, initial=Empty(), seed: int = 0):
        self.params = params
        self.seed = seed
        self.N = N = params.N
        self.d = params.d
        self.G = params.service
        self.debug = _debug_default() if params.debug is None else params.debug
        self.rng = np.random.default_rng(seed)
        self.u = UniformStream(self.rng)
        self.clock = 0.0
        self.queues = [deque() for _ in range(N)]
        self.X = [0] * N
        self.E_i = [0] * N
        self.D_i = [0] * N
        self.E = 0
        self.K = 0
        self.arrivals_to_empty = 0
        self.dep_exact = [0, 0]  # by queue length just before departure
        self.route_exact = [0, 0]  # by queue length just after arrival
        self.dep_ge2 = 0
        self.S = [N, 0]  # S[l] = #queues with length >= l (S[0] = N)
        self.heap: list = []
        self.next_id = 1
        self.n_events = 0
        self._init_queues(initial)
        self.X0 = list(self.X)
        self.S0 = list(self.S)
        self.X0_total = sum(self.X)
        self.max_length = max(self.X) if N else 0
        # arrival clock on the accelerated time scale
        if params.lam > 0:
            base = params.arrival
            if base is None:
                from .dists import Exponential

                base = Exponential(params.lam)
            self.arrival = base.scaled(1.0 / N)
            R_N = params.R / N
            self.last_renewal = -R_N
            self.next_arrival = self.arrival.sample_delay(R_N, self.u)
            self._HE = self.arrival.cumulative_hazard
        else:
            self.arrival = None
            self.last_renewal = 0.0
            self.next_arrival = math.inf
            self._HE = None
        self.trackers = [Tracker(s) for s in params.trackers]
        self._flush_t = [0.0] * N
        self._b_time = 0.0

    # ---- setup ----------------------------------------------------------------
    def _init_queues(self, initial) -> None:
        if isinstance(initial, Empty):
            return
        if not isinstance(initial, IidQueueLengths):
            raise InitialConditionError(f"unknown initial condition {initial!r}")
        pmf = np.asarray(initial.pmf)
        cum = np.cumsum(pmf)
        jid = 0
        for i in range(self.N):
            x = int(np.searchsorted(cum, self.u.random(), side="right"))
            x = min(x, pmf.size - 1)
            if x == 0:
                continue
            a0 = 0.0 if initial.age_law is None else initial.age_law.sample(self.u)
            v = a0 + self.G.sample_residual(a0, self.u)
            q = self.queues[i]
            head = Job(jid, None, -a0, v, i)
            jid -= 1
            q.append(head)
            for _ in range(x - 1):
                q.append(Job(jid, None, None, None, i))
                jid -= 1
            self.X[i] = x
            self._grow(x)
            for ell in range(1, x + 1):
                self.S[ell] += 1
            heapq.heappush(self.heap, (head.service_start + v, i))

    def _grow(self, x: int) -> None:
        while len(self.S) <= x + 1:
            self.S.append(0)
            self.dep_exact.append(0)
            self.route_exact.append(0)

    # ---- compensator integration -------------------------------------------------
    def _advance_B(self, t: float) -> None:
        t0 = self._b_time
        if t <= t0:
            return
        self._b_time = t
        if self._HE is None or not self.trackers:
            return
        HE = self._HE
        r0 = t0 - self.last_renewal
        dH = None
        N = self.N
        d = self.d
        for tr in self.trackers:
            ell = tr.level
            w = tr.weight
            if ell == 1:
                phi0 = w(0.0)
                if phi0 == 0.0:
                    continue
                if dH is None:
                    dH = HE(r0 + (t - t0)) - HE(r0)
                tr.B += dH * phi0 * (1.0 - (self.S[1] / N) ** d)
            elif isinstance(w, One):
                if dH is None:
                    dH = HE(r0 + (t - t0)) - HE(r0)
                lo = self.S[ell - 1] / N if ell - 1 < len(self.S) else 0.0
                hi = self.S[ell] / N if ell < len(self.S) else 0.0
                tr.B += dH * (lo**d - hi**d)
            else:
                lo = self.S[ell - 1] / N if ell - 1 < len(self.S) else 0.0
                hi = self.S[ell] / N if ell < len(self.S) else 0.0
                if lo == hi:
                    continue
                P = sum(lo**m * hi ** (d - 1 - m) for m in range(d))
                if dH is None:
                    dH = HE(r0 + (t - t0)) - HE(r0)
                acc = 0.0
                for i in range(N):
                    if self.X[i] == ell - 1:
                        a0 = t0 - self.queues[i][0].service_start
                        acc += w.clock_integral(self.arrival, r0, t - t0, a0, dH)
                tr.B += P * acc / N

    def _flush_A(self, i: int, t: float) -> None:
        """Add the departure-compensator mass of queue ``i`` over [last flush, t]."""
        t0 = self._flush_t[i]
        self._flush_t[i] = t
        x = self.X[i]
        if x == 0 or t <= t0 or not self.trackers:
            return
        alpha = self.queues[i][0].service_start
        a0 = t0 - alpha
        a1 = t - alpha
        cache = {}
        for tr in self.trackers:
            if tr.level <= x:
                w = tr.weight
                val = cache.get(w)
                if val is None:
                    val = w.hazard_integral(self.G, a0, a1)
                    cache[w] = val
                tr.A += val

    def sync(self, t: float) -> None:
        """Bring all compensators up to time ``t`` (no events are processed)."""
        self._advance_B(t)
        if self.trackers:
            for i in range(self.N):
                self._flush_A(i, t)
        self.clock = max(self.clock, t)

    # ---- events ------------------------------------------------------------------
    def peek_time(self) -> float:
        dep = self.heap[0][0] if self.heap else math.inf
        return min(dep, self.next_arrival)

    def step(self) -> EventRecord:
        dep = self.heap[0][0] if self.heap else math.inf
        if dep == math.inf and self.next_arrival == math.inf:
            raise RuntimeError("no pending events")
        if dep <= self.next_arrival:
            t, i = heapq.heappop(self.heap)
            self._advance_B(t)
            self.clock = t
            self._departure(t, i)
            kind = "Departure"
        else:
            t = self.next_arrival
            self._advance_B(t)
            self.clock = t
            i = self._arrival(t)
            kind = "Arrival"
        self.n_events += 1
        if self.debug:
            self._check(i)
        return EventRecord(t, kind, i)

    def _arrival(self, t: float) -> int:
        N = self.N
        u = self.u
        X = self.X
        if self.d == 1:
            i = int(u.random() * N)
        else:
            idx = [int(u.random() * N) for _ in range(self.d)]
            i = route([X[j] for j in idx], idx, u)
        x = X[i]
        if self.trackers:
            self._flush_A(i, t)
            for tr in self.trackers:
                if tr.level == 1:
                    if x == 0:
                        p = tr.weight(0.0)
                        tr.R += p
                        tr.quadR += p * p
                elif x == tr.level - 1:
                    p = tr.weight(t - self.queues[i][0].service_start)
                    tr.R += p
                    tr.quadR += p * p
        q = self.queues[i]
        job = Job(self.next_id, t, None, None, i)
        self.next_id += 1
        q.append(job)
        nx = len(q)
        X[i] = nx
        if nx >= len(self.S) - 1:
            self._grow(nx)
        self.S[nx] += 1
        self.route_exact[nx] += 1
        if nx > self.max_length:
            self.max_length = nx
        self.E += 1
        self.E_i[i] += 1
        if nx == 1:
            self.arrivals_to_empty += 1
            self.K += 1
            job.service_start = t
            job.service_time = self.G.sample(u)
            heapq.heappush(self.heap, (t + job.service_time, i))
        # renew the arrival clock
        self.last_renewal = t
        self.next_arrival = t + self.arrival.sample(u)
        return i

    def _departure(self, t: float, i: int) -> None:
        q = self.queues[i]
        x = len(q)
        if self.trackers:
            self._flush_A(i, t)
            v = q[0].service_time
            for tr in self.trackers:
                if tr.level <= x:
                    p = tr.weight(v)
                    tr.D += p
                    tr.quadD += p * p
        q.popleft()
        self.S[x] -= 1
        self.dep_exact[x] += 1
        if x >= 2:
            self.dep_ge2 += 1
        self.X[i] = x - 1
        self.D_i[i] += 1
        if x >= 2:
            job = q[0]
            job.service_start = t
            job.service_time = self.G.sample(self.u)
            self.K += 1
            heapq.heappush(self.heap, (t + job.service_time, i))

    # ---- invariants ----------------------------------------------------------------
    def _check(self, i: int) -> None:
        x = self.X[i]
        if len(self.queues[i]) != x or x != self.X0[i] + self.E_i[i] - self.D_i[i]:
            raise InvariantViolation(f"mass balance fails at queue {i}, t={self.clock}")
        for ell in (x, x + 1):
            if 1 <= ell < len(self.S):
                s0 = self.S0[ell] if ell < len(self.S0) else 0
                if self.S[ell] != s0 - self.dep_exact[ell] + self.route_exact[ell]:
                    raise InvariantViolation(f"level balance fails at l={ell}, t={self.clock}")
        if self.K != self.dep_ge2 + self.arrivals_to_empty:
            raise InvariantViolation(f"service-entry identity fails at t={self.clock}")
        if sum(self.dep_exact) + self.S[1] > self.X0_total + self.E:
            raise InvariantViolation(f"global mass bound fails at t={self.clock}")
        if x > 0:
            head = self.queues[i][0]
            if head.service_start is None or head.service_start + head.service_time < self.clock:
                raise InvariantViolation(f"queue {i} is busy without a job in service")

    def check_all(self) -> None:
        """O(N) recount of every level and every queue."""
        counts = np.bincount(np.asarray(self.X, dtype=np.int64), minlength=len(self.S))
        ge = np.cumsum(counts[::-1])[::-1]
        for ell in range(1, len(self.S)):
            s0 = self.S0[ell] if ell < len(self.S0) else 0
            D_l = sum(self.dep_exact[ell:])
            D_l1 = sum(self.dep_exact[ell + 1:])
            lhs = int(ge[ell]) if ell < ge.size else 0
            if lhs != self.S[ell] or lhs != s0 - D_l + D_l1 + self.route_exact[ell]:
                raise InvariantViolation(f"level balance fails at l={ell}, t={self.clock}")
        for i in range(self.N):
            if self.X[i] != len(self.queues[i]) or self.X[i] != self.X0[i] + self.E_i[i] - self.D_i[i]:
                raise InvariantViolation(f"mass balance fails at queue {i}, t={self.clock}")
        if self.K != self.dep_ge2 + self.arrivals_to_empty:
            raise InvariantViolation(f"service-entry identity fails at t={self.clock}")
        if sum(self.dep_exact) + self.S[1] > self.X0_total + self.E:
            raise InvariantViolation(f"global mass bound fails at t={self.clock}")

    # ---- observation ------------------------------------------------------------------
    def D_levels(self, ell_max: int) -> np.ndarray:
        dep = np.zeros(max(len(self.dep_exact), ell_max + 2))
        dep[: len(self.dep_exact)] = self.dep_exact
        suffix = np.cumsum(dep[::-1])[::-1]
        return suffix[1: ell_max + 1]

    def S_levels(self, ell_max: int) -> np.ndarray:
        out = np.zeros(ell_max)
        m = min(ell_max, len(self.S) - 1)
        out[:m] = self.S[1: m + 1]
        return out

    def age_snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """(ages, lengths) over busy queues at the current clock."""
        ages = []
        lens = []
        t = self.clock
        for i in range(self.N):
            if self.X[i]:
                ages.append(t - self.queues[i][0].service_start)
                lens.append(self.X[i])
        return np.asarray(ages, dtype=float), np.asarray(lens, dtype=np.int64)

    def run(self, T: float, sample_times: Sequence[float] | None = None) -> SimTrace:
        if sample_times is None:
            sample_times = [T]
        st = [float(s) for s in sample_times]
        if any(b < a for a, b in zip(st, st[1:])) or (st and (st[0] < 0 or st[-1] > T)):
            raise ValueError("sample_times must be sorted within [0, T]")
        L = self.params.ell_max
        S_bar = np.zeros((len(st), L))
        D_bar = np.zeros((len(st), L))
        lens = np.zeros((len(st), self.N), dtype=np.int32) if self.params.record_queues else None
        ages = [] if self.params.record_ages else None
        age_lens = [] if self.params.record_ages else None
        trk = {tr.spec.name: [] for tr in self.trackers}
        for k, s in enumerate(st):
            while self.peek_time() <= s:
                self.step()
            self.sync(s)
            if self.debug:
                self.check_all()
            S_bar[k] = self.S_levels(L) / self.N
            D_bar[k] = self.D_levels(L) / self.N
            if lens is not None:
                lens[k] = self.X
            if ages is not None:
                a, x = self.age_snapshot()
                ages.append(a)
                age_lens.append(x)
            for tr in self.trackers:
                trk[tr.spec.name].append(tr.values())
        while self.peek_time() <= T:
            self.step()
        self.sync(T)
        return SimTrace(self.N, np.asarray(st), S_bar, D_bar, lens, ages, age_lens, trk,
                        self.max_length, self.n_events, self.seed)

    def snapshot_measures(self, grid: AgeGrid, as_array: bool = False):
        a, x = self.age_snapshot()
        ms = _bin_ages(a, x, self.N, self.params.ell_max, grid)
        if as_array:
            return np.stack([m.masses for m in ms])
        return ms

    def martingale_values(self) -> list[dict]:
        self.sync(self.clock)
        return [tr.values() for tr in self.trackers]


# ---- functional interface ------------------------------------------------------------


def init_sim(params: SimParams, initial=Empty(), seed: int = 0) -> SimState:
    return SimState(params, initial, seed)


def step(sim: SimState) -> EventRecord:
    return sim.step()


def run(sim: SimState, T: float, sample_times: Sequence[float] | None = None) -> SimTrace:
    return sim.run(T, sample_times)


def snapshot_measures(sim: SimState, grid: AgeGrid) -> list:
    return sim.snapshot_measures(grid)


def martingale_values(sim: SimState) -> list[dict]:
    return sim.martingale_values()
