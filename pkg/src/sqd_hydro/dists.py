"""Service and inter-arrival laws.

Every family has a closed-form log-survival function, so survival ratios
``Gbar(a + delta) / Gbar(a)`` are computed as differences of log-survivals and
never through an (possibly unbounded) hazard rate.  Sampling is by inverse
transform on the (conditional) survival function; the two families without a
closed-form quantile (Erlang, hyperexponential) fall back to a bracketed root
search for conditional draws and to composition for unconditional ones.

The families form a closed set on purpose: each one has a density that is
bounded on finite intervals (Weibull requires ``shape >= 1`` when used as a
service law), which is what the fluid solver relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import optimize, special

__all__ = [
    "ConditioningError",
    "Distribution",
    "DistributionSpecError",
    "DomainError",
    "Erlang",
    "Exponential",
    "HyperExponential",
    "LogNormal",
    "Lomax",
    "Uniform",
    "Weibull",
    "from_spec",
]

_ROOT_RTOL = 1e-12


class DomainError(ValueError):
    """Raised when a quantity is evaluated outside the support ``[0, L)``."""


class ConditioningError(ValueError):
    """Raised when conditioning on an age that has zero survival probability."""


class DistributionSpecError(ValueError):
    """Raised for an unknown family, bad parameters or a law without density."""


class Distribution:
    """Base class; subclasses are frozen dataclasses holding the parameters.

    Subclasses implement ``log_survival``, ``log_density``, ``_inverse_log_survival``,
    ``mean``, ``support_end`` and ``scaled``.  Everything else is derived here.
    """

    family: str = ""

    # ---- per-family primitives -------------------------------------------------
    def log_survival(self, x):
        raise NotImplementedError

    def log_density(self, x):
        raise NotImplementedError

    def _inverse_log_survival(self, y: float) -> float:
        """Smallest ``x >= 0`` with ``log_survival(x) == y`` (``y <= 0``)."""
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def support_end(self) -> float:
        """``L = sup{x : G(x) < 1}``."""
        return math.inf

    def scaled(self, c: float) -> "Distribution":
        """Law of ``c * X``."""
        raise NotImplementedError

    @property
    def params(self) -> tuple:
        raise NotImplementedError

    @property
    def has_bounded_density(self) -> bool:
        return True

    # ---- derived quantities ------------------------------------------------------
    def normalized(self, target_mean: float = 1.0) -> "Distribution":
        return self.scaled(target_mean / self.mean)

    def survival(self, x):
        return np.exp(self.log_survival(x))

    def cdf(self, x):
        return -np.expm1(self.log_survival(x))

    def density(self, x):
        return np.exp(self.log_density(x))

    def cumulative_hazard(self, x):
        return -self.log_survival(x)

    def hazard(self, x):
        """``g(x) / Gbar(x)``; raises :class:`DomainError` for ``x >= L``."""
        arr = np.asarray(x, dtype=float)
        if np.any(arr >= self.support_end):
            raise DomainError(
                f"hazard evaluated at x >= L = {self.support_end} for {self!r}"
            )
        out = self._hazard(arr)
        return float(out) if np.ndim(x) == 0 else out

    def _hazard(self, x):
        return np.exp(self.log_density(x) - self.log_survival(x))

    def survival_ratio(self, a, delta):
        """``Gbar(a + delta) / Gbar(a)``, the probability of surviving ``delta`` more."""
        la = np.asarray(self.log_survival(a), dtype=float)
        if np.any(np.isneginf(la)):
            raise ConditioningError(f"survival({a}) = 0 for {self!r}; cannot condition")
        out = np.exp(self.log_survival(np.asarray(a) + np.asarray(delta)) - la)
        return float(out) if np.ndim(out) == 0 else out

    def survival_ratio_table(self, ages: np.ndarray, delta: float) -> np.ndarray:
        """Vectorized survival ratios that return 0 where ``Gbar(age) == 0``."""
        ages = np.asarray(ages, dtype=float)
        la = np.asarray(self.log_survival(ages), dtype=float)
        lb = np.asarray(self.log_survival(ages + delta), dtype=float)
        out = np.zeros_like(ages)
        ok = np.isfinite(la)
        out[ok] = np.exp(lb[ok] - la[ok])
        return np.clip(out, 0.0, 1.0)

    def hazard_table(self, ages: np.ndarray) -> np.ndarray:
        """Hazard on a grid, 0 at ages outside the support."""
        ages = np.asarray(ages, dtype=float)
        out = np.zeros_like(ages)
        ok = ages < self.support_end
        if np.any(ok):
            out[ok] = self._hazard(ages[ok])
        return out

    def inverse_survival(self, p: float) -> float:
        """Smallest ``x`` with ``Gbar(x) <= p``."""
        if p <= 0.0:
            return self.support_end
        return self._inverse_log_survival(math.log(min(p, 1.0)))

    def quantile(self, q: float) -> float:
        return self.inverse_survival(1.0 - q)

    # ---- sampling ----------------------------------------------------------------
    def sample(self, rng) -> float:
        """One draw; ``rng`` only needs a ``random()`` method returning U[0, 1)."""
        return self._inverse_log_survival(math.log1p(-rng.random()))

    def sample_residual(self, a: float, rng) -> float:
        """Residual life ``b`` with ``P{b > x} = Gbar(a + x) / Gbar(a)``."""
        la = float(self.log_survival(a))
        if la == -math.inf:
            raise ConditioningError(f"survival({a}) = 0 for {self!r}; cannot condition")
        if a == 0.0:
            return self.sample(rng)
        y = la + math.log1p(-rng.random())
        return max(self._inverse_log_survival(y) - a, 0.0)

    def sample_delay(self, R: float, rng) -> float:
        """First inter-arrival time of a renewal process whose clock reads age ``R``."""
        return self.sample_residual(R, rng)

    def samples(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` vectorized inverse-transform draws (used for large empirical checks)."""
        y = np.log1p(-rng.random(n))
        return self._inverse_log_survival_array(y)

    def _inverse_log_survival_array(self, y: np.ndarray) -> np.ndarray:
        return np.array([self._inverse_log_survival(float(v)) for v in y])

    def to_spec(self) -> dict:
        return {"family": self.family, "params": list(self.params), "normalize": False}

    def _root_inverse(self, y: float) -> float:
        # bracketed search for families without closed-form quantiles
        if y >= 0.0:
            return 0.0
        hi = max(self.mean, 1e-12)
        while float(self.log_survival(hi)) > y:
            hi *= 2.0
        return optimize.brentq(
            lambda x: float(self.log_survival(x)) - y, 0.0, hi, xtol=1e-300, rtol=_ROOT_RTOL
        )


@dataclass(frozen=True)
class Exponential(Distribution):
    rate: float = 1.0
    family = "Exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise DistributionSpecError("Exponential rate must be positive")

    @property
    def params(self):
        return (self.rate,)

    def log_survival(self, x):
        return -self.rate * np.asarray(x, dtype=float) if np.ndim(x) else -self.rate * float(x)

    def log_density(self, x):
        return math.log(self.rate) + self.log_survival(x)

    def _hazard(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.rate)

    def cumulative_hazard(self, x):
        return self.rate * x

    def _inverse_log_survival(self, y):
        return -y / self.rate

    def _inverse_log_survival_array(self, y):
        return -y / self.rate

    def sample(self, rng):
        return -math.log1p(-rng.random()) / self.rate

    @property
    def mean(self):
        return 1.0 / self.rate

    def scaled(self, c):
        return Exponential(self.rate / c)


@dataclass(frozen=True)
class Erlang(Distribution):
    shape: int = 1
    rate: float = 1.0
    family = "Erlang"

    def __post_init__(self):
        if int(self.shape) != self.shape or self.shape < 1:
            raise DistributionSpecError("Erlang shape must be a positive integer")
        if not self.rate > 0:
            raise DistributionSpecError("Erlang rate must be positive")

    @property
    def params(self):
        return (int(self.shape), self.rate)

    def log_survival(self, x):
        z = self.rate * np.asarray(x, dtype=float)
        terms = [special.xlogy(n, z) - special.gammaln(n + 1) for n in range(int(self.shape))]
        out = -z + special.logsumexp(np.stack(terms), axis=0)
        return float(out) if np.ndim(x) == 0 else out

    def log_density(self, x):
        k = int(self.shape)
        z = self.rate * np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            out = k * math.log(self.rate) + (k - 1) * np.log(z / self.rate) - z - special.gammaln(k)
        if k == 1:
            out = math.log(self.rate) - z
        return float(out) if np.ndim(x) == 0 else out

    def _inverse_log_survival(self, y):
        return self._root_inverse(y)

    def sample(self, rng):
        return -sum(math.log1p(-rng.random()) for _ in range(int(self.shape))) / self.rate

    def samples(self, n, rng):
        return rng.gamma(int(self.shape), 1.0 / self.rate, size=n)

    @property
    def mean(self):
        return self.shape / self.rate

    def scaled(self, c):
        return Erlang(int(self.shape), self.rate / c)


@dataclass(frozen=True)
class HyperExponential(Distribution):
    weights: tuple = (1.0,)
    rates: tuple = (1.0,)
    family = "HyperExponential"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if w.shape != r.shape or w.ndim != 1 or w.size == 0:
            raise DistributionSpecError("HyperExponential needs equal-length weights and rates")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DistributionSpecError("HyperExponential weights must be a probability vector")
        if np.any(r <= 0):
            raise DistributionSpecError("HyperExponential rates must be positive")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "rates", tuple(float(v) for v in r))

    @property
    def params(self):
        return (*self.weights, *self.rates)

    def log_survival(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lw = np.log(np.asarray(self.weights))
        terms = lw.reshape((-1,) + (1,) * xa.ndim) - np.multiply.outer(np.asarray(self.rates), xa)
        out = special.logsumexp(terms, axis=0)
        return float(out) if xa.ndim == 0 else out

    def log_density(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lw = np.log(np.asarray(self.weights) * np.asarray(self.rates))
        terms = lw.reshape((-1,) + (1,) * xa.ndim) - np.multiply.outer(np.asarray(self.rates), xa)
        out = special.logsumexp(terms, axis=0)
        return float(out) if xa.ndim == 0 else out

    def _inverse_log_survival(self, y):
        return self._root_inverse(y)

    def sample(self, rng):
        u = rng.random()
        acc = 0.0
        k = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            acc += w
            if u < acc:
                k = i
                break
        return -math.log1p(-rng.random()) / self.rates[k]

    def samples(self, n, rng):
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return rng.exponential(1.0, size=n) / np.asarray(self.rates)[idx]

    @property
    def mean(self):
        return float(sum(w / r for w, r in zip(self.weights, self.rates)))

    def scaled(self, c):
        return HyperExponential(self.weights, tuple(r / c for r in self.rates))


@dataclass(frozen=True)
class Weibull(Distribution):
    shape: float = 1.0
    scale: float = 1.0
    family = "Weibull"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise DistributionSpecError("Weibull shape and scale must be positive")

    @property
    def params(self):
        return (self.shape, self.scale)

    @property
    def has_bounded_density(self):
        return self.shape >= 1.0

    def log_survival(self, x):
        if np.ndim(x) == 0:
            return -((float(x) / self.scale) ** self.shape)
        return -((np.asarray(x, dtype=float) / self.scale) ** self.shape)

    def log_density(self, x):
        z = np.asarray(x, dtype=float) / self.scale
        with np.errstate(divide="ignore"):
            out = math.log(self.shape / self.scale) + (self.shape - 1.0) * np.log(z) - z**self.shape
        if self.shape == 1.0:
            out = math.log(1.0 / self.scale) - z
        return float(out) if np.ndim(x) == 0 else out

    def _hazard(self, x):
        return self.shape / self.scale * (np.asarray(x, dtype=float) / self.scale) ** (self.shape - 1.0)

    def _inverse_log_survival(self, y):
        return self.scale * (-y) ** (1.0 / self.shape)

    def _inverse_log_survival_array(self, y):
        return self.scale * (-y) ** (1.0 / self.shape)

    @property
    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def scaled(self, c):
        return Weibull(self.shape, self.scale * c)


@dataclass(frozen=True)
class LogNormal(Distribution):
    mu: float = 0.0
    sigma: float = 1.0
    family = "LogNormal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise DistributionSpecError("LogNormal sigma must be positive")

    @property
    def params(self):
        return (self.mu, self.sigma)

    def log_survival(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(xa) - self.mu) / self.sigma
        out = special.log_ndtr(-z)
        return float(out) if xa.ndim == 0 else out

    def log_density(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(xa)
            z = (lx - self.mu) / self.sigma
            out = -0.5 * z * z - lx - math.log(self.sigma * math.sqrt(2.0 * math.pi))
        out = np.where(xa > 0, out, -np.inf)
        return float(out) if xa.ndim == 0 else out

    def _inverse_log_survival(self, y):
        if y >= 0.0:
            return 0.0
        return math.exp(self.mu - self.sigma * float(special.ndtri_exp(y)))

    def _inverse_log_survival_array(self, y):
        y = np.asarray(y, dtype=float)
        out = np.exp(self.mu - self.sigma * special.ndtri_exp(np.minimum(y, -1e-300)))
        return np.where(y >= 0.0, 0.0, out)

    @property
    def mean(self):
        return math.exp(self.mu + 0.5 * self.sigma**2)

    def scaled(self, c):
        return LogNormal(self.mu + math.log(c), self.sigma)


@dataclass(frozen=True)
class Lomax(Distribution):
    """Pareto type II: ``Gbar(x) = (1 + x / scale) ** -shape``."""

    shape: float = 2.0
    scale: float = 1.0
    family = "Lomax"

    def __post_init__(self):
        if not self.shape > 1.0:
            raise DistributionSpecError("Lomax shape must exceed 1 for a finite mean")
        if not self.scale > 0:
            raise DistributionSpecError("Lomax scale must be positive")

    @property
    def params(self):
        return (self.shape, self.scale)

    def log_survival(self, x):
        if np.ndim(x) == 0:
            return -self.shape * math.log1p(float(x) / self.scale)
        return -self.shape * np.log1p(np.asarray(x, dtype=float) / self.scale)

    def log_density(self, x):
        return math.log(self.shape / self.scale) - (self.shape + 1.0) * np.log1p(
            np.asarray(x, dtype=float) / self.scale
        )

    def _hazard(self, x):
        return self.shape / (self.scale + np.asarray(x, dtype=float))

    def _inverse_log_survival(self, y):
        return self.scale * math.expm1(-y / self.shape)

    def _inverse_log_survival_array(self, y):
        return self.scale * np.expm1(-np.asarray(y) / self.shape)

    @property
    def mean(self):
        return self.scale / (self.shape - 1.0)

    def scaled(self, c):
        return Lomax(self.shape, self.scale * c)


@dataclass(frozen=True)
class Uniform(Distribution):
    """Uniform on ``[0, b]``; the hazard ``1 / (b - x)`` blows up at ``L = b``."""

    b: float = 2.0
    family = "Uniform"

    def __post_init__(self):
        if not self.b > 0:
            raise DistributionSpecError("Uniform upper end must be positive")

    @property
    def params(self):
        return (self.b,)

    @property
    def support_end(self):
        return self.b

    def log_survival(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(xa < self.b, np.log1p(-np.minimum(xa, self.b) / self.b), -np.inf)
        return float(out) if xa.ndim == 0 else out

    def log_density(self, x):
        xa = np.asarray(x, dtype=float)
        out = np.where(xa < self.b, -math.log(self.b), -np.inf)
        return float(out) if xa.ndim == 0 else out

    def _hazard(self, x):
        return 1.0 / (self.b - np.asarray(x, dtype=float))

    def _inverse_log_survival(self, y):
        return -self.b * math.expm1(y)

    def _inverse_log_survival_array(self, y):
        return -self.b * np.expm1(y)

    @property
    def mean(self):
        return 0.5 * self.b

    def scaled(self, c):
        return Uniform(self.b * c)


_FAMILIES = {
    "exponential": Exponential,
    "erlang": Erlang,
    "hyperexponential": HyperExponential,
    "weibull": Weibull,
    "lognormal": LogNormal,
    "lomax": Lomax,
    "pareto-lomax": Lomax,
    "pareto": Lomax,
    "uniform": Uniform,
}

_NO_DENSITY = {"deterministic", "constant", "degenerate"}


def _build(family: str, params: list) -> Distribution:
    key = family.strip().lower().replace("_", "-")
    if key in _NO_DENSITY:
        raise DistributionSpecError(
            f"{family!r} service times have no density; the model requires G to have a density"
        )
    cls = _FAMILIES.get(key)
    if cls is None:
        raise DistributionSpecError(f"unknown distribution family {family!r}")
    try:
        if cls is HyperExponential:
            if len(params) % 2:
                raise DistributionSpecError("HyperExponential params are weights then rates")
            k = len(params) // 2
            return HyperExponential(tuple(params[:k]), tuple(params[k:]))
        if cls is Uniform and len(params) == 2:
            if params[0] != 0:
                raise DistributionSpecError("Uniform laws must start at 0: params [0, b] or [b]")
            params = params[1:]
        return cls(*params)
    except TypeError as exc:
        raise DistributionSpecError(f"bad parameters {params!r} for {family}: {exc}") from None


def from_spec(
    spec: Mapping[str, Any], target_mean: float | None = 1.0, *, service: bool = False
) -> Distribution:
    """Build a law from ``{"family", "params", "normalize"}``.

    With ``normalize`` (default true) the law is rescaled to ``target_mean``.
    ``service=True`` additionally enforces a density bounded on finite intervals.
    """
    dist = _build(str(spec["family"]), list(spec.get("params", [])))
    if spec.get("normalize", True) and target_mean is not None:
        dist = dist.normalized(target_mean)
    if service and not dist.has_bounded_density:
        raise DistributionSpecError(
            f"{dist!r} has a density unbounded near 0; service laws need a locally bounded density"
        )
    return dist
