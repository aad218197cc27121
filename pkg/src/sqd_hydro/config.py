"""Experiment configuration: strict JSON schema, defaults and validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import dists, hydro, sim

MODES = ("simulate", "fluid", "picard", "compare", "chaos", "martingale", "converge")
SIM_MODES = {"simulate", "compare", "chaos", "martingale", "converge"}
FLUID_MODES = {"fluid", "picard", "compare", "chaos", "converge"}

_WEIGHTS = {"one": sim.One, "indicator": sim.IndicatorAgeAbove, "expdecay": sim.ExpDecay}


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    mode: str
    d: int
    lam: float
    service: dict
    T: float
    N: int | None = None
    N_list: list | None = None
    arrival: dict | None = None
    R: float = 0.0
    initial: dict = field(default_factory=lambda: {"kind": "empty"})
    dt: float | None = None
    a_max: float | None = None
    ell_max: int | None = None
    sample_times: list | None = None
    sample_stride: float | None = None
    seed: int = 0
    replications: int = 1
    output_dir: str = "out"
    record_queues: bool = False
    record_ages: bool = False
    record_bins: bool = False
    trackers: list = field(default_factory=list)
    levels: list = field(default_factory=lambda: [1, 2])
    t_chaos: float | None = None
    chaos_reference: str = "fluid"
    chaos_floor: float = 0.02
    b_scale: float = 1.0
    fluid_lam: float | None = None
    picard_max_iters: int = 100
    picard_tol: float = 1e-10
    picard_window: float = 0.5
    scalar_threshold: float | None = None
    workers: int | None = None
    debug: bool | None = None

    # ---- derived objects ---------------------------------------------------------------
    def service_law(self) -> dists.Distribution:
        return dists.from_spec(self.service, 1.0, service=True)

    def arrival_law(self) -> dists.Distribution | None:
        if self.lam == 0:
            return None
        if self.arrival is None:
            return dists.Exponential(self.lam)
        return dists.from_spec(self.arrival, 1.0 / self.lam)

    def initial_condition(self):
        init = self.initial
        if init["kind"] == "empty":
            return sim.Empty()
        age = init.get("age_law")
        law = dists.from_spec(age, 1.0) if age is not None else None
        return sim.IidQueueLengths(tuple(init["pmf"]), law)

    def initial_levels(self) -> list[float]:
        if self.initial["kind"] == "empty":
            return []
        pmf = self.initial["pmf"]
        tail = []
        acc = 1.0
        for p in pmf[:-1]:
            acc -= p
            tail.append(max(acc, 0.0))
        return tail

    def fluid_state(self) -> hydro.FluidState:
        S0 = self.initial_levels()
        L = self.ell_max
        if not S0 or not any(S0):
            return hydro.FluidState.empty(L, self.dt)
        age = self.initial.get("age_law")
        if age is None:
            return hydro.FluidState.from_atoms(S0, self.dt, 0.0, L)
        law = dists.from_spec(age, 1.0)
        G = self.service_law()
        a_max = hydro.default_a_max(G, self.T, self.dt, float(law.support_end))
        if not math.isfinite(a_max):
            a_max = float(law.inverse_survival(1e-12)) + self.T
        return hydro.FluidState.from_density(S0, law, self.dt, a_max, L)

    def trackers_spec(self) -> tuple:
        out = []
        for t in self.trackers:
            cls = _WEIGHTS[t["phi"]]
            w = cls() if t["phi"] == "one" else cls(float(t["param"]))
            out.append(sim.TrackerSpec(w, int(t["level"])))
        return tuple(out)

    def sim_params(self, N: int | None = None) -> sim.SimParams:
        return sim.SimParams(
            N=int(N or self.N), d=self.d, lam=self.lam, service=self.service_law(),
            arrival=self.arrival_law(), R=self.R, ell_max=self.ell_max,
            trackers=self.trackers_spec(), record_queues=self.record_queues,
            record_ages=self.record_ages, debug=self.debug)

    def times(self) -> list[float]:
        if self.sample_times is not None:
            return [float(t) for t in self.sample_times]
        n = int(round(self.T / self.sample_stride))
        return [min(k * self.sample_stride, self.T) for k in range(n + 1)]

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replications)]

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
REQUIRED = ("mode", "d", "lam", "service", "T")


def _dist_errors(spec, where: str, service: bool) -> list[str]:
    try:
        dists.from_spec(spec, 1.0, service=service)
    except (dists.DistributionSpecError, ValueError, TypeError, KeyError) as exc:
        return [f"{where}: {exc}"]
    return []


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """Validate ``raw`` and fill defaults; raises :class:`ConfigError` listing all problems."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    errs = [f"unknown field '{k}'" for k in raw if k not in _FIELDS]
    errs += [f"missing required field '{k}'" for k in REQUIRED if k not in raw]
    v = {k: raw[k] for k in raw if k in _FIELDS}

    mode = v.get("mode")
    if "mode" in v and mode not in MODES:
        errs.append(f"mode must be one of {', '.join(MODES)}")
    if "d" in v and not (_is_int(v["d"]) and v["d"] >= 1):
        errs.append("d must be an integer >= 1")
    if "lam" in v and not (_is_num(v["lam"]) and v["lam"] >= 0):
        errs.append("lam must be a nonnegative number")
    if "T" in v and not (_is_num(v["T"]) and v["T"] > 0):
        errs.append("T must be positive")
    if "service" in v:
        errs += _dist_errors(v["service"], "service", True)
    if v.get("arrival") is not None:
        errs += _dist_errors(v["arrival"], "arrival", False)
    for k in ("R", "b_scale", "chaos_floor", "picard_tol", "picard_window"):
        if k in v and not (_is_num(v[k]) and v[k] >= 0):
            errs.append(f"{k} must be a nonnegative number")
    for k in ("dt", "a_max", "sample_stride", "t_chaos", "scalar_threshold", "fluid_lam"):
        if v.get(k) is not None and not (_is_num(v[k]) and v[k] > 0):
            errs.append(f"{k} must be positive")
    for k in ("seed", "replications", "picard_max_iters"):
        if k in v and not (_is_int(v[k]) and v[k] >= (0 if k == "seed" else 1)):
            errs.append(f"{k} must be a {'nonnegative' if k == 'seed' else 'positive'} integer")
    for k in ("N", "workers"):
        if v.get(k) is not None and not (_is_int(v[k]) and v[k] >= 1):
            errs.append(f"{k} must be a positive integer")
    if v.get("ell_max") is not None and not (_is_int(v["ell_max"]) and v["ell_max"] >= 2):
        errs.append("ell_max must be an integer >= 2")
    if v.get("N_list") is not None:
        nl = v["N_list"]
        if not (isinstance(nl, list) and nl and all(_is_int(n) and n >= 1 for n in nl)):
            errs.append("N_list must be a nonempty list of positive integers")
    for k in ("record_queues", "record_ages", "record_bins", "debug"):
        if k in v and not isinstance(v[k], bool) and not (k == "debug" and v[k] is None):
            errs.append(f"{k} must be a boolean")
    if "output_dir" in v and not isinstance(v["output_dir"], str):
        errs.append("output_dir must be a string")
    if "chaos_reference" in v and v["chaos_reference"] not in ("fluid", "empirical"):
        errs.append("chaos_reference must be 'fluid' or 'empirical'")
    if "levels" in v:
        lv = v["levels"]
        if not (isinstance(lv, list) and 1 <= len(lv) <= 4 and all(_is_int(x) and x >= 1 for x in lv)):
            errs.append("levels must be a list of 1 to 4 positive integers")
    if v.get("sample_times") is not None:
        st = v["sample_times"]
        if not (isinstance(st, list) and st and all(_is_num(t) and t >= 0 for t in st)):
            errs.append("sample_times must be a nonempty list of nonnegative numbers")
        elif _is_num(v.get("T")) and max(st) > v["T"]:
            errs.append("sample_times must not exceed T")
    errs += _initial_errors(v.get("initial", {"kind": "empty"}))
    errs += _tracker_errors(v.get("trackers", []))

    # mode-dependent requirements
    if mode in SIM_MODES - {"converge"} and v.get("N") is None:
        errs.append(f"mode '{mode}' requires N")
    if mode == "converge" and v.get("N_list") is None:
        errs.append("mode 'converge' requires N_list")
    if mode in FLUID_MODES and v.get("dt") is None:
        errs.append(f"mode '{mode}' requires dt")
    if mode == "martingale" and not v.get("trackers"):
        errs.append("mode 'martingale' requires at least one tracker")
    d, lam, dt = v.get("d"), v.get("lam"), v.get("dt")
    if mode in FLUID_MODES and _is_int(d) and _is_num(lam) and _is_num(dt) and dt > 0:
        if dt * lam * d >= 1.0:
            errs.append(f"dt*lam*d = {dt * lam * d:.4g} >= 1 violates the step-size guard; "
                        f"use dt < {1.0 / (lam * d):.4g}, e.g. dt = {0.5 / (lam * d):.3g}")
    if errs:
        raise ConfigError(errs)

    cfg = ExperimentConfig(**v)
    if cfg.arrival is not None:
        cfg.arrival = dict(cfg.arrival)
    if cfg.ell_max is None:
        L = hydro.default_ell_max(cfg.lam, cfg.d)
        cfg.ell_max = max(L, len(cfg.initial_levels()) + 1)
    if cfg.sample_times is None and cfg.sample_stride is None:
        cfg.sample_stride = cfg.T / 50
    if cfg.mode == "chaos" and cfg.t_chaos is None:
        cfg.t_chaos = cfg.T
    for key in ("service", "arrival"):
        spec = getattr(cfg, key)
        if spec is not None and "normalize" not in spec:
            setattr(cfg, key, dict(spec, normalize=True))
    if cfg.mode in ("chaos",):
        cfg.record_queues = True
    if cfg.mode in ("compare", "converge"):
        cfg.record_ages = True
    return cfg


def _initial_errors(init) -> list[str]:
    if not isinstance(init, dict) or init.get("kind") not in ("empty", "iid"):
        return ["initial must be {'kind': 'empty'} or {'kind': 'iid', 'pmf': [...]}"]
    extra = set(init) - {"kind", "pmf", "age_law"}
    errs = [f"initial: unknown field '{k}'" for k in sorted(extra)]
    if init["kind"] == "iid":
        pmf = init.get("pmf")
        if not (isinstance(pmf, list) and pmf and all(_is_num(p) and p >= 0 for p in pmf)):
            errs.append("initial.pmf must be a list of nonnegative numbers")
        elif abs(sum(pmf) - 1.0) > 1e-9:
            errs.append(f"initial.pmf must sum to 1 (sums to {sum(pmf):.12g})")
        if init.get("age_law") is not None:
            errs += _dist_errors(init["age_law"], "initial.age_law", False)
    return errs


def _tracker_errors(trackers) -> list[str]:
    if not isinstance(trackers, list):
        return ["trackers must be a list"]
    errs = []
    for i, t in enumerate(trackers):
        if not isinstance(t, dict) or t.get("phi") not in _WEIGHTS:
            errs.append(f"trackers[{i}].phi must be one of {', '.join(_WEIGHTS)}")
            continue
        if set(t) - {"phi", "param", "level"}:
            errs.append(f"trackers[{i}] has unknown fields {sorted(set(t) - {'phi', 'param', 'level'})}")
        if not (_is_int(t.get("level")) and t["level"] >= 1):
            errs.append(f"trackers[{i}].level must be a positive integer")
        if t["phi"] != "one" and not (_is_num(t.get("param")) and t["param"] >= 0):
            errs.append(f"trackers[{i}].param must be a nonnegative number")
    return errs


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings; values are parsed as JSON, falling back to strings.

    Dotted keys reach into nested objects (``service.params=[2, 1]``).
    """
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override '{item}' is not of the form key=value"])
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override '{key}' descends into a non-object"])
        node[parts[-1]] = value
    return out


def load_raw(path: str | Path) -> dict:
    """Read a config file; a run manifest is accepted and its config echo is used."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError([f"{p}: file not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: not valid JSON ({exc})"]) from None
    if isinstance(raw, dict) and "input_hash" in raw and isinstance(raw.get("config"), dict):
        raw = raw["config"]
    return raw


def parse_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    return config_from_dict(apply_overrides(load_raw(path), overrides or []))
