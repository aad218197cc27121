"""Command line front end: ``sqd-hydro <mode> --config path [--set key=value]...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__, analysis, hydro, sim
from .config import MODES, ConfigError, ExperimentConfig, parse_config


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path: Path, header, rows, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def git_blob_hash(data: bytes) -> str:
    """Content hash as computed by ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _flag(test: str, statistic, threshold, ok) -> dict:
    return {"test": test, "statistic": statistic, "threshold": threshold, "pass": bool(ok)}


def _workers(cfg: ExperimentConfig) -> int | None:
    return cfg.workers


def _fluid(cfg: ExperimentConfig, record_measures: bool = False, times=None) -> hydro.FluidTrace:
    lam = cfg.fluid_lam if cfg.fluid_lam is not None else cfg.lam
    return hydro.solve(cfg.fluid_state(), cfg.T, cfg.dt, lam, cfg.d, cfg.service_law(),
                       ell_max=cfg.ell_max, a_max=cfg.a_max,
                       sample_times=times if times is not None else cfg.times(),
                       record_measures=record_measures)


def _fluid_bins_rows(trace: hydro.FluidTrace):
    w = trace.dt
    for k, step in enumerate(trace.sample_steps):
        m = trace.measures[k]
        for j in range(m.shape[0]):
            for b in np.nonzero(m[j])[0]:
                yield (trace.times[step], j + 1, b * w, m[j, b])


# ---- modes -------------------------------------------------------------------------------------


def _mode_simulate(cfg: ExperimentConfig, out: Path) -> list[dict]:
    params = cfg.sim_params()
    init = cfg.initial_condition()
    width = cfg.dt or cfg.T / 1000
    grid = hydro.AgeGrid(width, cfg.a_max or cfg.T + width)
    flags = []
    trackers = []
    for r, seed in enumerate(cfg.seeds()):
        tr = sim.SimState(params, init, seed).run(cfg.T, cfg.times())
        tag = f"_r{r}" if cfg.replications > 1 else ""
        write_csv(out / f"sim_trace{tag}.csv", ["time", "level", "S_bar", "D_bar"], tr.rows())
        if tr.lengths is not None:
            write_csv(out / f"queues{tag}.csv", ["time"] + [f"q{i}" for i in range(tr.N)],
                      ([t, *row] for t, row in zip(tr.times, tr.lengths)))
        if tr.ages is not None:
            rows = []
            for k, t in enumerate(tr.times):
                for j, m in enumerate(tr.measures(k, grid)):
                    for b in np.nonzero(m.masses)[0]:
                        rows.append((t, j + 1, b * width, m.masses[b]))
                    if m.overflow:
                        rows.append((t, j + 1, grid.n_bins * width, m.overflow))
            write_csv(out / f"age_hist{tag}.csv", ["time", "level", "bin_left_edge", "mass"], rows)
        if params.trackers:
            trackers.append([{k: v[-1][k] for k in ("phi", "level")} |
                             {k: v[-1][k] for k in ("M", "N", "quadM", "quadN")}
                             for v in tr.trackers.values()])
        flags.append(_flag(f"max_length{tag}", tr.max_length, None, True))
    if trackers:
        write_json(out / "trackers.json", trackers if cfg.replications > 1 else trackers[0])
    return flags


def _mode_fluid(cfg: ExperimentConfig, out: Path) -> list[dict]:
    tr = _fluid(cfg, record_measures=cfg.record_bins)
    write_csv(out / "fluid_trace.csv",
              ["time", "level", "S", "D", "eta_mass", "residual", "mass_leak"], tr.rows())
    if cfg.record_bins:
        write_csv(out / "fluid_bins.csv", ["time", "level", "bin_left_edge", "mass"],
                  _fluid_bins_rows(tr))
    res = float(np.max(np.abs(tr.residual())))
    return [_flag("balance_residual", res, None, True),
            _flag("mass_leak", float(tr.leak[-1]), None, True)]


def _mode_picard(cfg: ExperimentConfig, out: Path) -> list[dict]:
    lam = cfg.fluid_lam if cfg.fluid_lam is not None else cfg.lam
    try:
        tr = hydro.solve_picard(cfg.fluid_state(), cfg.T, cfg.dt, lam, cfg.d, cfg.service_law(),
                                max_iters=cfg.picard_max_iters, tol=cfg.picard_tol,
                                window=cfg.picard_window, ell_max=cfg.ell_max, a_max=cfg.a_max,
                                sample_times=cfg.times())
    except hydro.PicardDivergenceError as exc:
        return [_flag("picard_convergence", exc.last_change, cfg.picard_tol, False)]
    write_csv(out / "picard_trace.csv",
              ["time", "level", "S", "D", "eta_mass", "residual", "mass_leak"], tr.rows())
    w = tr.diagnostics["window_steps"] * tr.dt
    write_csv(out / "picard_iterations.csv", ["window_start", "iterations", "last_change"],
              ((i * w, it, ch[-1]) for i, (it, ch) in enumerate(zip(tr.iterations, tr.changes))))
    last = max(ch[-1] for ch in tr.changes)
    return [_flag("picard_convergence", last, cfg.picard_tol, last < cfg.picard_tol)]


def _mode_compare(cfg: ExperimentConfig, out: Path) -> list[dict]:
    times = cfg.times()
    fl = _fluid(cfg, record_measures=True, times=times)
    params = cfg.sim_params()
    init = cfg.initial_condition()
    flags = []
    for r, seed in enumerate(cfg.seeds()):
        tr = sim.SimState(params, init, seed).run(cfg.T, times)
        rep = analysis.state_distance(tr, fl, ell_max=cfg.ell_max)
        tag = f"_r{r}" if cfg.replications > 1 else ""
        write_csv(out / f"distance{tag}.csv",
                  ["time", "level", "scalar_gap", "age_gap", "weighted", "age_aggregate",
                   "aggregate"], rep.rows(), comment=rep.note)
        flags.append(_flag(f"aggregate_distance{tag}", rep.sup_aggregate, None, True))
        if cfg.scalar_threshold is not None:
            s = rep.sup_scalar(3)
            flags.append(_flag(f"scalar_gap_l3{tag}", s, cfg.scalar_threshold,
                               s <= cfg.scalar_threshold))
    return flags


def _mode_chaos(cfg: ExperimentConfig, out: Path) -> list[dict]:
    t = cfg.t_chaos
    fl = _fluid(cfg, times=[t]) if cfg.chaos_reference == "fluid" else None
    params = cfg.sim_params()
    init = cfg.initial_condition()
    traces = []
    for seed in cfg.seeds():
        tr = sim.SimState(params, init, seed).run(t, [t])
        tr.lengths = tr.lengths[:, : len(cfg.levels)].copy()
        traces.append(tr)
    rep = analysis.chaos_estimate(traces, fl, t, cfg.levels, reference=cfg.chaos_reference)
    write_json(out / "chaos.json", rep.as_dict())
    thr = max(analysis.CONFIDENCE * rep.stderr, cfg.chaos_floor)
    return [_flag("chaos_gap", abs(rep.gap), thr, abs(rep.gap) <= thr)]


def _mode_martingale(cfg: ExperimentConfig, out: Path) -> list[dict]:
    params = cfg.sim_params()
    init = cfg.initial_condition()
    outputs = []
    for seed in cfg.seeds():
        s = sim.SimState(params, init, seed)
        s.run(cfg.T, [cfg.T])
        outputs.append(s.martingale_values())
    report = analysis.martingale_report(outputs, b_scale=cfg.b_scale, seed=cfg.seed)
    keys = ["phi", "level", "n", "b_scale", "meanM", "stderrM", "varM", "meanQuadM",
            "bootstrapStderrM", "meanN", "stderrN", "varN", "meanQuadN", "bootstrapStderrN",
            "pass_meanM", "pass_varM", "pass_meanN", "pass_varN"]
    write_csv(out / "martingale.csv", keys, ([e[k] for k in keys] for e in report))
    flags = []
    for e in report:
        name = f"{e['phi']}@{e['level']}"
        for tag in ("M", "N"):
            flags.append(_flag(f"mean{tag}[{name}]", abs(e[f"mean{tag}"]),
                               analysis.CONFIDENCE * e[f"stderr{tag}"], e[f"pass_mean{tag}"]))
            flags.append(_flag(f"var{tag}[{name}]", abs(e[f"var{tag}"] - e[f"meanQuad{tag}"]),
                               analysis.CONFIDENCE * e[f"bootstrapStderr{tag}"],
                               e[f"pass_var{tag}"]))
    return flags


def _mode_converge(cfg: ExperimentConfig, out: Path) -> list[dict]:
    times = cfg.times()
    fl = _fluid(cfg, record_measures=True, times=times)
    table = analysis.convergence_study(fl, cfg.sim_params, cfg.initial_condition(), cfg.N_list,
                                       cfg.replications, T=cfg.T, sample_times=times,
                                       base_seed=cfg.seed, workers=_workers(cfg))
    write_csv(out / "convergence.csv",
              ["N", "mean_aggregate", "stderr", "mean_scalar_l3", "stderr_scalar_l3"],
              table.rows(), comment=analysis.METRIC_NOTE)
    raw_keys = ["N", "seed", "aggregate", "scalar", "weighted", "age", "max_length", "events"]
    write_csv(out / "convergence_raw.csv", raw_keys,
              ([r[k] for k in raw_keys] for rows in table.raw for r in rows))
    flags = [_flag("aggregate_decreasing_in_N", table.fit_exponent(), None, table.decreasing())]
    if cfg.scalar_threshold is not None:
        s = float(table.scalar_mean[-1])
        flags.append(_flag("scalar_gap_l3_at_max_N", s, cfg.scalar_threshold,
                           s <= cfg.scalar_threshold))
    return flags


_MODES = {
    "simulate": _mode_simulate, "fluid": _mode_fluid, "picard": _mode_picard,
    "compare": _mode_compare, "chaos": _mode_chaos, "martingale": _mode_martingale,
    "converge": _mode_converge,
}


def _versions() -> dict:
    return {"sqd_hydro": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run the configured mode, write artifacts and return the exit status."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc}", file=sys.stderr)
        return 3
    config_echo = cfg.to_dict()
    canonical = json.dumps(config_echo, sort_keys=True, separators=(",", ":")).encode()
    t0 = time.perf_counter()
    try:
        flags = _MODES[cfg.mode](cfg, out)
        write_json(out / "summary.json", flags)
    except OSError as exc:
        print(f"I/O failure at {getattr(exc, 'filename', None) or out}: {exc}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0
    outputs = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
               for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "config": config_echo,
        "input_hash": git_blob_hash(canonical),
        "seed_policy": "replication r uses seed base + r",
        "seeds": cfg.seeds(),
        "wall_clock_s": wall,
        "versions": _versions(),
        "outputs_sha256": outputs,
    }
    write_json(out / "manifest.json", manifest)
    failed = [f["test"] for f in flags if not f["pass"]]
    for f in flags:
        status = "PASS" if f["pass"] else "FAIL"
        print(f"{status} {f['test']}: statistic={f['statistic']} threshold={f['threshold']}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqd-hydro",
                                description="SQ(d) load balancing: simulation, fluid limit and "
                                            "convergence diagnostics")
    sub = p.add_subparsers(dest="mode", required=True)
    for m in MODES:
        sp = sub.add_parser(m, help=f"run the {m} experiment")
        sp.add_argument("--config", required=True, help="JSON config file or run manifest")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field (JSON value)")
        sp.add_argument("--output-dir", help="shorthand for --set output_dir=...")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides) + [f"mode={json.dumps(args.mode)}"]
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
