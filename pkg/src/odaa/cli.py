"""
Command-line front end.

    odaa analyze  --config C   moment table and region classes of a price/return CSV
    odaa fit      --config C   moment-matched mixture model
    odaa solve    --config C   optimal policy, value functions and p*
    odaa frontier --config C   mean-variance frontier and its best static portfolio
    odaa simulate --config C   Monte Carlo check of the solved (or a static) policy
    odaa compare  --config C   dynamic vs. static success probability

Every command writes into ``--out`` (default: ``output`` from the config) and
finishes with a ``<command>_summary.json`` document. Re-running a command
with the same inputs reproduces every file byte for byte except the
``header`` block of the summary (timestamp and wall time).

Exit codes: 0 success, 2 input error, 3 infeasible problem, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import io as odaa_io
from .config import RunConfig, load_config
from .econometrics import (annualize, classify_region, compute_moments, compute_returns, jarque_bera,
                           jb_critical_value)
from .errors import InputError, OdaaError
from .markowitz import efficient_frontier, select_max_success
from .mixture import fit_moment_matching, mixture_moments
from .reachability import PolicyMap, StateGrid, solve
from .simulation import simulate

logger = logging.getLogger("odaa")

COMMANDS = ("analyze", "fit", "solve", "frontier", "simulate", "compare")


def _summary(cmd: str, cfg: RunConfig, results: dict, t0: float) -> dict:
    return {
        "header": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                   "wall_time_s": round(time.perf_counter() - t0, 3), "version": __version__},
        "command": cmd,
        "config": cfg.to_dict(),
        "results": results,
    }


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _returns(cfg: RunConfig):
    d = cfg.data
    if d.returns:
        return odaa_io.read_return_csv(d.returns, d.periods_per_year)
    if d.prices:
        return compute_returns(odaa_io.read_price_csv(d.prices, d.periods_per_year))
    raise InputError("config needs data.prices or data.returns for this command")


def _model(cfg: RunConfig):
    if not cfg.model:
        raise InputError("config needs 'model' (mixture fixture) for this command")
    return odaa_io.load_model(cfg.model)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    r = _returns(cfg)
    ms = compute_moments(r)
    ann = annualize(ms, r.periods_per_year)
    n = cfg.analysis.n or r.n_obs
    regions, jb = [], []
    for sk, ku in zip(ms.sk, ms.ku):
        if np.isfinite(sk) and np.isfinite(ku):
            regions.append(classify_region(sk, ku, cfg.analysis.cl, n))
            jb.append(jarque_bera(sk, ku, r.n_obs))
        else:
            regions.append(None)
            jb.append(float("nan"))
    out = _out_dir(cfg)
    odaa_io.write_moments_csv(out / "moments.csv", ms, annual=ann, regions=regions, jb=jb)
    crit = jb_critical_value(0.95)
    results = {
        "n_obs": r.n_obs,
        "labels": list(ms.labels),
        "regions": [None if rc is None else rc.region for rc in regions],
        "jarque_bera": jb,
        "jb_critical_95": crit,
        "gaussian_rejected": [None if not np.isfinite(j) else bool(j > crit) for j in jb],
        "files": ["moments.csv"],
    }
    odaa_io.write_json(out / "analyze_summary.json", _summary("analyze", cfg, results, t0))
    for lab, rc, j in zip(ms.labels, regions, jb):
        reg = "undefined (zero variance)" if rc is None else f"region {rc.region} ({rc.description})"
        print(f"{lab}: {reg}, JB={j:.4g}")
    return results


def cmd_fit(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    if cfg.fit_target:
        target = odaa_io.read_moments_csv(cfg.fit_target)
        ppy = target.periods_per_year or cfg.data.periods_per_year
    else:
        r = _returns(cfg)
        target = compute_moments(r)
        ppy = r.periods_per_year
    model, err = fit_moment_matching(target, cfg.fit)
    out = _out_dir(cfg)
    odaa_io.save_model(out / "model.json", model, ppy)
    fitted = mixture_moments(model, ppy)
    results = {"fit_error": err, "model_file": "model.json", "fitted_er": fitted.er, "fitted_sd": fitted.sd,
               "fitted_sk": fitted.sk, "fitted_ku": fitted.ku}
    odaa_io.write_json(out / "fit_summary.json", _summary("fit", cfg, results, t0))
    print(f"fit_error={err:.6g} -> {out / 'model.json'}")
    return results


def cmd_solve(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    mm = _model(cfg)
    ts = cfg.target_sequence()
    cs = cfg.constraints()

    def progress(k):
        logger.info("stage %d solved", k)

    sol = solve(ts, cs, mm, cfg.x0, cfg.solver, progress=progress)
    out = _out_dir(cfg)
    odaa_io.write_policy(out, sol.policy, sol.values)
    grid = sol.policy.grid
    u0 = sol.info["x0_allocation"]
    results = {
        "p_star": sol.p_star,
        "stage0_allocation": u0,
        "labels": list(mm.labels),
        "sigma_max_per_period": cs.sigma_max,
        "grid": {"x_lo": grid.x_lo, "log_step": grid.log_step, "size": grid.size, "x_hi": grid.x_hi},
        "kernel_halfwidth": sol.info["kernel_halfwidth"],
        "fft_length": sol.info["fft_length"],
    }
    odaa_io.write_json(out / "solve_summary.json", _summary("solve", cfg, results, t0))
    print(f"p_star={sol.p_star:.6f}  stage-0 allocation at x0={cfg.x0}: "
          + ", ".join(f"{lab}={w:.3f}" for lab, w in zip(mm.labels, u0)))
    return results


def _load_solution(out: Path, horizon: int) -> tuple[dict, PolicyMap]:
    summary = odaa_io.read_json(out / "solve_summary.json")
    g = summary["results"]["grid"]
    grid = StateGrid(g["x_lo"], g["log_step"], g["size"])
    return summary, odaa_io.read_policy(out, grid, horizon)


def cmd_simulate(cfg: RunConfig, static: Optional[Sequence[float]] = None) -> dict:
    t0 = time.perf_counter()
    mm = _model(cfg)
    ts = cfg.target_sequence()
    out = _out_dir(cfg)
    mc = cfg.monte_carlo
    if static is not None:
        policy = np.asarray(static, dtype=float)
        source = {"static": policy.tolist()}
    else:
        _, policy = _load_solution(out, ts.horizon)
        source = {"policy": "policy/"}
    res = simulate(policy, mm, ts, cfg.x0, mc.n_paths, mc.seed, threads=cfg.solver.threads,
                   block_size=mc.block_size)
    hist = res.histogram(mc.histogram_bins, mc.histogram_range)
    odaa_io.write_histogram_csv(out / "histogram.csv", hist)
    lo, hi = res.ci95
    results = {**source, "n_paths": res.n_paths, "success_count": res.success_count,
               "probability": res.probability, "std_error": res.std_error, "ci95": [lo, hi],
               "seed": mc.seed, "block_size": mc.block_size}
    odaa_io.write_json(out / "simulate_summary.json", _summary("simulate", cfg, results, t0))
    print(f"probability={res.probability:.6f}  95% CI [{lo:.6f}, {hi:.6f}]  ({res.success_count}/{res.n_paths})")
    return results


def cmd_frontier(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    mm = _model(cfg)
    ts = cfg.target_sequence()
    fc = cfg.frontier
    if fc.moments:
        ms = odaa_io.read_moments_csv(fc.moments, annualized=fc.annualized)
    else:
        ms = mixture_moments(mm, cfg.data.periods_per_year)
        if fc.annualized:
            ms = annualize(ms, cfg.data.periods_per_year)
    if list(ms.labels) != list(mm.labels):
        raise InputError(f"frontier moments labels {list(ms.labels)} differ from model labels {list(mm.labels)}")
    cs = cfg.constraints(annual=fc.annualized)
    frontier = efficient_frontier(ms.er, ms.cov, cs, fc.n_points)
    sel = select_max_success(frontier, mm, ts, n_paths=fc.n_paths, seed=fc.seed, x0=cfg.x0, mode=fc.mode,
                             block_size=cfg.monte_carlo.block_size)
    out = _out_dir(cfg)
    odaa_io.write_frontier_csv(out / "frontier.csv", frontier, mm.labels, sel.probabilities)
    best = frontier[sel.index]
    results = {"labels": list(mm.labels), "selected_allocation": sel.allocation,
               "selected_target_return": best.target_return, "selected_sd": best.sd,
               "probability": sel.probability, "std_error": sel.std_error, "mode": fc.mode,
               "n_paths": fc.n_paths, "annualized": fc.annualized}
    odaa_io.write_json(out / "frontier_summary.json", _summary("frontier", cfg, results, t0))
    print(f"best frontier portfolio: " + ", ".join(f"{lab}={w:.3f}" for lab, w in zip(mm.labels, sel.allocation))
          + f"  success probability={sel.probability:.4f} (se {sel.std_error:.4f})")
    return results


def cmd_compare(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg.output)
    missing = [f for f in ("solve_summary.json", "frontier_summary.json") if not (out / f).is_file()]
    if missing:
        raise InputError(f"missing {missing} in {out}; run 'solve' and 'frontier' first")
    solved = odaa_io.read_json(out / "solve_summary.json")["results"]
    front = odaa_io.read_json(out / "frontier_summary.json")["results"]
    p_dyn = float(solved["p_star"])
    p_static = float(front["probability"])
    results = {"p_star": p_dyn, "markowitz_probability": p_static,
               "differential_pp": 100.0 * (p_dyn - p_static),
               "markowitz_allocation": front["selected_allocation"], "stage0_allocation": solved["stage0_allocation"],
               "labels": solved["labels"]}
    sim = out / "simulate_summary.json"
    if sim.is_file():
        s = odaa_io.read_json(sim)["results"]
        if "policy" in s:
            results["simulated_probability"] = s["probability"]
            results["simulated_std_error"] = s["std_error"]
    odaa_io.write_json(out / "compare_summary.json", _summary("compare", cfg, results, t0))
    print(f"ODAA p*={p_dyn:.4f}  Markowitz={p_static:.4f}  differential={results['differential_pp']:.2f} pp")
    return results


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration (or a *_summary.json)")
    common.add_argument("--seed", type=int, help="override monte_carlo.seed, frontier.seed and fit.seed")
    common.add_argument("--out", help="output directory (overrides 'output')")
    common.add_argument("--threads", type=int, help="worker threads for the solver and simulation")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = argparse.ArgumentParser(prog="odaa", description="Probability-of-success portfolio allocation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=(globals()[f"cmd_{name}"].__doc__ or "").strip() or None)
        if name == "simulate":
            sp.add_argument("--static", help="comma-separated static allocation instead of the solved policy")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.monte_carlo.seed = args.seed
        cfg.frontier.seed = args.seed
        cfg.fit.seed = args.seed
    if args.out is not None:
        cfg.output = str(Path(args.out).resolve())
    if args.threads is not None:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        cfg.solver.threads = args.threads
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "simulate":
            static = None
            if args.static:
                try:
                    static = [float(v) for v in args.static.split(",")]
                except ValueError:
                    raise InputError(f"--static: '{args.static}' is not a comma-separated list of numbers") from None
            cmd_simulate(cfg, static)
        else:
            globals()[f"cmd_{args.command}"](cfg)
    except OdaaError as exc:
        print(f"odaa {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"odaa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
