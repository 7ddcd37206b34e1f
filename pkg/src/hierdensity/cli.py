"""Command-line harness: sample, estimate, evaluate, benchmark, rank-sweep.

Exit codes: 0 on success, 2 on configuration errors (including incompatible
input files), 3 when a dense object would exceed its capacity cap, 1 on
other failures such as unreadable files.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, stream_seed
from .errors import CapacityError, ConfigError, HierDensityError
from .estimator import fit
from .models import DEFAULT_MAX_SITES, IsingSpec, dense_density, sample_exact, sample_gibbs
from .network import evaluate, load, norm, relative_error, save, total_mass
from .sketch import SampleSet, build_bases, estimate_moments, moments_from_density

logger = logging.getLogger("hierdensity")

BENCHMARK_COLUMNS = ["model", "beta", "d", "N", "seed", "rep", "ranks", "eps_p", "eps_approx",
                     "wall_ms", "config_hash"]
SWEEP_COLUMNS = ["model", "beta", "level", "rank", "N", "seed", "rep", "eps_p", "eps_approx",
                 "config_hash"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(rows: list[dict], columns: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_csv(rows, columns))
    return path


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def draw_samples(cfg: RunConfig, spec: IsingSpec, N: int, seed: int, rep: int = 0,
                 p: np.ndarray | None = None) -> SampleSet:
    exp = cfg.experiment
    sampler = exp["sampler"]
    if sampler == "auto":
        sampler = "exact" if spec.d <= DEFAULT_MAX_SITES else "gibbs"
    rng_seed = stream_seed(seed, rep)
    if sampler == "exact":
        s = sample_exact(spec, N, rng_seed, p=p)
    else:
        s = sample_gibbs(spec, N, rng_seed, burn_in=exp["burn_in"], thin=exp["thin"])
    s.meta.update(seed=seed, rep=rep)
    return s


def _runs(cfg: RunConfig) -> list[tuple[int, int, int]]:
    exp = cfg.experiment
    return sorted((N, s, k) for N in exp["N"] for s in exp["seeds"]
                  for k in range(exp["repetitions"]))


def run_benchmark(cfg: RunConfig, threads: int = 1) -> list[dict]:
    """One row per ``(beta, N, seed, repetition)`` with both error metrics."""
    base = cfg.model
    tree, sched, tol = cfg.tree, cfg.ranks, cfg.pinv_tol
    bases = build_bases(tree, cfg.sketch_config(base))
    digest = cfg.hash()
    rows = []
    for beta in sorted(cfg.betas):
        spec = base.with_beta(beta)
        p = dense_density(spec)
        net_exact, _ = fit(tree, moments_from_density(tree, p, bases), sched, rel_tol=tol)
        eps_approx = relative_error(net_exact, p)

        def one(key, spec=spec, p=p, eps_approx=eps_approx):
            N, seed, rep = key
            samples = draw_samples(cfg, spec, N, seed, rep, p)
            t0 = time.perf_counter()
            net, _ = fit(tree, estimate_moments(tree, samples, bases), sched, rel_tol=tol)
            wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
            return {"model": spec.name, "beta": beta, "d": spec.d, "N": N, "seed": seed,
                    "rep": rep, "ranks": sched.describe(), "eps_p": relative_error(net, p),
                    "eps_approx": eps_approx, "wall_ms": round(wall, 3),
                    "config_hash": digest}

        rows.extend(_map(one, _runs(cfg), threads))
        logger.info("benchmark %s done", spec.name + f" beta={beta}")
    rows.sort(key=lambda r: (r["beta"], r["N"], r["seed"], r["rep"]))
    return rows


def run_rank_sweep(cfg: RunConfig, threads: int = 1) -> list[dict]:
    """``eps_p`` and ``eps_approx`` over the sweep ranks at ``experiment.sweep_level``."""
    base = cfg.model
    tree, tol = cfg.tree, cfg.pinv_tol
    level = cfg.experiment["sweep_level"]
    scheds = [(r, cfg.ranks.with_level(level, r, tree.L)) for r in cfg.experiment["sweep_ranks"]]
    bases = build_bases(tree, cfg.sketch_config(base))
    digest = cfg.hash()
    rows = []
    for beta in sorted(cfg.betas):
        spec = base.with_beta(beta)
        p = dense_density(spec)
        exact = moments_from_density(tree, p, bases)
        approx = {r: relative_error(fit(tree, exact, s, rel_tol=tol)[0], p) for r, s in scheds}

        def one(key, spec=spec, p=p, approx=approx):
            N, seed, rep = key
            m = estimate_moments(tree, draw_samples(cfg, spec, N, seed, rep, p), bases)
            return [{"model": spec.name, "beta": beta, "level": level, "rank": r, "N": N,
                     "seed": seed, "rep": rep,
                     "eps_p": relative_error(fit(tree, m, s, rel_tol=tol)[0], p),
                     "eps_approx": approx[r], "config_hash": digest} for r, s in scheds]

        for chunk in _map(one, _runs(cfg), threads):
            rows.extend(chunk)
    rows.sort(key=lambda r: (r["beta"], r["rank"], r["N"], r["seed"], r["rep"]))
    return rows


def _sample_path(out: Path, spec: IsingSpec, N: int, seed: int, rep: int) -> Path:
    tag = f"_rep{rep}" if rep else ""
    return out / "samples" / f"{spec.name}_beta{spec.beta:g}_N{N}_seed{seed}{tag}.csv"


def cmd_sample(cfg: RunConfig, args) -> int:
    base = cfg.model
    p_cache = {}
    for beta in sorted(cfg.betas):
        spec = base.with_beta(beta)
        if spec.d <= DEFAULT_MAX_SITES and cfg.experiment["sampler"] != "gibbs":
            p_cache[beta] = dense_density(spec)
        for N, seed, rep in _runs(cfg):
            s = draw_samples(cfg, spec, N, seed, rep, p_cache.get(beta))
            path = _sample_path(cfg.output_dir, spec, N, seed, rep)
            path.parent.mkdir(parents=True, exist_ok=True)
            s.write_csv(path)
            print(path)
    return 0


def cmd_estimate(cfg: RunConfig, args) -> int:
    samples = SampleSet.read_csv(args.samples)
    tree = cfg.tree
    if samples.d != tree.d or samples.n != tree.n:
        raise ConfigError(f"{args.samples}: samples have d={samples.d}, n={samples.n} but the "
                          f"config expects d={tree.d}, n={tree.n}")
    bases = build_bases(tree, cfg.sketch_config())
    moments = estimate_moments(tree, samples, bases)
    net, report = fit(tree, moments, cfg.ranks, rel_tol=cfg.pinv_tol, threads=args.threads)
    net.meta.update(config_hash=cfg.hash(), samples=str(args.samples))
    out = Path(args.out) if args.out else cfg.output_dir / "network.htnw"
    out.parent.mkdir(parents=True, exist_ok=True)
    save(net, out)
    rows = []
    for nd in tree.nodes:
        row = report.nodes[nd].row() if nd in report.nodes else {"node": str(nd)}
        row.update(level=nd.level, index=nd.index, rank=net.rank(nd),
                   S_width=bases[nd, "S"].width if (nd, "S") in bases else 0,
                   T_width=bases[nd, "T"].width)
        rows.append(row)
    cols = ["node", "level", "index", "S_width", "T_width", "rank", "rank_left", "rank_right",
            "sigma_ratio_left", "sigma_ratio_right", "residual", "near_singular"]
    for r in rows:
        for c in cols:
            r.setdefault(c, "")
    report_path = write_csv(rows, cols, out.with_suffix(".report.csv"))
    print(out)
    print(report_path)
    return 0


def cmd_evaluate(cfg: RunConfig | None, args) -> int:
    net = load(args.network)
    lines = [f"n_params,{net.n_params()}", f"total_mass,{total_mass(net)!r}",
             f"norm,{norm(net)!r}"]
    if cfg is not None:
        spec = cfg.model
        if spec.d != net.tree.d:
            raise ConfigError(f"network has d={net.tree.d}, config model has d={spec.d}")
        lines.append(f"eps_p,{relative_error(net, dense_density(spec))!r}")
    out = "\n".join(lines) + "\n"
    if args.samples:
        s = SampleSet.read_csv(args.samples)
        if s.d != net.tree.d:
            raise ConfigError(f"{args.samples}: d={s.d} does not match network d={net.tree.d}")
        vals = np.atleast_1d(evaluate(net, s.values))
        out += "row,value\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(vals))
    sys.stdout.write(out)
    return 0


def cmd_benchmark(cfg: RunConfig, args) -> int:
    rows = run_benchmark(cfg, args.threads)
    print(write_csv(rows, BENCHMARK_COLUMNS, args.out or cfg.output_dir / "benchmark.csv"))
    return 0


def cmd_rank_sweep(cfg: RunConfig, args) -> int:
    rows = run_rank_sweep(cfg, args.threads)
    print(write_csv(rows, SWEEP_COLUMNS, args.out or cfg.output_dir / "rank_sweep.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierdensity",
                                     description="Hierarchical tensor-network density estimation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. estimator.ranks=[2,16]")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--seed", type=int, help="replace the config's seed list")
    common.add_argument("--no-timing", action="store_true", help="write wall_ms as 0")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("sample", parents=[common], help="write sample CSV files")
    p = sub.add_parser("estimate", parents=[common], help="fit a network to a sample file")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", help="network output path")
    p = sub.add_parser("evaluate", parents=[common], help="inspect a saved network")
    p.add_argument("--network", required=True)
    p.add_argument("--samples", help="evaluate the network at these configurations")
    for name, text in (("benchmark", "error of fitted networks across beta, N and seeds"),
                       ("rank-sweep", "error across ranks of one tree level")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--out", help="CSV output path")
    return parser


_COMMANDS = {"sample": cmd_sample, "estimate": cmd_estimate, "evaluate": cmd_evaluate,
             "benchmark": cmd_benchmark, "rank-sweep": cmd_rank_sweep}


def load_config(args) -> RunConfig | None:
    if args.command == "evaluate" and not args.config and not args.set:
        return None
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.no_timing:
        cfg = cfg.with_overrides(["output.timing=false"])
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return _COMMANDS[args.command](load_config(args), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    except BrokenPipeError:
        return 0
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except HierDensityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
