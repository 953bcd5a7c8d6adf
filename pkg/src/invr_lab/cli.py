"""Command line entry point: ``invr-lab <command> [--config F] [--variant V] [--seed S] [--out D]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

Layout of a run directory (``--out``)::

    <out>/<VARIANT>/seed_<k>/run_info.csv   world seed, horizon, sizes
                             report.csv     absolute metrics, one row
                             ticks.csv      per-tick counters, PSEI and its EWMA
                             logs.csv       every slate position served
                             ledger.csv     per-item exposure ledger
                             assignments.csv  InvR batches (treated variants)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .embedding import save_table
from .errors import ConfigParse, InvalidConfig, InvrLabError, MismatchedRuns, UnknownVariant
from .invr import write_assignments_csv
from .metrics import ewma, read_report_csv, write_report_csv
from .sim.harness import PSEI_EWMA_ALPHA, VARIANT_NAMES, Simulation, VariantSpec, run_variant, warm_up
from .sim.world import generate_world, write_world_csv

log = logging.getLogger("invr_lab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RUN_INFO_KEYS = ("variant", "sim_seed", "world_seed", "ticks", "n_users", "n_items", "min_exposure")
TICK_COLUMNS = ("tick", "visits", "visible", "clicks", "invr_visible", "invr_clicks", "active_treated",
                "psei", "psei_ewma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="invr-lab", description="Inverse-retrieval long-tail exposure experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, variant=False):
        p.add_argument("--config", help="JSON configuration file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the simulation seed (world seed for generate)")
        p.add_argument("--out", help="output directory (default: out_dir from the config)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if variant:
            p.add_argument("--variant", help="run one variant instead of every configured one")
        return p

    common(sub.add_parser("generate", help="write a world snapshot"))
    common(sub.add_parser("train", help="run the warm-up and write the trained item embeddings"))
    common(sub.add_parser("run", help="simulate one or all variants"), variant=True)
    rep = sub.add_parser("report", help="relative-change table and PSEI series from run directories")
    rep.add_argument("runs", nargs="+", help="run directories (variant, seed or sweep level)")
    rep.add_argument("--out", required=True)
    rep.add_argument("--baseline", default="BASELINE")
    rep.add_argument("-v", "--verbose", action="store_true")
    pc = sub.add_parser("print-config", help="print the effective configuration as JSON")
    pc.add_argument("--config")
    pc.add_argument("--seed", type=int)
    pc.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if args.out else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(x) if isinstance(x, float) else x


# -- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, world=dataclasses.replace(cfg.world, seed=args.seed))
    cfg.validate()
    out = _out_dir(args, cfg)
    world = generate_world(cfg.world)
    write_world_csv(world, out / "world")
    log.info("world written to %s", out / "world")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    world = generate_world(cfg.world)
    for seed in cfg.seeds:
        simulation = Simulation(world, cfg.sim, cfg.slate, cfg.invr, cfg.train, sim_seed=seed)
        warm = warm_up(world, simulation, keep_log=False)
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        save_table(d / "item_embeddings.txt", warm.table)
        _write_rows(d / "cohort.csv", ["item_id", "publisher"],
                    [(int(i), int(world.item_publisher[i])) for i in warm.cohort])
        _write_rows(d / "eligible_users.csv", ["user_id"], [(int(u),) for u in warm.eligible_users])
        log.info("seed %d: %d treated items, %d eligible users", seed, len(warm.cohort), len(warm.eligible_users))
    return EXIT_OK


def write_run(directory: Path, result, cfg, world_seed: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    state = result.state
    info = {
        "variant": result.variant,
        "sim_seed": result.sim_seed,
        "world_seed": world_seed,
        "ticks": cfg.world.ticks,
        "n_users": cfg.world.n_users,
        "n_items": cfg.world.n_items,
        "min_exposure": cfg.invr.min_exposure,
    }
    _write_rows(directory / "run_info.csv", ["key", "value"], [(k, info[k]) for k in RUN_INFO_KEYS])
    write_report_csv(directory / "report.csv", [result.report], baseline=result.variant, invr_reference=None)
    rows = []
    smooth = result.psei_ewma
    for k, t in enumerate(state.tick_stats):
        row = dict(t, psei_ewma=smooth[k] if k < len(smooth) else float("nan"))
        rows.append([_fmt(row[c]) for c in TICK_COLUMNS])
    _write_rows(directory / "ticks.csv", TICK_COLUMNS, rows)
    state.log.write_csv(directory / "logs.csv")
    state.ledger.write_csv(directory / "ledger.csv")
    mode = VariantSpec(result.variant).invr_config(cfg.invr).ordering_mode if result.variant != "BASELINE" \
        else cfg.invr.ordering_mode
    write_assignments_csv(directory / "assignments.csv", state.assignments, mode)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    variants = [cfg.variant(args.variant)] if args.variant else list(cfg.variants)
    out = _out_dir(args, cfg)
    world = generate_world(cfg.world)
    for seed in cfg.seeds:
        simulation = Simulation(world, cfg.sim, cfg.slate, cfg.invr, cfg.train, sim_seed=seed)
        warm = warm_up(world, simulation, keep_log=False)
        for v in variants:
            res = run_variant(simulation, warm, v, keep_log=True, keep_state=True, record_assignments=True)
            write_run(out / v.name / f"seed_{seed}", res, cfg, cfg.world.seed)
            r = res.report
            log.info("seed %d %-15s b50ps=%.4f psei=%.3f t1ps=%.4f", seed, v.name, r.b50ps, r.psei, r.t1ps)
    return EXIT_OK


def _read_info(path: Path) -> dict:
    with open(path, newline="") as fh:
        return {row["key"]: row["value"] for row in csv.DictReader(fh)}


def find_runs(paths) -> list[Path]:
    """Every directory holding a ``run_info.csv`` under the given paths, in path order."""
    found = []
    for p in paths:
        p = Path(p)
        if (p / "run_info.csv").is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("run_info.csv")))
        else:
            raise FileNotFoundError(f"no run directory at {p}")
    return found


def collect_runs(paths, baseline: str = "BASELINE"):
    """Load reports and PSEI series; raises MismatchedRuns on incompatible runs."""
    runs = find_runs(paths)
    if not runs:
        raise MismatchedRuns("no runs found")
    infos = [_read_info(r / "run_info.csv") for r in runs]
    shared = ("world_seed", "ticks", "n_users", "n_items")
    for key in shared:
        values = {i[key] for i in infos}
        if len(values) > 1:
            raise MismatchedRuns(f"runs disagree on {key}: {sorted(values)}")
    reports, series = [], []
    for run, info in zip(runs, infos):
        (rep,) = read_report_csv(run / "report.csv")
        reports.append(rep)
        with open(run / "ticks.csv", newline="") as fh:
            psei = [float(row["psei"]) for row in csv.DictReader(fh)]
        series.append((rep.seed, rep.variant, psei))
    for seed in sorted({r.seed for r in reports}):
        if not any(r.seed == seed and r.variant == baseline for r in reports):
            raise MismatchedRuns(f"seed {seed} has no {baseline!r} run")
    rank = {name: k for k, name in enumerate(VARIANT_NAMES)}
    order = sorted(range(len(reports)), key=lambda k: (reports[k].seed, rank.get(reports[k].variant, len(rank))))
    return [reports[k] for k in order], [series[k] for k in order]


def cmd_report(args) -> int:
    reports, series = collect_runs(args.runs, args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", reports, baseline=args.baseline)
    rows = []
    for seed, variant, psei in series:
        smooth = ewma(psei, PSEI_EWMA_ALPHA) if psei else []
        rows.extend((seed, variant, t, repr(x), repr(s)) for t, (x, s) in enumerate(zip(psei, smooth)))
    _write_rows(out / "psei_series.csv", ["seed", "variant", "tick", "psei", "psei_ewma"], rows)
    return EXIT_OK


def cmd_print_config(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(cfgmod.dumps(cfg))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "run": cmd_run,
    "report": cmd_report,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"invr-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigParse as exc:
        where = f" (key: {exc.key})" if exc.key else ""
        print(f"invr-lab: config error{where}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidConfig, UnknownVariant) as exc:
        print(f"invr-lab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvrLabError, OSError) as exc:
        print(f"invr-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
