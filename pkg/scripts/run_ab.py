"""Run the five-variant A/B sweep and print per-seed relative changes.

    python scripts/run_ab.py [--config cfg.json] [--seeds 0 1 2] [--out runs/ab]

Prints, for every seed, the Table-style relative changes against BASELINE
(InvR click columns against RANDOM) and a summary of the ordering relations
the simulator is expected to reproduce.
"""

import argparse
import time
from pathlib import Path

from invr_lab import config as cfgmod
from invr_lab.metrics import relative_table, write_report_csv
from invr_lab.sim import generate_world, run_ab

COLS = ("b50ps", "psei", "t1ps", "ctr_invr", "clicks_invr", "ctr_overall", "clicks_overall")


def fmt(x):
    return "      -" if x is None else f"{x:+7.1f}"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="*")
    ap.add_argument("--out")
    args = ap.parse_args()

    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    seeds = tuple(args.seeds) if args.seeds else cfg.seeds
    t0 = time.time()
    world = generate_world(cfg.world)
    ab = run_ab(world, cfg.variants, seeds, cfg.sim, cfg.slate, cfg.invr, cfg.train,
                progress=lambda s, v, r: print(f"  seed {s} {v:<15} done ({time.time() - t0:.0f}s)", flush=True))

    for seed in ab.seeds():
        reports = ab.reports(seed)
        print(f"\nseed {seed}: relative change, %")
        print(f"{'variant':<15}" + "".join(f"{c:>15}" for c in COLS))
        for row in relative_table(reports):
            print(f"{row['variant']:<15}" + "".join(f"{fmt(row[c]):>15}" for c in COLS))

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv(out / "report.csv", [r.report for r in ab.results])
        print(f"\nreport written to {out / 'report.csv'}")
    print(f"\ntotal {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
