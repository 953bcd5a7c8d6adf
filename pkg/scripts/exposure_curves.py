"""Write per-tick PSEI curves and final Lorenz curves for every variant.

    python scripts/exposure_curves.py [--config cfg.json] [--seed 0] [--out runs/curves]

Produces ``psei.csv`` (variant, tick, psei, psei_ewma) and ``lorenz.csv``
(variant, population_share, exposure_share) for one sim seed.
"""

import argparse
import csv
import time
from pathlib import Path

from invr_lab import config as cfgmod
from invr_lab.metrics import b50ps, lorenz_curve
from invr_lab.sim import Simulation, generate_world, run_variant, warm_up


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/curves")
    args = ap.parse_args()

    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    world = generate_world(cfg.world)
    simulation = Simulation(world, cfg.sim, cfg.slate, cfg.invr, cfg.train, sim_seed=seed)
    warm = warm_up(world, simulation, keep_log=False)
    psei_rows, lorenz_rows = [], []
    for v in cfg.variants:
        res = run_variant(simulation, warm, v, keep_state=True)
        psei_rows += [(v.name, t, repr(x), repr(s)) for t, (x, s) in enumerate(zip(res.psei_series, res.psei_ewma))]
        exposures = res.state.ledger.visible
        lorenz_rows += [(v.name, repr(x), repr(y)) for x, y in lorenz_curve(exposures)]
        print(f"{v.name:<15} final psei={res.psei_series[-1]:.3f} b50ps={b50ps(exposures):.4f} "
              f"({time.time() - t0:.0f}s)", flush=True)

    for name, header, rows in (("psei.csv", ("variant", "tick", "psei", "psei_ewma"), psei_rows),
                               ("lorenz.csv", ("variant", "population_share", "exposure_share"), lorenz_rows)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    print(f"wrote {out / 'psei.csv'} and {out / 'lorenz.csv'}")


if __name__ == "__main__":
    main()
