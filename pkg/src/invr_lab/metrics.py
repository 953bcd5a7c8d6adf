"""Exposure-inequality and click metrics.

Share metrics read the Lorenz curve of per-item visible impressions, items
sorted from least to most exposed. Items with zero exposure stay in the
population: they are exactly the ones long-tail treatment is about.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyTreatedSet, InvalidAlpha, MismatchedRuns, ZeroBaseline, ZeroTotalExposure
from .records import SOURCE_CODES, InteractionRecord, Source


def _counts(dist) -> tuple[np.ndarray, list | None]:
    """Accept a mapping id->count, a list of (id, count) pairs, or bare counts."""
    if isinstance(dist, Mapping):
        ids, counts = list(dist), [dist[k] for k in dist]
    elif isinstance(dist, np.ndarray):
        return np.asarray(dist), None
    else:
        dist = list(dist)
        if dist and isinstance(dist[0], (tuple, list)):
            ids, counts = [d[0] for d in dist], [d[1] for d in dist]
        else:
            return np.asarray(dist), None
    return np.asarray(counts), ids


def _sorted_counts(dist) -> np.ndarray:
    counts, ids = _counts(dist)
    if counts.size == 0 or np.any(counts < 0):
        raise ValueError("exposure counts must be non-empty and non-negative")
    if ids is None:
        order = np.argsort(counts, kind="stable")
    else:
        order = sorted(range(len(ids)), key=lambda k: (counts[k], ids[k]))
    ordered = counts[order]
    if not ordered.sum() > 0:
        raise ZeroTotalExposure("total exposure must be positive")
    return ordered


def _sorted_cumulative(dist):
    ordered = _sorted_counts(dist)
    if np.issubdtype(ordered.dtype, np.integer):
        cum = np.concatenate([[0], np.cumsum(ordered, dtype=np.int64)])
    else:
        cum = np.concatenate([[0.0], np.cumsum(ordered, dtype=np.float64)])
    return cum


def lorenz_curve(dist) -> list[tuple[float, float]]:
    cum = _sorted_cumulative(dist)
    n = len(cum) - 1
    total = cum[-1]
    return [(k / n, float(cum[k] / total)) for k in range(n + 1)]


def bottom_share(dist, p: float) -> float:
    """Exposure share of the least-exposed ``p`` fraction, interpolated linearly."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    cum = _sorted_cumulative(dist)
    n = len(cum) - 1
    x = p * n
    k = min(int(math.floor(x)), n)
    frac = x - k
    value = float(cum[k])
    if frac > 0:
        value += frac * float(cum[k + 1] - cum[k])
    return value / float(cum[-1])


def top_share(dist, p: float) -> float:
    return 1.0 - bottom_share(dist, 1.0 - p)


def b50ps(dist) -> float:
    return bottom_share(dist, 0.5)


def t1ps(dist) -> float:
    return top_share(dist, 0.01)


def gini(dist) -> float:
    """One minus twice the trapezoid area under the Lorenz curve.

    Computed in the rank-weighted form sum((2i - n - 1) x_i) / (n sum(x)).
    The weights sum to zero, so shifting by the smallest count changes
    nothing and makes any uniform input come out as exactly 0.
    """
    x = _sorted_counts(dist)
    n = len(x)
    w = 2 * np.arange(1, n + 1, dtype=np.int64) - n - 1
    if np.issubdtype(x.dtype, np.integer):
        num = float(np.dot(w, (x - x[0]).astype(np.int64)))
    else:
        num = float(np.dot(w.astype(np.float64), x - x[0]))
    return num / (n * float(x.sum()))


def psei(treated_items: Iterable, ledger) -> float:
    """Fraction of treated items whose visible impressions reached the minimum exposure."""
    treated = list(treated_items)
    if not treated:
        raise EmptyTreatedSet("PSEI needs at least one treated item")
    rows = [ledger.row(i) for i in treated]
    return float(np.mean(ledger.visible[rows] >= ledger.min_exposure))


def psei_counts(visible: np.ndarray, min_exposure: int) -> float:
    if len(visible) == 0:
        raise EmptyTreatedSet("PSEI needs at least one treated item")
    return float(np.mean(np.asarray(visible) >= min_exposure))


@dataclass(frozen=True)
class CohortStats:
    ctr: float
    clicks_per_user: float
    n_users: int
    empty: bool


def _columns(log):
    if hasattr(log, "columns"):
        return log.columns()
    if isinstance(log, Mapping):
        return log
    recs: list[InteractionRecord] = list(log)
    return {
        "user_id": np.array([r.user_id for r in recs], dtype=np.int64),
        "visible": np.array([r.visible for r in recs], dtype=bool),
        "clicked": np.array([r.clicked for r in recs], dtype=bool),
        "source": np.array([SOURCE_CODES[Source(r.source)] for r in recs], dtype=np.int8),
    }


def cohort_ctr_clicks(log, source_filter: Source | None = None, users: Iterable | None = None) -> CohortStats:
    """Per-user macro CTR and clicks per user over visible impressions.

    Users with no visible impression after filtering are left out of both means.
    """
    cols = _columns(log)
    user = np.asarray(cols["user_id"], dtype=np.int64)
    mask = np.asarray(cols["visible"], dtype=bool).copy()
    if source_filter is not None:
        mask &= np.asarray(cols["source"]) == SOURCE_CODES[Source(source_filter)]
    if users is not None:
        mask &= np.isin(user, np.fromiter(users, dtype=np.int64))
    if not mask.any():
        return CohortStats(0.0, 0.0, 0, True)
    u = user[mask]
    c = np.asarray(cols["clicked"], dtype=bool)[mask]
    uniq, inv = np.unique(u, return_inverse=True)
    imps = np.bincount(inv)
    clicks = np.bincount(inv, weights=c)
    return CohortStats(float(np.mean(clicks / imps)), float(clicks.sum() / len(uniq)), len(uniq), False)


def ewma(series: Sequence[float], alpha: float = 0.125) -> list[float]:
    if not 0 < alpha <= 1:
        raise InvalidAlpha(f"alpha must lie in (0, 1], got {alpha}")
    series = list(series)
    if not series:
        raise ValueError("ewma needs a non-empty series")
    out = [float(series[0])]
    for x in series[1:]:
        out.append(alpha * float(x) + (1 - alpha) * out[-1])
    return out


def relative_change(variant_value: float, baseline_value: float) -> float:
    """Signed percentage change of ``variant_value`` against ``baseline_value``."""
    if baseline_value == 0:
        raise ZeroBaseline("relative change against a zero baseline is undefined")
    return 100.0 * (variant_value - baseline_value) / baseline_value


def relative_or_none(variant_value: float, baseline_value: float) -> float | None:
    """Report-friendly relative change: identical values give 0, zero baselines None."""
    if variant_value == baseline_value:
        return 0.0
    if baseline_value == 0 or not math.isfinite(baseline_value) or not math.isfinite(variant_value):
        return None
    return relative_change(variant_value, baseline_value)


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    variant: str
    b50ps: float
    psei: float
    t1ps: float
    gini: float
    ctr_invr: float
    clicks_invr: float
    ctr_overall: float
    clicks_overall: float
    unique_items_organic: int = 0
    invr_share_of_min_exposure: float = float("nan")
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


# Table layout: fairness columns against the baseline, InvR click columns
# against the random-targeting ablation (the baseline has no InvR slots).
FAIRNESS_COLUMNS = ("b50ps", "psei", "t1ps")
INVR_COLUMNS = ("ctr_invr", "clicks_invr")
OVERALL_COLUMNS = ("ctr_overall", "clicks_overall", "gini")


def relative_table(reports: Sequence[MetricReport], baseline: str = "BASELINE",
                   invr_reference: str | None = "RANDOM") -> list[dict]:
    by_name = {}
    for r in reports:
        by_name.setdefault(r.variant, r)
    if baseline not in by_name:
        raise MismatchedRuns(f"no {baseline!r} run among {sorted(by_name)}")
    base = by_name[baseline]
    ref = by_name.get(invr_reference) if invr_reference else None
    rows = []
    for r in reports:
        row = {"variant": r.variant}
        for col in FAIRNESS_COLUMNS + OVERALL_COLUMNS:
            row[col] = relative_or_none(getattr(r, col), getattr(base, col))
        for col in INVR_COLUMNS:
            if r.variant == baseline:
                row[col] = relative_or_none(getattr(r, col), getattr(base, col))
            elif ref is None:
                row[col] = None
            else:
                row[col] = relative_or_none(getattr(r, col), getattr(ref, col))
        rows.append(row)
    return rows


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_report_csv(path, reports: Sequence[MetricReport], baseline: str = "BASELINE",
                     invr_reference: str | None = "RANDOM") -> None:
    """One row per report: absolute values then ``rel_*`` percentage columns.

    Relative changes are taken within each seed, so one file can hold a
    multi-seed sweep.
    """
    abs_cols = [f.name for f in fields(MetricReport) if f.name != "variant"]
    rel_cols = list(FAIRNESS_COLUMNS + INVR_COLUMNS + OVERALL_COLUMNS)
    rel = {}
    for seed in sorted({r.seed for r in reports}):
        group = [k for k, r in enumerate(reports) if r.seed == seed]
        rows = relative_table([reports[k] for k in group], baseline, invr_reference)
        rel.update(zip(group, rows))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + abs_cols + [f"rel_{c}" for c in rel_cols])
        for k, r in enumerate(reports):
            w.writerow([r.variant] + [_fmt(getattr(r, c)) for c in abs_cols]
                       + [_fmt(rel[k][c]) for c in rel_cols])


def read_report_csv(path) -> list[MetricReport]:
    out = []
    types = {f.name: f.type for f in fields(MetricReport)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name, typ in types.items():
                raw = row[name]
                if name == "variant":
                    kw[name] = raw
                elif typ in ("int", int):
                    kw[name] = int(raw)
                else:
                    kw[name] = float(raw)
            out.append(MetricReport(**kw))
    return out
