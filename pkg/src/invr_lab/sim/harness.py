"""Tick-by-tick simulation and the multi-variant A/B harness.

A run has two phases. The warm-up (ticks ``-warmup_ticks .. -1``) serves
slates from a popularity-proportional logging policy, produces the first
interaction log, and ends with training the two-tower model and picking the
selected publishers, the eligible users and the treated cohort. The warm-up
depends only on ``(world, sim_seed)`` and is shared by every variant.

The experiment (ticks ``0 .. ticks-1``) serves the popularity-biased baseline
recommender, with InvR items inserted for treated variants. All user-side
randomness (who visits, how far they scroll, the uniform draw behind each
click) comes from a stream keyed on ``(sim_seed, tick)`` only, so variants
differ only through what they recommend.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..embedding import ItemEmbeddingTable, TrainConfig, init_table, pool_histories, train_arrays
from ..errors import InvalidConfig, UnknownVariant
from ..invr import ExposureLedger, InvrConfig, OrderingMode, TickResult, compute_assignment
from ..metrics import MetricReport, b50ps, ewma, gini, psei_counts, t1ps
from ..records import InteractionLog
from .recommender import (
    COLDSTART,
    INVR,
    ORGANIC,
    SlateConfig,
    assemble_slate,
    backfill,
    click_probability,
    recommender_scores,
    sample_scroll_depth,
    top_slates,
)
from .world import (
    PublisherThresholds,
    UserThresholds,
    World,
    publisher_stats,
    select_publishers,
    select_users,
)

log = logging.getLogger(__name__)

VARIANT_NAMES = ("BASELINE", "RANDOM", "INVR_RANDOM", "INVR_SCORE", "INVR_USER_RANK")
VARIANT_MODES = {
    "RANDOM": OrderingMode.RANDOM_USERS,
    "INVR_RANDOM": OrderingMode.INVR_RANDOM,
    "INVR_SCORE": OrderingMode.INVR_SCORE,
    "INVR_USER_RANK": OrderingMode.INVR_USER_RANK,
}
PSEI_EWMA_ALPHA = 0.125


@dataclass(frozen=True)
class VariantSpec:
    name: str
    invr_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise UnknownVariant(f"unknown variant {self.name!r}; expected one of {VARIANT_NAMES}")
        if self.name == "BASELINE" and self.invr_overrides:
            raise InvalidConfig("BASELINE takes no InvR overrides")

    @property
    def uses_invr(self) -> bool:
        return self.name != "BASELINE"

    def invr_config(self, base: InvrConfig) -> InvrConfig:
        overrides = dict(self.invr_overrides)
        overrides["ordering_mode"] = VARIANT_MODES[self.name]
        return replace(base, **overrides)


@dataclass(frozen=True)
class SimConfig:
    popularity_weight: float = 0.6
    click_beta: float = 8.0
    click_bias: float = -4.5
    # warm-up logging policy: Gumbel-top-k on
    # temperature * log(prior) + relevance_weight * <user, item> (ground truth)
    logging_temperature: float = 0.5
    logging_relevance_weight: float = 3.0
    history_max_len: int = 50
    coldstart_rate: float = 0.1
    coldstart_position: int = 3
    coldstart_min_interactions: int = 20
    coldstart_age_limit: int = 10
    feedback_retrain_every: int = 0
    publisher_thresholds: PublisherThresholds = PublisherThresholds()
    user_thresholds: UserThresholds = UserThresholds()

    def validate(self) -> "SimConfig":
        if self.history_max_len < 1:
            raise InvalidConfig("sim.history_max_len must be >= 1")
        if not 0 <= self.coldstart_rate <= 1:
            raise InvalidConfig("sim.coldstart_rate must lie in [0, 1]")
        if self.coldstart_position < 1:
            raise InvalidConfig("sim.coldstart_position must be >= 1")
        if self.feedback_retrain_every < 0:
            raise InvalidConfig("sim.feedback_retrain_every must be >= 0")
        if self.popularity_weight < 0:
            raise InvalidConfig("sim.popularity_weight must be >= 0")
        return self


@dataclass
class SimState:
    """Mutable platform state. ``run_epoch`` advances it in place."""

    hist: np.ndarray            # (n_users, max_len) item ids, -1 padded, oldest first
    hist_len: np.ndarray
    seen: np.ndarray            # (n_users, n_items) visible impressions per pair
    item_clicks: np.ndarray     # lifetime clicks (drives the popularity term)
    item_visible: np.ndarray    # lifetime visible impressions
    visit_counts: np.ndarray    # (n_ticks_so_far, n_users) bool, warm-up only
    table: ItemEmbeddingTable | None = None
    ledger: ExposureLedger | None = None
    selected_publishers: set = field(default_factory=set)
    eligible_users: np.ndarray | None = None
    cohort: np.ndarray | None = None       # treated item ids, fixed at experiment start
    pending: dict = field(default_factory=dict)
    log: InteractionLog | None = None
    user_vis: np.ndarray | None = None
    user_clk: np.ndarray | None = None
    user_vis_invr: np.ndarray | None = None
    user_clk_invr: np.ndarray | None = None
    organic_shown: np.ndarray | None = None
    psei_series: list = field(default_factory=list)
    tick_stats: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    retrain_cursor: int = 0

    def copy(self) -> "SimState":
        return copy.deepcopy(self)


@dataclass
class Simulation:
    world: World
    sim: SimConfig
    slate: SlateConfig
    invr: InvrConfig
    train: TrainConfig
    sim_seed: int = 0

    def crn_stream(self, tick: int) -> np.random.Generator:
        return np.random.default_rng([self.sim_seed, tick + 1_000_000, 1])

    def policy_stream(self, tick: int, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.sim_seed, tick + 1_000_000, salt])


def _new_state(world: World, sim: SimConfig) -> SimState:
    n_u, n_i = world.n_users, world.n_items
    return SimState(
        hist=np.full((n_u, sim.history_max_len), -1, dtype=np.int32),
        hist_len=np.zeros(n_u, dtype=np.int32),
        seen=np.zeros((n_u, n_i), dtype=np.int16),
        item_clicks=np.zeros(n_i, dtype=np.int64),
        item_visible=np.zeros(n_i, dtype=np.int64),
        visit_counts=np.zeros((0, n_u), dtype=bool),
    )


def _append_history(state: SimState, user: int, item: int) -> None:
    n = state.hist_len[user]
    row = state.hist[user]
    if n < len(row):
        row[n] = item
        state.hist_len[user] = n + 1
    else:
        row[:-1] = row[1:]
        row[-1] = item


def cold_start_mask(world: World, state: SimState, sim: SimConfig, tick: int) -> np.ndarray:
    age = tick - world.created_tick
    return (age >= 0) & (age < sim.coldstart_age_limit) & (state.item_visible < sim.coldstart_min_interactions)


def user_vectors(state: SimState, users: np.ndarray, chunk: int = 1024) -> np.ndarray:
    vecs = state.table.vectors
    out = np.empty((len(users), vecs.shape[1]))
    for s in range(0, len(users), chunk):
        sl = users[s:s + chunk]
        out[s:s + chunk] = pool_histories(state.hist[sl], state.hist_len[sl], vecs)
    return out


def _serve(simulation: Simulation, state: SimState, tick: int, users: np.ndarray, slates: np.ndarray,
           sources: np.ndarray, depth: np.ndarray, unif: np.ndarray, experiment: bool):
    """Show slates, sample clicks, update every counter; returns (visible, clicked)."""
    world, sim = simulation.world, simulation.sim
    size = slates.shape[1]
    visible = np.arange(1, size + 1)[None, :] <= depth[users][:, None]
    p = click_probability(world.user_latent[users][:, None, :], world.item_latent[slates],
                          sim.click_beta, sim.click_bias)
    clicked = visible & (unif[users] < p)

    snapshots = state.hist[users].copy() if state.log is not None else None
    u_rep = np.repeat(users, size).reshape(slates.shape)
    np.add.at(state.seen, (u_rep[visible], slates[visible]), 1)
    n_items = world.n_items
    state.item_clicks += np.bincount(slates[clicked], minlength=n_items)
    state.item_visible += np.bincount(slates[visible], minlength=n_items)

    for r in np.flatnonzero(clicked.any(axis=1)):
        u = int(users[r])
        for pos in np.flatnonzero(clicked[r]):
            _append_history(state, u, int(slates[r, pos]))

    if experiment:
        is_invr = sources == INVR
        state.ledger.record_rows(slates.ravel(), visible.ravel(), clicked.ravel(), is_invr.ravel(), tick)
        state.user_vis[users] += visible.sum(axis=1)
        state.user_clk[users] += clicked.sum(axis=1)
        state.user_vis_invr[users] += (visible & is_invr).sum(axis=1)
        state.user_clk_invr[users] += (clicked & is_invr).sum(axis=1)
        state.organic_shown[slates[visible & (sources == ORGANIC)]] = True
        if state.pending:
            shown = visible & is_invr
            for r in np.flatnonzero(shown.any(axis=1)):
                u = int(users[r])
                if u in state.pending:
                    done = set(slates[r][shown[r]].tolist())
                    state.pending[u] = [i for i in state.pending[u] if i not in done]
    if state.log is not None:
        state.log.append_visits(tick, users, slates, visible, clicked, sources, snapshots)
    return visible, clicked


def warm_up(world: World, simulation: Simulation, keep_log: bool = True) -> SimState:
    """Run the logging-policy phase and fit the model; returns the shared pre-experiment state."""
    sim, cfg = simulation.sim.validate(), world.config
    state = _new_state(world, sim)
    state.log = InteractionLog(sim.history_max_len)
    size = simulation.slate.slate_size
    max_imp = simulation.invr.max_impressions_per_user_item
    logits = sim.logging_temperature * np.log(world.popularity_prior)
    visits = []
    for tick in range(-cfg.warmup_ticks, 0):
        rng = simulation.crn_stream(tick)
        visit = rng.random(world.n_users) < world.activity
        depth = sample_scroll_depth(rng, cfg.scroll_continuation, world.n_users)
        unif = rng.random((world.n_users, size))
        users = np.flatnonzero(visit)
        visits.append(visit)
        noise = simulation.policy_stream(tick, 2).gumbel(size=(len(users), world.n_items))
        noise += logits[None, :]
        if sim.logging_relevance_weight:
            noise += sim.logging_relevance_weight * (world.user_latent[users] @ world.item_latent.T)
        eligible = (state.seen[users] < max_imp) & world.available(tick)[None, :]
        slates, n_valid = top_slates(noise, eligible, size)
        if np.any(n_valid < size):
            slates = _backfill_rows(simulation, state, tick, users, slates, n_valid)
        sources = np.full(slates.shape, ORGANIC, dtype=np.int8)
        _serve(simulation, state, tick, users, slates, sources, depth, unif, experiment=False)
    state.visit_counts = np.array(visits)

    # model
    train_cfg = replace(simulation.train, seed=_mix(simulation.train.seed, simulation.sim_seed))
    initial = init_table(list(range(world.n_items)), train_cfg)
    state.table = train_arrays(*training_arrays(state.log), config=train_cfg, initial=initial)

    # eligibility, computed on warm-up statistics
    stats = publisher_stats(world, state.item_visible, state.item_clicks)
    state.selected_publishers = select_publishers(stats, sim.publisher_thresholds)
    ut = sim.user_thresholds
    recent = state.visit_counts[-ut.recent_window:].sum(axis=0)
    state.eligible_users = select_users(state.hist_len, recent, world.consent, ut.min_history_len,
                                        ut.min_recent_visits)
    in_selected = np.isin(world.item_publisher, sorted(state.selected_publishers))
    state.cohort = np.flatnonzero(in_selected)
    if not keep_log:
        state.log = None
    log.info("warm-up done: %d publishers selected, %d treated items, %d eligible users",
             len(state.selected_publishers), len(state.cohort), len(state.eligible_users))
    return state


def _mix(a: int, b: int) -> int:
    return int(np.random.SeedSequence([a, b]).generate_state(1)[0])


def training_arrays(interactions: InteractionLog, start_visit: int = 0):
    """Visible impressions with a non-empty history snapshot, packed for training."""
    cols = interactions.columns()
    histories = interactions.visit_histories()
    visit = cols["visit"]
    keep = cols["visible"] & (visit >= start_visit)
    if len(histories):
        lengths_all = (histories >= 0).sum(axis=1)
        keep &= (visit >= 0) & (lengths_all[np.maximum(visit, 0)] > 0)
    else:
        keep &= False
    v = visit[keep]
    h = histories[v].astype(np.int64)
    return h, (h >= 0).sum(axis=1), cols["item_id"][keep].astype(np.int64), cols["clicked"][keep].astype(np.float64)


def _backfill_rows(simulation, state, tick, users, slates, n_valid):
    world, size = simulation.world, slates.shape[1]
    pool = np.flatnonzero(cold_start_mask(world, state, simulation.sim, tick)).tolist()
    avail = np.flatnonzero(world.available(tick)).tolist()
    out = slates.copy()
    for r in np.flatnonzero(n_valid < size):
        rng = np.random.default_rng([simulation.sim_seed, tick + 1_000_000, 13, int(users[r])])
        out[r] = backfill(slates[r].tolist(), size, [pool, avail], rng)
    return out


def start_experiment(state: SimState, world: World, invr: InvrConfig, keep_log: bool) -> SimState:
    n_u = world.n_users
    state.ledger = ExposureLedger(list(range(world.n_items)), invr.min_exposure)
    state.user_vis = np.zeros(n_u, dtype=np.int64)
    state.user_clk = np.zeros(n_u, dtype=np.int64)
    state.user_vis_invr = np.zeros(n_u, dtype=np.int64)
    state.user_clk_invr = np.zeros(n_u, dtype=np.int64)
    state.organic_shown = np.zeros(world.n_items, dtype=bool)
    state.pending = {}
    state.psei_series = []
    state.tick_stats = []
    state.assignments = []
    if keep_log:
        state.log = InteractionLog(state.hist.shape[1])
        state.retrain_cursor = 0
    else:
        state.log = None
    return state


def invr_batch(simulation: Simulation, state: SimState, invr: InvrConfig, tick: int) -> TickResult:
    """Select treated items and compute this tick's InvR assignment."""
    world = simulation.world
    active = state.ledger.active
    avail = world.available(tick)
    treated = [int(i) for i in state.cohort if active[i] and avail[i]]
    users = state.eligible_users
    users = users[state.hist_len[users] > 0]
    exclude = {}
    if treated and len(users):
        over = state.seen[np.ix_(users, treated)] >= invr.max_impressions_per_user_item
        for j in np.flatnonzero(over.any(axis=0)):
            exclude[treated[j]] = set(users[over[:, j]].tolist())
    if invr.ordering_mode is OrderingMode.RANDOM_USERS:
        return compute_assignment(tick, treated, None, users.tolist(), None, invr, exclude)
    item_vecs = state.table.vectors[treated] if treated else np.zeros((0, state.table.dim))
    return compute_assignment(tick, treated, item_vecs, users.tolist(), user_vectors(state, users), invr, exclude)


def run_epoch(simulation: Simulation, variant: VariantSpec, state: SimState, tick: int,
              record_assignments: bool = False):
    """Advance one experiment tick in place; returns ``(visible, clicked, slates, sources, users)``."""
    world, sim, slate_cfg = simulation.world, simulation.sim, simulation.slate
    size = slate_cfg.slate_size
    invr = variant.invr_config(simulation.invr) if variant.uses_invr else simulation.invr
    max_imp = invr.max_impressions_per_user_item

    rng = simulation.crn_stream(tick)
    visit = rng.random(world.n_users) < world.activity
    depth = sample_scroll_depth(rng, world.config.scroll_continuation, world.n_users)
    unif = rng.random((world.n_users, size))
    cold_coin = rng.random(world.n_users)
    cold_pick = rng.random(world.n_users)
    users = np.flatnonzero(visit)

    if variant.uses_invr and tick % invr.recompute_period == 0:
        result = invr_batch(simulation, state, invr, tick)
        state.pending = {u: list(items) for u, items in result.ordered.items()}
        if record_assignments:
            state.assignments.append(result)

    # baseline slates
    avail = world.available(tick)
    uvecs = user_vectors(state, users)
    scores = recommender_scores(uvecs, state.table.vectors, state.item_clicks, sim.popularity_weight)
    eligible = (state.seen[users] < max_imp) & avail[None, :]
    slates, n_valid = top_slates(scores, eligible, size)
    if np.any(n_valid < size):
        slates = _backfill_rows(simulation, state, tick, users, slates, n_valid)
    sources = np.full(slates.shape, ORGANIC, dtype=np.int8)

    # cold-start insertion into the organic ranking
    pool = np.flatnonzero(cold_start_mask(world, state, sim, tick))
    if len(pool) and sim.coldstart_rate > 0:
        at = min(sim.coldstart_position, size) - 1
        for r in np.flatnonzero(cold_coin[users] < sim.coldstart_rate):
            u = int(users[r])
            item = int(pool[min(int(cold_pick[u] * len(pool)), len(pool) - 1)])
            row = slates[r].tolist()
            if item in row or state.seen[u, item] >= max_imp:
                continue
            row.insert(at, item)
            src = sources[r].tolist()
            src.insert(at, COLDSTART)
            slates[r] = row[:size]
            sources[r] = src[:size]

    # InvR insertion
    if variant.uses_invr and state.pending:
        active = state.ledger.active
        for r, u in enumerate(users.tolist()):
            items = state.pending.get(u)
            if not items:
                continue
            usable = [i for i in items if active[i] and avail[i] and state.seen[u, i] < max_imp]
            if not usable:
                continue
            row, src = assemble_slate(slates[r].tolist(), usable, slate_cfg, sources[r].tolist())
            slates[r] = row
            sources[r] = src

    visible, clicked = _serve(simulation, state, tick, users, slates, sources, depth, unif, experiment=True)

    if state.cohort is not None and len(state.cohort):
        state.psei_series.append(psei_counts(state.ledger.visible[state.cohort], state.ledger.min_exposure))
    is_invr = sources == INVR
    state.tick_stats.append({
        "tick": tick,
        "visits": int(len(users)),
        "visible": int(visible.sum()),
        "clicks": int(clicked.sum()),
        "invr_visible": int((visible & is_invr).sum()),
        "invr_clicks": int((clicked & is_invr).sum()),
        "active_treated": int(state.ledger.active[state.cohort].sum()) if state.cohort is not None else 0,
        "psei": state.psei_series[-1] if state.psei_series else float("nan"),
    })

    if sim.feedback_retrain_every and (tick + 1) % sim.feedback_retrain_every == 0:
        state.table = retrain_with_feedback(state, simulation.train)
    return visible, clicked, slates, sources, users


def retrain_with_feedback(state: SimState, train_config: TrainConfig) -> ItemEmbeddingTable:
    """Continue training the model on experiment records logged since the last retrain."""
    if state.log is None:
        raise InvalidConfig("feedback retraining needs the interaction log (keep_log=True)")
    n_visits = len(state.log.visit_histories())
    arrays = training_arrays(state.log, start_visit=state.retrain_cursor)
    state.retrain_cursor = n_visits
    if len(arrays[2]) == 0:
        return state.table
    return train_arrays(*arrays, config=train_config, initial=state.table)


@dataclass
class VariantResult:
    variant: str
    sim_seed: int
    report: MetricReport
    psei_series: list
    psei_ewma: list
    state: SimState | None = None


def variant_report(world: World, state: SimState, name: str, sim_seed: int) -> MetricReport:
    exposures = state.ledger.visible
    shown = state.user_vis > 0
    ctr_all = float(np.mean(state.user_clk[shown] / state.user_vis[shown])) if shown.any() else 0.0
    clicks_all = float(state.user_clk[shown].sum() / shown.sum()) if shown.any() else 0.0
    shown_i = state.user_vis_invr > 0
    ctr_invr = float(np.mean(state.user_clk_invr[shown_i] / state.user_vis_invr[shown_i])) if shown_i.any() else 0.0
    clicks_invr = float(state.user_clk_invr[shown_i].sum() / shown_i.sum()) if shown_i.any() else 0.0
    cohort = state.cohort
    return MetricReport(
        variant=name,
        b50ps=b50ps(exposures),
        psei=psei_counts(exposures[cohort], state.ledger.min_exposure) if len(cohort) else 0.0,
        t1ps=t1ps(exposures),
        gini=gini(exposures),
        ctr_invr=ctr_invr,
        clicks_invr=clicks_invr,
        ctr_overall=ctr_all,
        clicks_overall=clicks_all,
        unique_items_organic=int(state.organic_shown.sum()),
        invr_share_of_min_exposure=state.ledger.invr_share_of_min_exposure(cohort.tolist()),
        seed=sim_seed,
    )


def run_variant(simulation: Simulation, warm: SimState, variant: VariantSpec, keep_log: bool = False,
                keep_state: bool = False, record_assignments: bool = False) -> VariantResult:
    world = simulation.world
    state = warm.copy() if (keep_state or warm.log is not None) else _shallow_copy(warm)
    invr = variant.invr_config(simulation.invr) if variant.uses_invr else simulation.invr
    keep_log = keep_log or simulation.sim.feedback_retrain_every > 0
    start_experiment(state, world, invr, keep_log)
    for tick in range(world.config.ticks):
        run_epoch(simulation, variant, state, tick, record_assignments=record_assignments)
    report = variant_report(world, state, variant.name, simulation.sim_seed)
    series = list(state.psei_series)
    return VariantResult(variant.name, simulation.sim_seed, report, series,
                         ewma(series, PSEI_EWMA_ALPHA) if series else [],
                         state if keep_state else None)


def _shallow_copy(warm: SimState) -> SimState:
    """Copy the arrays a run mutates; share the read-only parts (table, log)."""
    return replace(
        warm,
        hist=warm.hist.copy(),
        hist_len=warm.hist_len.copy(),
        seen=warm.seen.copy(),
        item_clicks=warm.item_clicks.copy(),
        item_visible=warm.item_visible.copy(),
        pending={},
        psei_series=[],
        tick_stats=[],
        assignments=[],
    )


@dataclass
class ABResult:
    results: list          # VariantResult for every (seed, variant)
    baseline: str = "BASELINE"

    def seeds(self) -> list:
        return sorted({r.sim_seed for r in self.results})

    def for_seed(self, seed) -> dict:
        return {r.variant: r for r in self.results if r.sim_seed == seed}

    def reports(self, seed) -> list:
        return [r.report for r in self.results if r.sim_seed == seed]


def run_ab(world: World, variants, sim_seeds, sim: SimConfig, slate: SlateConfig, invr: InvrConfig,
           train: TrainConfig, keep_states: bool = False, progress=None) -> ABResult:
    """Run every variant on the same world with common random numbers, per sim seed."""
    variants = [v if isinstance(v, VariantSpec) else VariantSpec(v) for v in variants]
    if not any(v.name == "BASELINE" for v in variants):
        raise InvalidConfig("run_ab needs a BASELINE variant")
    sim.validate(), slate.validate(), invr.validate(), train.validate()
    out = []
    for seed in sim_seeds:
        simulation = Simulation(world, sim, slate, invr, train, sim_seed=int(seed))
        warm = warm_up(world, simulation, keep_log=False)
        for v in variants:
            res = run_variant(simulation, warm, v, keep_state=keep_states)
            if progress is not None:
                progress(seed, v.name, res.report)
            out.append(res)
    return ABResult(out)
