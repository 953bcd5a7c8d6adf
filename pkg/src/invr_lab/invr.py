"""Inverse retrieval: find the best users for each under-exposed item.

One batch ("tick") of the pipeline is

1. pick the treated items (selected publishers, still below minimum exposure),
2. query the user index with each item vector, over-fetching candidates,
3. transpose item -> users into user -> items with a single greedy pass that
   respects a per-user cap and a per-item quota,
4. order each user's items for presentation.

The exposure ledger tracks visible impressions between batches and switches
InvR support off once an item reaches the minimum exposure.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidConfig, UnknownItem
from .mips import MipsIndex
from .records import InteractionRecord, Source


class OrderingMode(str, Enum):
    RANDOM_USERS = "RANDOM_USERS"
    INVR_RANDOM = "INVR_RANDOM"
    INVR_SCORE = "INVR_SCORE"
    INVR_USER_RANK = "INVR_USER_RANK"


@dataclass(frozen=True)
class InvrConfig:
    users_per_item: int = 20
    items_per_user_cap: int = 3
    overfetch_factor: float = 4.0
    ordering_mode: OrderingMode = OrderingMode.INVR_USER_RANK
    min_exposure: int = 50
    max_impressions_per_user_item: int = 2
    recompute_period: int = 1
    refill_round: bool = False
    repair_shortfalls: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ordering_mode", OrderingMode(self.ordering_mode))

    def validate(self) -> "InvrConfig":
        if self.users_per_item < 1:
            raise InvalidConfig("users_per_item must be >= 1")
        if self.items_per_user_cap < 1:
            raise InvalidConfig("items_per_user_cap must be >= 1")
        if not self.overfetch_factor >= 1:
            raise InvalidConfig("overfetch_factor must be >= 1")
        if self.min_exposure < 1:
            raise InvalidConfig("min_exposure must be >= 1")
        if self.max_impressions_per_user_item < 1:
            raise InvalidConfig("max_impressions_per_user_item must be >= 1")
        if self.recompute_period < 1:
            raise InvalidConfig("recompute_period must be >= 1")
        return self


class CandidatePair(NamedTuple):
    item: Hashable
    user: Hashable
    score: float
    user_rank: int


@dataclass
class Assignment:
    per_user: dict = field(default_factory=dict)
    per_item: dict = field(default_factory=dict)
    shortfalls: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)
    quota: int = 0

    def add(self, pair: CandidatePair) -> None:
        self.per_user.setdefault(pair.user, []).append(pair.item)
        self.per_item.setdefault(pair.item, set()).add(pair.user)
        self.pairs[(pair.item, pair.user)] = pair

    def remove(self, item, user) -> None:
        self.per_user[user].remove(item)
        if not self.per_user[user]:
            del self.per_user[user]
        self.per_item[item].discard(user)
        del self.pairs[(item, user)]

    def user_pairs(self, user) -> list[CandidatePair]:
        return [self.pairs[(i, user)] for i in self.per_user.get(user, ())]

    def n_pairs(self) -> int:
        return len(self.pairs)


# -- exposure ledger -----------------------------------------------------------


class ExposureLedger:
    """Per-item visible impressions, split into InvR-sourced and the rest."""

    def __init__(self, item_ids: Sequence, min_exposure: int):
        if min_exposure < 1:
            raise InvalidConfig("min_exposure must be >= 1")
        self.item_ids = list(item_ids)
        self._row = {i: k for k, i in enumerate(self.item_ids)}
        n = len(self.item_ids)
        self.min_exposure = int(min_exposure)
        self.visible = np.zeros(n, dtype=np.int64)
        self.invr_visible = np.zeros(n, dtype=np.int64)
        self.clicks = np.zeros(n, dtype=np.int64)
        # counters frozen at the moment an item first reaches min_exposure
        self.shutoff_tick = np.full(n, -1, dtype=np.int64)
        self.invr_at_shutoff = np.zeros(n, dtype=np.int64)
        self.visible_at_shutoff = np.zeros(n, dtype=np.int64)

    @property
    def active(self) -> np.ndarray:
        return self.visible < self.min_exposure

    def row(self, item_id) -> int:
        try:
            return self._row[item_id]
        except KeyError:
            raise UnknownItem(item_id) from None

    def __getitem__(self, item_id) -> dict:
        k = self.row(item_id)
        return {
            "visible": int(self.visible[k]),
            "invr_visible": int(self.invr_visible[k]),
            "clicks": int(self.clicks[k]),
            "active": bool(self.visible[k] < self.min_exposure),
        }

    def copy(self) -> "ExposureLedger":
        other = ExposureLedger(self.item_ids, self.min_exposure)
        for name in ("visible", "invr_visible", "clicks", "shutoff_tick",
                     "invr_at_shutoff", "visible_at_shutoff"):
            setattr(other, name, getattr(self, name).copy())
        return other

    def record_rows(self, rows, visible, clicked, invr, tick: int = 0) -> None:
        """Vectorised update from parallel arrays of ledger rows and flags."""
        rows = np.asarray(rows, dtype=np.int64)
        visible = np.asarray(visible, dtype=bool)
        invr = np.asarray(invr, dtype=bool) & visible
        clicked = np.asarray(clicked, dtype=bool) & visible
        was_active = self.active
        n = len(self.item_ids)
        self.visible += np.bincount(rows[visible], minlength=n)
        self.invr_visible += np.bincount(rows[invr], minlength=n)
        self.clicks += np.bincount(rows[clicked], minlength=n)
        crossed = was_active & ~self.active
        self.shutoff_tick[crossed] = tick
        self.invr_at_shutoff[crossed] = self.invr_visible[crossed]
        self.visible_at_shutoff[crossed] = self.visible[crossed]

    def invr_share_of_min_exposure(self, items: Iterable | None = None) -> float:
        """Fraction of exposure up to shutoff that InvR itself delivered.

        Aggregated over items that have been shut off (optionally restricted to
        ``items``); NaN when none has.
        """
        mask = self.shutoff_tick >= 0
        if items is not None:
            sel = np.zeros(len(self.item_ids), dtype=bool)
            sel[[self.row(i) for i in items]] = True
            mask &= sel
        total = self.visible_at_shutoff[mask].sum()
        if total == 0:
            return float("nan")
        return float(self.invr_at_shutoff[mask].sum() / total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("item_id,visible,invr_visible,clicks,active\n")
            active = self.active
            for k, item in enumerate(self.item_ids):
                fh.write(f"{item},{self.visible[k]},{self.invr_visible[k]},{self.clicks[k]},{int(active[k])}\n")

    @classmethod
    def read_csv(cls, path, min_exposure: int) -> "ExposureLedger":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = [int(r["item_id"]) if r["item_id"].lstrip("-").isdigit() else r["item_id"] for r in rows]
        ledger = cls(ids, min_exposure)
        ledger.visible[:] = [int(r["visible"]) for r in rows]
        ledger.invr_visible[:] = [int(r["invr_visible"]) for r in rows]
        ledger.clicks[:] = [int(r["clicks"]) for r in rows]
        return ledger


def record_impressions(ledger: ExposureLedger, events: Iterable[InteractionRecord]) -> ExposureLedger:
    """Return a new ledger with ``events`` counted in. Non-visible events are ignored."""
    events = list(events)
    out = ledger.copy()
    if not events:
        return out
    rows = [out.row(e.item_id) for e in events]
    out.record_rows(
        rows,
        [e.visible for e in events],
        [e.clicked for e in events],
        [Source(e.source) is Source.INVR for e in events],
        tick=max(e.tick for e in events),
    )
    return out


# -- item / user selection -------------------------------------------------------


def select_treated_items(ledger: ExposureLedger, item_publisher: Mapping, selected_publishers,
                         available=None) -> list:
    """Items of selected publishers still strictly below minimum exposure.

    ``available`` optionally restricts to items that exist (not expired, already
    published). Output is sorted by item id.
    """
    selected_publishers = set(selected_publishers)
    out = []
    for item, publisher in item_publisher.items():
        if publisher not in selected_publishers:
            continue
        if available is not None and item not in available:
            continue
        if ledger.visible[ledger.row(item)] < ledger.min_exposure:
            out.append(item)
    return sorted(out)


def dedup_filter(user, item_ids: Iterable, impression_history: Mapping, max_impressions: int = 2) -> list:
    """Drop items ``user`` has already seen visibly ``max_impressions`` times.

    ``impression_history`` maps ``(user, item)`` to a visible-impression count.
    """
    return [i for i in item_ids if impression_history.get((user, i), 0) < max_impressions]


def cold_start_pool(created_tick: Mapping, interaction_counts: Mapping, min_interactions: int,
                    age_limit: int, tick: int) -> list:
    """Young items that have not yet gathered ``min_interactions`` interactions."""
    out = []
    for item, born in created_tick.items():
        age = tick - born
        if 0 <= age < age_limit and interaction_counts.get(item, 0) < min_interactions:
            out.append(item)
    return sorted(out)


# -- retrieval and allocation ------------------------------------------------------


def n_candidates(k: int, overfetch_factor: float, index_size: int) -> int:
    return min(index_size, int(math.ceil(k * overfetch_factor)))


def retrieve_candidates(item_id, item_embedding, user_index: MipsIndex, k: int,
                        overfetch_factor: float) -> list[CandidatePair]:
    m = n_candidates(k, overfetch_factor, len(user_index))
    hits = user_index.top_n(item_embedding, m)
    return [CandidatePair(item_id, h.id, h.score, r) for r, h in enumerate(hits, start=1)]


def retrieve_all(item_ids: Sequence, item_vectors: np.ndarray, user_index: MipsIndex, k: int,
                 overfetch_factor: float) -> dict:
    """:func:`retrieve_candidates` for many items in one matrix product."""
    if len(item_ids) == 0:
        return {}
    m = n_candidates(k, overfetch_factor, len(user_index))
    rows, scores = user_index.top_n_rows(np.asarray(item_vectors), m)
    ids = user_index.ids
    return {
        item: [CandidatePair(item, ids[r], float(s), rank)
               for rank, (r, s) in enumerate(zip(rows[j].tolist(), scores[j].tolist()), start=1)]
        for j, item in enumerate(item_ids)
    }


def allocation_key(mode: OrderingMode):
    """Sort key for the greedy pass: user rank for the rank variant, score otherwise."""
    mode = OrderingMode(mode)
    if mode is OrderingMode.INVR_USER_RANK:
        return lambda p: (p.user_rank, -p.score, p.item, p.user)
    return lambda p: (-p.score, p.item, p.user)


def transpose_and_allocate(candidates: Mapping, config: InvrConfig, users: Sequence | None = None,
                           start: Assignment | None = None, rng=None, exclude: Mapping | None = None) -> Assignment:
    """Turn per-item candidate lists into capped per-user item lists.

    All pairs are sorted by the variant's key and visited once; a pair is
    taken iff its item still needs users and its user is under the cap.
    ``RANDOM_USERS`` ignores the candidates' order and instead draws users
    uniformly from ``users`` (without replacement, skipping full users),
    visiting items in a random order.
    ``start`` continues from an earlier partial assignment. ``exclude`` maps
    an item to users that must not receive it (already seen often enough).
    """
    config.validate()
    exclude = exclude or {}
    k, cap = config.users_per_item, config.items_per_user_cap
    out = start if start is not None else Assignment(quota=k)
    out.quota = k

    if config.ordering_mode is OrderingMode.RANDOM_USERS:
        if users is None:
            raise InvalidConfig("RANDOM_USERS allocation needs the user population")
        if rng is None:
            rng = np.random.default_rng(config.seed)
        users = list(users)
        load = np.array([len(out.per_user.get(u, ())) for u in users], dtype=np.int64)
        items = sorted(candidates)
        # random item order so that a binding cap does not always starve the same ids
        for j in rng.permutation(len(items)):
            item = items[j]
            have = out.per_item.get(item, set())
            need = k - len(have)
            open_users = np.flatnonzero(load < cap)
            skip = have | exclude.get(item, set())
            if skip:
                open_users = np.array([j for j in open_users if users[j] not in skip], dtype=np.int64)
            take = min(need, len(open_users))
            if take > 0:
                drawn = rng.choice(open_users, size=take, replace=False)
                for rank, j in enumerate(drawn.tolist(), start=len(have) + 1):
                    out.add(CandidatePair(item, users[j], 0.0, rank))
                    load[j] += 1
            out.shortfalls[item] = k - len(out.per_item.get(item, ()))
        if config.repair_shortfalls and any(out.shortfalls[i] > 0 for i in items):
            _repair(out, _EveryUser(items, users), k, cap, exclude)
        return out

    pairs = [p for item, lst in candidates.items() for p in lst
             if p.user not in exclude.get(item, ())]
    pairs.sort(key=allocation_key(config.ordering_mode))
    item_load = {i: len(out.per_item.get(i, ())) for i in candidates}
    user_load = {u: len(v) for u, v in out.per_user.items()}
    for p in pairs:
        if item_load[p.item] >= k or user_load.get(p.user, 0) >= cap:
            continue
        if (p.item, p.user) in out.pairs:
            continue
        out.add(p)
        item_load[p.item] += 1
        user_load[p.user] = user_load.get(p.user, 0) + 1
    for item in candidates:
        out.shortfalls[item] = k - item_load[item]
    if config.repair_shortfalls:
        _repair(out, candidates, k, cap, exclude)
    return out


class _Pairs(Sequence):
    """Every user as a candidate of ``item``; user_rank is the position in the population."""

    def __init__(self, item, users):
        self.item, self.users = item, users

    def __len__(self):
        return len(self.users)

    def __getitem__(self, k):
        return CandidatePair(self.item, self.users[k], 0.0, k + 1)


class _EveryUser:
    """Candidate view for random targeting, built per item on demand."""

    def __init__(self, items, users):
        self.items, self.users = set(items), list(users)

    def __contains__(self, item):
        return item in self.items

    def __iter__(self):
        return iter(self.items)

    def get(self, item, default=()):
        return _Pairs(item, self.users) if item in self.items else default


def _repair(out: Assignment, candidates: Mapping, k: int, cap: int, exclude: Mapping) -> None:
    """Close greedy deficits by re-routing along augmenting paths.

    A path runs short item -> candidate user already full -> an item that
    user holds -> another candidate of that item ... -> a user with spare
    capacity. Every pair on it stays a retrieved candidate; loads of inner
    users are unchanged. When no item has a path left the assignment is a
    maximum one over the candidate graph. No-op when the greedy pass met
    every quota.
    """
    # spare capacity only shrinks (inner users keep their load, the end user
    # gains one), so a per-item cursor over its candidates never moves back;
    # nodes a failed search visited stay unable to reach spare capacity
    cursor, dead_items, dead_users = {}, set(), set()
    for item in sorted(i for i in candidates if out.shortfalls.get(i, 0) > 0):
        while out.shortfalls[item] > 0 and item not in dead_items:
            if _augment(out, candidates, item, cap, exclude, cursor, dead_items, dead_users):
                out.shortfalls[item] -= 1


def _augment(out, candidates, start, cap, exclude, cursor, dead_items, dead_users) -> bool:
    per_user, per_item = out.per_user, out.per_item

    def spare(item):
        lst = candidates.get(item, ())
        held, skip = per_item.get(item, ()), exclude.get(item, ())
        j = cursor.get(item, 0)
        while j < len(lst):
            p = lst[j]
            if len(per_user.get(p.user, ())) < cap and p.user not in held and p.user not in skip:
                break
            j += 1
        cursor[item] = j
        return lst[j] if j < len(lst) else None

    via_user, via_item = {}, {start: None}

    def take(p):
        # walk back: each item on the path swaps its incoming user for the next one
        while p is not None:
            prev = via_item[p.item]
            if prev is not None:
                out.remove(p.item, prev)
            out.add(p)
            p = via_user[prev] if prev is not None else None
        return True

    p = spare(start)
    if p is not None:
        return take(p)
    queue = [start]
    for item in queue:
        held, skip = per_item.get(item, ()), exclude.get(item, ())
        for p in candidates.get(item, ()):
            u = p.user
            if u in held or u in skip or u in via_user or u in dead_users:
                continue
            via_user[u] = p  # full: spare(item) found nothing
            for other in per_user.get(u, ()):
                if other in via_item or other in dead_items or other not in candidates:
                    continue
                via_item[other] = u
                q = spare(other)
                if q is not None:
                    return take(q)
                queue.append(other)
    dead_items.update(via_item)
    dead_users.update(via_user)
    return False


def _stable_hash(value) -> int:
    return zlib.crc32(repr(value).encode())


def order_items_for_user(user, pairs: Sequence[CandidatePair], mode: OrderingMode, seed=0) -> list:
    """Presentation order of one user's assigned items."""
    mode = OrderingMode(mode)
    pairs = sorted(pairs, key=lambda p: p.item)
    if mode is OrderingMode.INVR_SCORE:
        pairs.sort(key=lambda p: -p.score)
    elif mode is OrderingMode.INVR_USER_RANK:
        pairs.sort(key=lambda p: (p.user_rank, -p.score))
    else:
        seed_seq = list(np.atleast_1d(seed)) + [_stable_hash(user)]
        rng = np.random.default_rng([int(s) for s in seed_seq])
        pairs = [pairs[j] for j in rng.permutation(len(pairs))]
    return [p.item for p in pairs]


@dataclass
class TickResult:
    tick: int
    treated: list
    assignment: Assignment
    ordered: dict  # user -> ordered item list


def compute_assignment(tick: int, treated: Sequence, item_vectors: np.ndarray, user_ids: Sequence,
                       user_vectors: np.ndarray | None, config: InvrConfig,
                       exclude: Mapping | None = None) -> TickResult:
    """One full batch: retrieve, allocate, order.

    ``item_vectors[j]`` embeds ``treated[j]``. ``user_vectors`` may be None for
    ``RANDOM_USERS``. ``exclude`` maps items to users already over the
    impression limit; they are dropped before allocation, keeping the user
    rank they had at retrieval.
    """
    config.validate()
    mode = config.ordering_mode
    assignment = Assignment(quota=config.users_per_item)
    if len(treated) and len(user_ids):
        if mode is OrderingMode.RANDOM_USERS:
            rng = np.random.default_rng([config.seed, tick, 7])
            transpose_and_allocate({i: [] for i in treated}, config, users=user_ids, start=assignment, rng=rng,
                                   exclude=exclude)
        else:
            index = MipsIndex(list(user_ids), user_vectors)
            cands = retrieve_all(list(treated), item_vectors, index, config.users_per_item,
                                 config.overfetch_factor)
            transpose_and_allocate(cands, config, start=assignment, exclude=exclude)
            if config.refill_round:
                short = [j for j, i in enumerate(treated) if assignment.shortfalls[i] > 0]
                if short:
                    rows, short = short, [treated[j] for j in short]
                    wider = retrieve_all(short, item_vectors[rows], index, config.users_per_item,
                                         2 * config.overfetch_factor)
                    transpose_and_allocate(wider, config, start=assignment, exclude=exclude)
    else:
        for i in treated:
            assignment.shortfalls[i] = config.users_per_item
    ordered = {
        u: order_items_for_user(u, assignment.user_pairs(u), mode, seed=[config.seed, tick])
        for u in sorted(assignment.per_user)
    }
    return TickResult(tick, list(treated), assignment, ordered)


ASSIGNMENT_COLUMNS = ("tick", "user_id", "slot", "item_id", "score", "user_rank", "mode")


def assignment_rows(result: TickResult, mode: OrderingMode):
    for user, items in result.ordered.items():
        for slot, item in enumerate(items, start=1):
            p = result.assignment.pairs[(item, user)]
            yield (result.tick, user, slot, item, repr(float(p.score)), p.user_rank, OrderingMode(mode).value)


def write_assignments_csv(path, results: Iterable[TickResult], mode: OrderingMode) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        fh.write(",".join(ASSIGNMENT_COLUMNS) + "\n")
        for res in results:
            for row in assignment_rows(res, mode):
                fh.write(",".join(str(x) for x in row) + "\n")
                n += 1
    return n
