"""Popularity-biased baseline recommender, slate assembly and the click model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidConfig
from ..records import SOURCE_CODES, Source

ORGANIC = SOURCE_CODES[Source.ORGANIC]
INVR = SOURCE_CODES[Source.INVR]
COLDSTART = SOURCE_CODES[Source.COLDSTART]


@dataclass(frozen=True)
class SlateConfig:
    slate_size: int = 20
    invr_slots_max: int = 3
    invr_position_range: tuple = (5, 12)

    def __post_init__(self):
        object.__setattr__(self, "invr_position_range", tuple(int(x) for x in self.invr_position_range))

    def validate(self) -> "SlateConfig":
        lo, hi = self.invr_position_range
        if self.slate_size < 1:
            raise InvalidConfig("slate.slate_size must be >= 1")
        if not 1 <= lo <= hi <= self.slate_size:
            raise InvalidConfig(f"slate.invr_position_range {self.invr_position_range} must fit in the slate")
        if not 0 <= self.invr_slots_max <= hi - lo + 1:
            raise InvalidConfig("slate.invr_slots_max must not exceed the width of invr_position_range")
        return self


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def recommender_scores(user_vectors: np.ndarray, item_vectors: np.ndarray, item_clicks: np.ndarray,
                       popularity_weight: float) -> np.ndarray:
    """``dot(user, item) + weight * log(1 + clicks(item))`` for every pair."""
    return user_vectors @ item_vectors.T + popularity_weight * np.log1p(item_clicks)[None, :]


def top_slates(scores: np.ndarray, eligible: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``size`` eligible items per row, best first, item id breaking ties.

    Returns ``(items, n_valid)``; positions past ``n_valid`` hold ``-1`` and
    need backfilling by the caller.
    """
    masked = np.where(eligible, scores, -np.inf)
    n = masked.shape[1]
    k = min(size, n)
    part = np.argpartition(-masked, k - 1, axis=1)[:, :k]
    part_scores = np.take_along_axis(masked, part, axis=1)
    order = np.lexsort((part, -part_scores), axis=1)
    items = np.take_along_axis(part, order, axis=1)
    valid = np.isfinite(np.take_along_axis(part_scores, order, axis=1))
    items = np.where(valid, items, -1)
    if k < size:
        items = np.hstack([items, -np.ones((items.shape[0], size - k), dtype=items.dtype)])
    return items, valid.sum(axis=1)


def backfill(slate: list, size: int, pools: list, rng: np.random.Generator) -> list:
    """Top up ``slate`` to ``size`` from each pool in turn (random order within a pool)."""
    slate = [i for i in slate if i >= 0]
    have = set(slate)
    for pool in pools:
        if len(slate) >= size:
            break
        pool = [i for i in pool if i not in have]
        for j in rng.permutation(len(pool)):
            if len(slate) >= size:
                break
            slate.append(pool[j])
            have.add(pool[j])
    return slate


def baseline_recommender(user_vector: np.ndarray | None, item_vectors: np.ndarray, item_clicks: np.ndarray,
                         popularity_weight: float, seen: np.ndarray, available: np.ndarray,
                         cold_pool=(), max_impressions: int = 2, size: int = 20, seed=0) -> list:
    """20-item slate for one user.

    Items the user has visibly seen ``max_impressions`` times are skipped. A
    user without an embedding is scored on popularity alone. If too few items
    remain, the slate is filled from ``cold_pool`` then from random available
    items.
    """
    if user_vector is None:
        user_vector = np.zeros(item_vectors.shape[1])
    scores = recommender_scores(user_vector[None, :], item_vectors, item_clicks, popularity_weight)
    eligible = (np.asarray(seen) < max_impressions) & np.asarray(available, dtype=bool)
    items, n_valid = top_slates(scores, eligible[None, :], size)
    slate = [int(i) for i in items[0] if i >= 0]
    if len(slate) < size:
        rng = np.random.default_rng(seed)
        slate = backfill(slate, size, [sorted(cold_pool), np.flatnonzero(available).tolist()], rng)
    return slate


def assemble_slate(base: list, invr_items: list, slate_config: SlateConfig, base_sources=None):
    """Insert InvR items into a ranked slate.

    InvR items take consecutive positions from the start of the InvR range in
    the order given, pushing base items down; the slate keeps its size. A base
    item that is also an InvR item is dropped from its base position. Returns
    ``(items, sources)``.
    """
    size = slate_config.slate_size
    if base_sources is None:
        base_sources = [ORGANIC] * len(base)
    invr = list(dict.fromkeys(invr_items))[: slate_config.invr_slots_max]
    if not invr:
        return list(base[:size]), list(base_sources[:size])
    chosen = set(invr)
    rest = [(b, s) for b, s in zip(base, base_sources) if b not in chosen]
    at = slate_config.invr_position_range[0] - 1
    merged = rest[:at] + [(i, INVR) for i in invr] + rest[at:]
    merged = merged[:size]
    return [m[0] for m in merged], [m[1] for m in merged]


def click_probability(user_latent: np.ndarray, item_latent: np.ndarray, beta: float, bias: float) -> np.ndarray:
    """``sigmoid(beta * <user, item> + bias)`` on ground-truth latent vectors."""
    dots = np.einsum("...d,...d->...", user_latent, item_latent)
    return _sigmoid(beta * dots + bias)


def sample_scroll_depth(rng: np.random.Generator, continuation: float, size=None):
    """Number of slate positions the user looks at: geometric, at least 1."""
    if continuation >= 1:
        return np.full(size, np.iinfo(np.int32).max) if size is not None else np.iinfo(np.int32).max
    return rng.geometric(1.0 - continuation, size=size)


def click_model(user_latent: np.ndarray, item_latent: np.ndarray, position: int, continuation: float,
                beta: float, bias: float, rng: np.random.Generator) -> tuple[bool, bool]:
    """Sample ``(visible, clicked)`` for one slate position."""
    depth = sample_scroll_depth(rng, continuation)
    visible = position <= depth
    u = rng.random()
    clicked = bool(visible and u < float(click_probability(user_latent, item_latent, beta, bias)))
    return bool(visible), clicked
