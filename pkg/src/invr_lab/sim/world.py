"""Synthetic content platform: users, items, publishers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import InvalidConfig


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 10_000
    n_items: int = 2_000
    n_publishers: int = 20
    latent_dim: int = 16
    popularity_exponent: float = 1.0
    niche_publisher_fraction: float = 0.2
    # concentration of item vectors around their publisher topic
    niche_concentration: float = 6.0
    mainstream_concentration: float = 1.5
    user_concentration: float = 2.5
    # niche items are pushed towards the tail of the popularity ranking
    niche_popularity_penalty: float = 1.0
    activity_alpha: float = 2.0
    activity_beta: float = 8.0
    scroll_continuation: float = 0.85
    consent_rate: float = 0.9
    new_item_fraction: float = 0.05
    # equal by default: the revenue proxy then ranks publishers by clicks
    revenue_per_click_low: float = 1.0
    revenue_per_click_high: float = 1.0
    warmup_ticks: int = 10
    ticks: int = 50
    seed: int = 0

    def validate(self) -> "WorldConfig":
        for name in ("n_users", "n_items", "n_publishers", "latent_dim", "ticks"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"world.{name} must be >= 1")
        if self.warmup_ticks < 1:
            raise InvalidConfig("world.warmup_ticks must be >= 1")
        if self.popularity_exponent < 0:
            raise InvalidConfig("world.popularity_exponent must be >= 0")
        if not 0 <= self.niche_publisher_fraction < 1:
            raise InvalidConfig("world.niche_publisher_fraction must lie in [0, 1)")
        if not 0 < self.scroll_continuation <= 1:
            raise InvalidConfig("world.scroll_continuation must lie in (0, 1]")
        if not 0 <= self.consent_rate <= 1:
            raise InvalidConfig("world.consent_rate must lie in [0, 1]")
        if not 0 <= self.new_item_fraction < 1:
            raise InvalidConfig("world.new_item_fraction must lie in [0, 1)")
        if self.activity_alpha <= 0 or self.activity_beta <= 0:
            raise InvalidConfig("world.activity_alpha/beta must be > 0")
        if self.n_items < self.n_publishers:
            raise InvalidConfig("world.n_items must be >= world.n_publishers")
        return self


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class World:
    config: WorldConfig
    user_latent: np.ndarray          # (n_users, latent_dim), unit rows
    user_topic: np.ndarray           # favourite publisher topic per user
    activity: np.ndarray             # per-tick visit probability
    consent: np.ndarray              # bool
    item_latent: np.ndarray          # (n_items, latent_dim), unit rows
    item_publisher: np.ndarray
    popularity_prior: np.ndarray     # sums to 1
    created_tick: np.ndarray         # negative = before the experiment
    publisher_topic: np.ndarray      # (n_publishers, latent_dim)
    publisher_niche: np.ndarray      # bool
    revenue_per_click: np.ndarray
    _item_publisher_map: dict = field(default=None, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.user_latent)

    @property
    def n_items(self) -> int:
        return len(self.item_latent)

    def item_publisher_map(self) -> dict:
        if self._item_publisher_map is None:
            self._item_publisher_map = {i: int(p) for i, p in enumerate(self.item_publisher)}
        return self._item_publisher_map

    def niche_publishers(self) -> set:
        return {int(p) for p in np.flatnonzero(self.publisher_niche)}

    def available(self, tick: int) -> np.ndarray:
        return self.created_tick <= tick


def generate_world(config: WorldConfig) -> World:
    """Draw a world; identical configs give identical worlds.

    Each publisher owns one topic direction. Niche publishers produce items
    tightly concentrated on their topic and sit in the tail of the popularity
    prior ``rank ** -popularity_exponent``.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    d, n_pub = config.latent_dim, config.n_publishers

    n_niche = int(round(config.niche_publisher_fraction * n_pub))
    publisher_niche = np.zeros(n_pub, dtype=bool)
    publisher_niche[rng.permutation(n_pub)[:n_niche]] = True
    publisher_topic = _unit(rng.normal(size=(n_pub, d)))
    revenue_per_click = rng.uniform(config.revenue_per_click_low, config.revenue_per_click_high, size=n_pub)

    item_publisher = np.arange(config.n_items) % n_pub
    item_publisher = item_publisher[rng.permutation(config.n_items)]
    conc = np.where(publisher_niche[item_publisher], config.niche_concentration,
                    config.mainstream_concentration)
    noise = rng.normal(size=(config.n_items, d)) / np.sqrt(d)
    item_latent = _unit(conc[:, None] * publisher_topic[item_publisher] + noise)

    # popularity rank: random order, niche items shifted towards the tail
    key = rng.random(config.n_items) + config.niche_popularity_penalty * publisher_niche[item_publisher]
    rank = np.empty(config.n_items, dtype=np.int64)
    rank[np.argsort(key, kind="stable")] = np.arange(1, config.n_items + 1)
    prior = rank.astype(np.float64) ** (-config.popularity_exponent)
    prior /= prior.sum()

    created = -np.ones(config.n_items, dtype=np.int64) * config.warmup_ticks
    n_new = int(round(config.new_item_fraction * config.n_items))
    if n_new:
        new = rng.choice(config.n_items, size=n_new, replace=False)
        created[new] = rng.integers(1, config.ticks, size=n_new) if config.ticks > 1 else 0

    user_topic = rng.integers(0, n_pub, size=config.n_users)
    user_noise = rng.normal(size=(config.n_users, d)) / np.sqrt(d)
    user_latent = _unit(config.user_concentration * publisher_topic[user_topic] + user_noise)
    activity = rng.beta(config.activity_alpha, config.activity_beta, size=config.n_users)
    consent = rng.random(config.n_users) < config.consent_rate

    return World(
        config=config,
        user_latent=user_latent,
        user_topic=user_topic,
        activity=activity,
        consent=consent,
        item_latent=item_latent,
        item_publisher=item_publisher,
        popularity_prior=prior,
        created_tick=created,
        publisher_topic=publisher_topic,
        publisher_niche=publisher_niche,
        revenue_per_click=revenue_per_click,
    )


# -- eligibility ------------------------------------------------------------------


@dataclass(frozen=True)
class PublisherThresholds:
    """Upper bounds a publisher must stay strictly below to be selected.

    A ``None`` bound is replaced by the median of that statistic across
    publishers.
    """

    total_revenue: float | None = None
    avg_impressions_per_item: float | None = None
    total_clicks: float | None = None
    avg_revenue_per_item: float | None = None


@dataclass(frozen=True)
class UserThresholds:
    min_history_len: int = 5
    min_recent_visits: int = 2
    recent_window: int = 10


def publisher_stats(world: World, item_visible: np.ndarray, item_clicks: np.ndarray) -> list[dict]:
    """Trailing-window stats per publisher; revenue is clicks times revenue-per-click."""
    out = []
    for p in range(world.config.n_publishers):
        items = world.item_publisher == p
        n = max(int(items.sum()), 1)
        clicks = float(item_clicks[items].sum())
        revenue = clicks * float(world.revenue_per_click[p])
        out.append({
            "publisher": p,
            "niche": bool(world.publisher_niche[p]),
            "n_items": int(items.sum()),
            "total_revenue": revenue,
            "avg_impressions_per_item": float(item_visible[items].sum()) / n,
            "total_clicks": clicks,
            "avg_revenue_per_item": revenue / n,
        })
    return out


STAT_KEYS = ("total_revenue", "avg_impressions_per_item", "total_clicks", "avg_revenue_per_item")


def select_publishers(stats: list[Mapping], thresholds: PublisherThresholds) -> set:
    """Niche publishers strictly below every threshold."""
    bounds = {}
    for key in STAT_KEYS:
        value = getattr(thresholds, key)
        if value is None:
            value = float(np.median([s[key] for s in stats])) if stats else 0.0
        bounds[key] = value
    return {
        s["publisher"] for s in stats
        if s["niche"] and all(s[k] < bounds[k] for k in STAT_KEYS)
    }


def select_users(history_len: np.ndarray, recent_visits: np.ndarray, consent: np.ndarray,
                 min_history_len: int, min_recent_visits: int) -> np.ndarray:
    """Ids of users with a long enough history, recent visits and consent."""
    ok = (np.asarray(history_len) >= min_history_len) & (np.asarray(recent_visits) >= min_recent_visits)
    ok &= np.asarray(consent, dtype=bool)
    return np.flatnonzero(ok)


def write_world_csv(world: World, directory) -> None:
    """Snapshot the world as three CSV files (users, items, publishers)."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = world.config.latent_dim
    with open(directory / "users.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "topic", "activity", "consent"] + [f"z{k}" for k in range(d)])
        for u in range(world.n_users):
            w.writerow([u, int(world.user_topic[u]), repr(float(world.activity[u])), int(world.consent[u])]
                       + [repr(float(x)) for x in world.user_latent[u]])
    with open(directory / "items.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "publisher", "popularity_prior", "created_tick"] + [f"z{k}" for k in range(d)])
        for i in range(world.n_items):
            w.writerow([i, int(world.item_publisher[i]), repr(float(world.popularity_prior[i])),
                        int(world.created_tick[i])] + [repr(float(x)) for x in world.item_latent[i]])
    with open(directory / "publishers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["publisher", "niche", "revenue_per_click"])
        for p in range(world.config.n_publishers):
            w.writerow([p, int(world.publisher_niche[p]), repr(float(world.revenue_per_click[p]))])
