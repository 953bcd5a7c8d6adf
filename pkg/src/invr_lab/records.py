"""Interaction records: the unit of training data and of every metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

LOG_COLUMNS = ("tick", "user_id", "item_id", "position", "visible", "clicked", "source")


class Source(str, Enum):
    ORGANIC = "ORGANIC"
    INVR = "INVR"
    COLDSTART = "COLDSTART"


SOURCE_CODES = {Source.ORGANIC: 0, Source.INVR: 1, Source.COLDSTART: 2}
SOURCE_BY_CODE = {v: k for k, v in SOURCE_CODES.items()}


@dataclass(frozen=True)
class InteractionRecord:
    tick: int
    user_id: int
    item_id: int
    position: int
    visible: bool
    clicked: bool
    source: Source = Source.ORGANIC
    history: tuple | None = None

    def __post_init__(self):
        if self.clicked and not self.visible:
            raise ValueError("a click requires a visible impression")
        if not 1 <= self.position:
            raise ValueError(f"position must be >= 1, got {self.position}")
        object.__setattr__(self, "source", Source(self.source))


class InteractionLog:
    """Columnar append-only log.

    Every row also points at the visit it came from (``visit``); the visit
    table keeps the user's history snapshot taken before the slate was shown,
    which is what training examples use.
    """

    def __init__(self, max_history: int = 50):
        self.max_history = max_history
        self._chunks = []
        self._visit_chunks = []
        self._n_visits = 0
        self._cache = None

    def append(self, tick, user, item, position, visible, clicked, source, visit_histories=None):
        n = len(user)
        if visit_histories is None:
            visit_histories = np.full((0, self.max_history), -1, dtype=np.int32)
        chunk = {
            "tick": np.full(n, tick, dtype=np.int32) if np.isscalar(tick) else np.asarray(tick, dtype=np.int32),
            "user_id": np.asarray(user, dtype=np.int32),
            "item_id": np.asarray(item, dtype=np.int32),
            "position": np.asarray(position, dtype=np.int8),
            "visible": np.asarray(visible, dtype=bool),
            "clicked": np.asarray(clicked, dtype=bool),
            "source": np.asarray(source, dtype=np.int8),
        }
        self._chunks.append(chunk)
        self._visit_chunks.append(np.asarray(visit_histories, dtype=np.int32))
        self._n_visits += len(visit_histories)
        self._cache = None

    def append_visits(self, tick, users, slates, positions_visible, clicked, sources, histories):
        """Append one tick of ``(n_visits, slate_size)`` slates."""
        v, s = slates.shape
        base = self._n_visits
        self.append(
            tick,
            np.repeat(users, s),
            slates.ravel(),
            np.tile(np.arange(1, s + 1), v),
            positions_visible.ravel(),
            clicked.ravel(),
            sources.ravel(),
            histories,
        )
        self._chunks[-1]["visit"] = np.repeat(np.arange(base, base + v, dtype=np.int64), s)

    def columns(self) -> dict:
        if self._cache is None:
            if not self._chunks:
                cols = {k: np.empty(0, dtype=np.int32) for k in LOG_COLUMNS}
                cols["visit"] = np.empty(0, dtype=np.int64)
            else:
                cols = {}
                for k in LOG_COLUMNS:
                    cols[k] = np.concatenate([c[k] for c in self._chunks])
                cols["visit"] = np.concatenate(
                    [c.get("visit", np.full(len(c["user_id"]), -1, dtype=np.int64)) for c in self._chunks]
                )
            self._cache = cols
        return self._cache

    def visit_histories(self) -> np.ndarray:
        if not self._visit_chunks:
            return np.full((0, self.max_history), -1, dtype=np.int32)
        return np.concatenate(self._visit_chunks)

    def __len__(self):
        return sum(len(c["user_id"]) for c in self._chunks)

    def records(self):
        cols = self.columns()
        for k in range(len(cols["user_id"])):
            yield InteractionRecord(
                int(cols["tick"][k]), int(cols["user_id"][k]), int(cols["item_id"][k]),
                int(cols["position"][k]), bool(cols["visible"][k]), bool(cols["clicked"][k]),
                SOURCE_BY_CODE[int(cols["source"][k])],
            )

    def write_csv(self, path) -> None:
        cols = self.columns()
        names = np.array([s.value for s in SOURCE_BY_CODE.values()])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            rows = zip(
                cols["tick"].tolist(), cols["user_id"].tolist(), cols["item_id"].tolist(),
                cols["position"].tolist(), cols["visible"].astype(int).tolist(),
                cols["clicked"].astype(int).tolist(), names[cols["source"]].tolist(),
            )
            fh.writelines(f"{a},{b},{c},{d},{e},{f},{g}\n" for a, b, c, d, e, f, g in rows)


def read_log_csv(path) -> list[InteractionRecord]:
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOG_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(InteractionRecord(
                int(row["tick"]), int(row["user_id"]), int(row["item_id"]), int(row["position"]),
                bool(int(row["visible"])), bool(int(row["clicked"])), Source(row["source"]),
            ))
    return out
