"""Two-tower retrieval model with an average-pooled user tower.

Items carry free ID embeddings. A user is represented by the mean of the
embeddings of the items in their (truncated) history, so the user tower has no
parameters of its own. Training minimises binary cross-entropy of
``sigmoid(user . item)`` against click labels with per-coordinate AdaGrad.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyHistory, InvalidConfig, UnknownItem


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 128
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 0.1
    optimizer_epsilon: float = 1e-8
    init_scale: float = 0.05
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if int(self.dim) < 1:
            raise InvalidConfig(f"dim must be >= 1, got {self.dim}")
        if int(self.batch_size) < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise InvalidConfig(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.optimizer_epsilon > 0:
            raise InvalidConfig("optimizer_epsilon must be > 0")
        if not self.init_scale > 0:
            raise InvalidConfig("init_scale must be > 0")
        return self


@dataclass(frozen=True)
class UserHistory:
    """Interaction history of one user, most recent item last."""

    user_id: Hashable
    items: tuple = ()
    max_len: int = 50

    def __post_init__(self):
        if self.max_len < 1:
            raise InvalidConfig("max_len must be >= 1")
        items = tuple(self.items)
        if len(items) > self.max_len:
            items = items[-self.max_len:]
        object.__setattr__(self, "items", items)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class TrainingExample:
    user_history: UserHistory
    item_id: Hashable
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if len(self.user_history) == 0:
            raise EmptyHistory(f"user {self.user_history.user_id!r} has an empty history")


@dataclass
class ItemEmbeddingTable:
    """Item vectors plus the AdaGrad gradient-square accumulators.

    ``vectors[k]`` belongs to ``ids[k]``. Tables returned by :func:`train` are
    fresh copies; treat them as read-only.
    """

    ids: list
    vectors: np.ndarray
    accumulators: np.ndarray = None
    _row: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be a (len(ids), dim) array")
        if self.accumulators is None:
            self.accumulators = np.zeros_like(self.vectors)
        else:
            self.accumulators = np.asarray(self.accumulators, dtype=np.float64)
            if self.accumulators.shape != self.vectors.shape:
                raise ValueError("accumulators must match vectors in shape")
        self.ids = list(self.ids)
        self._row = {item_id: k for k, item_id in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ValueError("item ids must be distinct")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return item_id in self._row

    def row(self, item_id) -> int:
        try:
            return self._row[item_id]
        except KeyError:
            raise UnknownItem(item_id) from None

    def rows(self, item_ids: Iterable) -> np.ndarray:
        return np.array([self.row(i) for i in item_ids], dtype=np.int64)

    def vector(self, item_id) -> np.ndarray:
        return self.vectors[self.row(item_id)]

    def copy(self) -> "ItemEmbeddingTable":
        return ItemEmbeddingTable(list(self.ids), self.vectors.copy(), self.accumulators.copy())

    def as_dict(self) -> dict:
        return {item_id: self.vectors[k] for k, item_id in enumerate(self.ids)}


def init_table(item_ids: Sequence, config: TrainConfig) -> ItemEmbeddingTable:
    """Uniform initialisation in ``[-init_scale, init_scale]``, seeded."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    vectors = rng.uniform(-config.init_scale, config.init_scale, size=(len(item_ids), config.dim))
    return ItemEmbeddingTable(list(item_ids), vectors)


def user_embedding(history: UserHistory | Sequence, table: ItemEmbeddingTable) -> np.ndarray:
    items = history.items if isinstance(history, UserHistory) else tuple(history)
    if not items:
        raise EmptyHistory("cannot embed a user with no history")
    return table.vectors[table.rows(items)].mean(axis=0)


def pool_histories(histories: np.ndarray, lengths: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Mean-pool padded history rows (``-1`` padding) into user vectors.

    Rows with zero length come back as zero vectors.
    """
    histories = np.asarray(histories)
    lengths = np.asarray(lengths)
    mask = histories >= 0
    gathered = vectors[np.where(mask, histories, 0)]
    gathered *= mask[..., None]
    summed = gathered.sum(axis=1)
    return summed / np.maximum(lengths, 1)[:, None]


def build_user_embeddings(users: Iterable[UserHistory], table: ItemEmbeddingTable):
    """Embed every user from their history.

    Unknown items are dropped from a history first. Returns ``(vectors, skipped)``
    where ``skipped`` lists users left with nothing to pool.
    """
    out, skipped = {}, []
    for history in users:
        known = [i for i in history.items if i in table]
        if not known:
            skipped.append(history.user_id)
            continue
        out[history.user_id] = table.vectors[table.rows(known)].mean(axis=0)
    return out, skipped


# -- training -----------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def examples_to_arrays(examples: Sequence[TrainingExample], table: ItemEmbeddingTable):
    """Pack examples into ``(histories, lengths, targets, labels)`` row arrays."""
    n = len(examples)
    width = max((len(ex.user_history) for ex in examples), default=1)
    histories = np.full((n, width), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    targets = np.zeros(n, dtype=np.int64)
    labels = np.zeros(n, dtype=np.float64)
    for k, ex in enumerate(examples):
        rows = table.rows(ex.user_history.items)
        histories[k, : len(rows)] = rows
        lengths[k] = len(rows)
        targets[k] = table.row(ex.item_id)
        labels[k] = ex.label
    return histories, lengths, targets, labels


def batch_loss(vectors, histories, lengths, targets, labels) -> float:
    """Mean binary cross-entropy over a batch of packed examples."""
    users = pool_histories(histories, lengths, vectors)
    logits = np.einsum("bd,bd->b", users, vectors[targets])
    return float(np.mean(_log1pexp(logits) - labels * logits))


def batch_gradient(vectors, histories, lengths, targets, labels):
    """Loss and sparse gradient of :func:`batch_loss`.

    Returns ``(loss, rows, grads)`` with ``grads[k]`` the gradient w.r.t.
    ``vectors[rows[k]]``; ``rows`` is sorted and unique.
    """
    b = len(targets)
    users = pool_histories(histories, lengths, vectors)
    items = vectors[targets]
    logits = np.einsum("bd,bd->b", users, items)
    loss = float(np.mean(_log1pexp(logits) - labels * logits))
    coef = (_sigmoid(logits) - labels) / b

    mask = histories >= 0
    hist_coef = (coef / np.maximum(lengths, 1))[:, None] * mask
    flat_rows = np.concatenate([targets, np.where(mask, histories, 0).ravel()])
    # contributions: target rows get coef*u, history rows get coef*v/len
    target_part = coef[:, None] * users
    hist_part = (hist_coef[..., None] * items[:, None, :]).reshape(-1, vectors.shape[1])
    contrib = np.concatenate([target_part, hist_part])
    keep = np.concatenate([np.ones(b, dtype=bool), mask.ravel()])
    flat_rows, contrib = flat_rows[keep], contrib[keep]

    rows, inverse = np.unique(flat_rows, return_inverse=True)
    grads = np.zeros((len(rows), vectors.shape[1]))
    np.add.at(grads, inverse, contrib)
    return loss, rows, grads


def loss_and_gradient(examples: Sequence[TrainingExample], table: ItemEmbeddingTable):
    """Mean BCE over ``examples`` and its dense gradient w.r.t. ``table.vectors``."""
    packed = examples_to_arrays(examples, table)
    loss, rows, grads = batch_gradient(table.vectors, *packed)
    dense = np.zeros_like(table.vectors)
    dense[rows] = grads
    return loss, dense


def train_arrays(histories, lengths, targets, labels, config: TrainConfig,
                 initial: ItemEmbeddingTable, epoch_callback=None) -> ItemEmbeddingTable:
    """Train on pre-packed examples (see :func:`examples_to_arrays`).

    Examples are reshuffled every epoch with a generator seeded from
    ``config.seed``; the last short batch is kept.
    """
    config.validate()
    table = initial.copy()
    vectors, acc = table.vectors, table.accumulators
    n = len(targets)
    if n == 0 or config.epochs == 0:
        return table
    if np.any(lengths < 1):
        raise EmptyHistory("training examples need a non-empty history")
    # padding must trail the real entries so batches can be cut to their widest row
    histories = np.asarray(histories)
    if histories.shape[1] and np.any((histories[:, 1:] >= 0) & (histories[:, :-1] < 0)):
        raise ValueError("history rows must be left-aligned with -1 padding after the items")
    rng = np.random.default_rng([config.seed, 1])
    lr, eps, bs = config.learning_rate, config.optimizer_epsilon, config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            width = int(lengths[sel].max())
            _, rows, grads = batch_gradient(vectors, histories[sel, :width], lengths[sel],
                                            targets[sel], labels[sel])
            acc[rows] += grads * grads
            vectors[rows] -= lr * grads / (np.sqrt(acc[rows]) + eps)
        if epoch_callback is not None:
            epoch_callback(epoch, table)
    return table


def train(examples: Sequence[TrainingExample], config: TrainConfig,
          initial: ItemEmbeddingTable | None = None, epoch_callback=None) -> ItemEmbeddingTable:
    """Fit item embeddings on click / visible-not-clicked examples.

    Without ``initial`` a fresh table is drawn over every item id that occurs
    in ``examples`` (sorted ids when they are mutually comparable).
    """
    config.validate()
    if initial is None:
        seen = {}
        for ex in examples:
            for i in ex.user_history.items:
                seen.setdefault(i, None)
            seen.setdefault(ex.item_id, None)
        ids = list(seen)
        try:
            ids = sorted(ids)
        except TypeError:
            pass
        initial = init_table(ids, config)
    if initial.dim != config.dim:
        raise InvalidConfig(f"initial table has dim {initial.dim}, config says {config.dim}")
    if not examples:
        return initial.copy()
    packed = examples_to_arrays(examples, initial)
    return train_arrays(*packed, config=config, initial=initial, epoch_callback=epoch_callback)


# -- persistence --------------------------------------------------------------


def _parse_id(token: str):
    try:
        return int(token)
    except ValueError:
        return token


def save_table(path, table: ItemEmbeddingTable) -> None:
    """Write ``dim=<d>`` then one ``item_id,v1,...,vd`` row per item."""
    lines = [f"dim={table.dim}"]
    for item_id, vec in zip(table.ids, table.vectors):
        lines.append(",".join([str(item_id)] + [repr(float(x)) for x in vec]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path) -> ItemEmbeddingTable:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("dim="):
        raise ValueError(f"{path}: missing 'dim=<d>' header")
    dim = int(text[0][4:])
    ids, rows = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
        ids.append(_parse_id(parts[0]))
        rows.append([float(x) for x in parts[1:]])
    vectors = np.array(rows, dtype=np.float64).reshape(len(ids), dim)
    if not np.all(np.isfinite(vectors)):
        raise ValueError(f"{path}: non-finite coordinate")
    return ItemEmbeddingTable(ids, vectors)


def table_from_mapping(entries: Mapping, accumulators: Mapping | None = None) -> ItemEmbeddingTable:
    ids = list(entries)
    vectors = np.array([np.asarray(entries[i], dtype=np.float64) for i in ids])
    if vectors.ndim != 2:
        raise ValueError("all vectors must share one dimensionality")
    acc = None
    if accumulators is not None:
        acc = np.array([np.asarray(accumulators[i], dtype=np.float64) for i in ids])
    return ItemEmbeddingTable(ids, vectors, acc)
