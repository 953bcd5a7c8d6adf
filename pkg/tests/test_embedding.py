import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invr_lab.embedding import (
    ItemEmbeddingTable,
    TrainConfig,
    TrainingExample,
    UserHistory,
    batch_gradient,
    build_user_embeddings,
    examples_to_arrays,
    init_table,
    load_table,
    loss_and_gradient,
    save_table,
    table_from_mapping,
    train,
    user_embedding,
)
from invr_lab.errors import EmptyHistory, InvalidConfig, UnknownItem

from oracles import bce_loss_py, central_difference


def ex(hist, item, label, user=0):
    return TrainingExample(UserHistory(user, tuple(hist)), item, label)


# -- config and types -------------------------------------------------------------


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.dim, c.batch_size, c.epochs, c.learning_rate) == (128, 128, 10, 0.1)
    assert c.optimizer_epsilon == 1e-8 and c.init_scale == 0.05


@pytest.mark.parametrize("kw", [dict(dim=0), dict(epochs=-1), dict(learning_rate=0.0), dict(batch_size=0)])
def test_train_config_rejects(kw):
    with pytest.raises(InvalidConfig):
        TrainConfig(**kw).validate()


def test_history_truncates_to_most_recent():
    h = UserHistory("u", tuple(range(10)), max_len=3)
    assert h.items == (7, 8, 9)


def test_example_label_and_history_checked():
    with pytest.raises(ValueError):
        ex([1], 2, 2)
    with pytest.raises(EmptyHistory):
        ex([], 2, 1)


def test_init_is_uniform_within_scale_and_seeded():
    cfg = TrainConfig(dim=6, init_scale=0.05, seed=3)
    a, b = init_table(range(50), cfg), init_table(range(50), cfg)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.all(np.abs(a.vectors) <= 0.05)
    assert np.all(a.accumulators == 0)


# -- user embedding ---------------------------------------------------------------


def test_user_embedding_single_item_is_identity():
    t = table_from_mapping({"i": (0.2, -0.4)})
    assert np.array_equal(user_embedding(UserHistory("u", ("i",)), t), [0.2, -0.4])


def test_user_embedding_mean_of_two():
    t = table_from_mapping({"i": (1.0, 0.0), "j": (0.0, 1.0)})
    assert np.array_equal(user_embedding(UserHistory("u", ("i", "j")), t), [0.5, 0.5])


def test_user_embedding_duplicates_count_per_occurrence():
    t = table_from_mapping({"i": (3.0, 0.0), "j": (0.0, 3.0)})
    assert np.array_equal(user_embedding(UserHistory("u", ("i", "i", "j")), t), [2.0, 1.0])


def test_user_embedding_errors():
    t = table_from_mapping({"i": (1.0, 0.0)})
    with pytest.raises(EmptyHistory):
        user_embedding(UserHistory("u", ()), t)
    with pytest.raises(UnknownItem):
        user_embedding(UserHistory("u", ("zz",)), t)


def test_build_user_embeddings_sizes_and_skips():
    t = table_from_mapping({"i": (1.0, 0.0), "j": (0.0, 1.0)})
    users = [UserHistory("a", ("i", "j")), UserHistory("b", ("j",)), UserHistory("c", ("x", "y"))]
    vecs, skipped = build_user_embeddings(users, t)
    assert sorted(vecs) == ["a", "b"]
    assert skipped == ["c"]
    assert np.array_equal(vecs["a"], user_embedding(UserHistory("a", ("i", "j")), t))


def test_build_user_embeddings_drops_unknown_items():
    t = table_from_mapping({"i": (1.0, 0.0), "j": (0.0, 1.0)})
    vecs, _ = build_user_embeddings([UserHistory("a", ("i", "nope", "j"))], t)
    assert np.array_equal(vecs["a"], [0.5, 0.5])


@given(st.lists(st.integers(0, 9), min_size=1, max_size=8), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_activity_independence(recent, extra):
    """Same truncated history, different activity volume: same embedding."""
    t = init_table(range(10), TrainConfig(dim=4, seed=1))
    light = UserHistory("light", tuple(recent), max_len=8)
    heavy = UserHistory("heavy", tuple([0] * extra + list(recent)), max_len=len(recent))
    assert np.array_equal(user_embedding(light, t), user_embedding(heavy, t))


# -- gradient ---------------------------------------------------------------------


def _fd_check(rng, dim, n_items, n_examples):
    ids = list(range(n_items))
    table = ItemEmbeddingTable(ids, rng.normal(scale=0.5, size=(n_items, dim)))
    examples = []
    for _ in range(n_examples):
        h = rng.integers(0, n_items, size=rng.integers(1, 5)).tolist()
        examples.append((h, int(rng.integers(0, n_items)), int(rng.integers(0, 2))))
    objs = [ex(h, i, y) for h, i, y in examples]
    _, grad = loss_and_gradient(objs, table)

    flat = table.vectors.ravel().tolist()

    def f(x):
        vecs = {k: x[k * dim:(k + 1) * dim] for k in ids}
        return bce_loss_py(vecs, examples)

    fd = np.array(central_difference(f, flat)).reshape(grad.shape)
    return grad, fd


def test_single_example_gradient_matches_finite_differences_dim4():
    rng = np.random.default_rng(11)
    table = ItemEmbeddingTable([0, 1], rng.normal(size=(2, 4)))
    _, grad = loss_and_gradient([ex([0], 1, 1)], table)
    flat = table.vectors.ravel().tolist()
    fd = np.array(central_difference(lambda x: bce_loss_py({0: x[:4], 1: x[4:]}, [([0], 1, 1)]), flat))
    err = np.linalg.norm(grad.ravel() - fd) / max(np.linalg.norm(fd), 1e-12)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    grad, fd = _fd_check(rng, dim=int(rng.integers(1, 9)), n_items=6, n_examples=7)
    err = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
    assert err < 1e-4


def test_loss_matches_python_oracle():
    rng = np.random.default_rng(2)
    table = ItemEmbeddingTable(list(range(5)), rng.normal(size=(5, 3)))
    raw = [([0, 1], 2, 1), ([3], 4, 0), ([2, 2, 4], 0, 1)]
    loss, _ = loss_and_gradient([ex(h, i, y) for h, i, y in raw], table)
    assert loss == pytest.approx(bce_loss_py({k: table.vectors[k].tolist() for k in range(5)}, raw), rel=1e-12)


def test_sparse_gradient_rows_sorted_unique():
    rng = np.random.default_rng(0)
    table = ItemEmbeddingTable(list(range(8)), rng.normal(size=(8, 3)))
    packed = examples_to_arrays([ex([1, 1, 5], 2, 1), ex([5], 7, 0)], table)
    _, rows, grads = batch_gradient(table.vectors, *packed)
    assert rows.tolist() == [1, 2, 5, 7]
    assert grads.shape == (4, 3)


# -- training ---------------------------------------------------------------------


def test_train_without_examples_returns_initial():
    init = init_table(range(4), TrainConfig(dim=3))
    out = train([], TrainConfig(dim=3, epochs=10), initial=init)
    assert np.array_equal(out.vectors, init.vectors)
    assert np.array_equal(out.accumulators, init.accumulators)


def test_repeated_positive_raises_dot_and_loss_never_increases():
    cfg = TrainConfig(dim=4, epochs=1, batch_size=4, learning_rate=0.05, seed=5)
    init = init_table(["i", "j"], cfg)
    examples = [ex(["i"], "j", 1)] * 8
    dot0 = float(init.vector("i") @ init.vector("j"))
    losses, table = [], init
    for _ in range(10):
        table = train(examples, cfg, initial=table)
        losses.append(loss_and_gradient(examples, table)[0])
    assert float(table.vector("i") @ table.vector("j")) > dot0
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_loss_non_increasing_on_separable_toy_set():
    cfg = TrainConfig(dim=4, epochs=1, batch_size=64, learning_rate=0.02, seed=2)
    examples = [ex([0], 1, 1), ex([2], 3, 1), ex([0], 3, 0), ex([2], 1, 0)] * 5
    table = init_table(range(4), cfg)
    losses = [loss_and_gradient(examples, table)[0]]
    for _ in range(15):
        table = train(examples, cfg, initial=table)
        losses.append(loss_and_gradient(examples, table)[0])
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_epoch_callback_sees_each_epoch():
    cfg = TrainConfig(dim=2, epochs=3, batch_size=1)
    seen = []
    train([ex([0], 1, 1), ex([1], 0, 0)], cfg, epoch_callback=lambda e, t: seen.append(e))
    assert seen == [0, 1, 2]


def test_training_is_bit_deterministic():
    cfg = TrainConfig(dim=5, epochs=3, batch_size=3, seed=9)
    rng = np.random.default_rng(4)
    examples = [ex(rng.integers(0, 12, size=3).tolist(), int(rng.integers(0, 12)), int(rng.integers(0, 2)))
                for _ in range(20)]
    a, b = train(examples, cfg), train(examples, cfg)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    assert a.accumulators.tobytes() == b.accumulators.tobytes()


def test_last_short_batch_is_used():
    """With batch_size larger than half the data the tail batch still updates its rows."""
    cfg = TrainConfig(dim=2, epochs=1, batch_size=3, seed=0)
    examples = [ex([0], 1, 1)] * 3 + [ex([2], 3, 1)]
    init = init_table(range(4), cfg)
    out = train(examples, cfg, initial=init)
    assert not np.array_equal(out.vector(3), init.vector(3))


def test_accumulators_nonnegative_and_finite():
    cfg = TrainConfig(dim=3, epochs=4, batch_size=2)
    out = train([ex([0, 1], 2, 1), ex([2], 0, 0), ex([1], 1, 1)], cfg)
    assert np.all(out.accumulators >= 0)
    assert np.all(np.isfinite(out.vectors))


def test_train_rejects_dim_mismatch_and_unknown_items():
    with pytest.raises(InvalidConfig):
        train([ex([0], 1, 1)], TrainConfig(dim=3), initial=init_table(range(2), TrainConfig(dim=2)))
    with pytest.raises(UnknownItem):
        train([ex([0], 9, 1)], TrainConfig(dim=2), initial=init_table(range(2), TrainConfig(dim=2)))


# -- persistence ------------------------------------------------------------------


def test_table_text_round_trip(tmp_path):
    t = init_table(range(5), TrainConfig(dim=3, seed=4))
    save_table(tmp_path / "t.txt", t)
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert lines[0] == "dim=3"
    assert lines[1].startswith("0,") and len(lines[1].split(",")) == 4
    back = load_table(tmp_path / "t.txt")
    assert back.ids == t.ids
    assert np.array_equal(back.vectors, t.vectors)
