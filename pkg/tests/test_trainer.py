import math

import numpy as np
import pytest

import ngat.trainer as trainer_mod
from helpers import bpr_mf_reference, train_only_graph
from ngat.graph import SplitSpec, split
from ngat.model import ModelConfig, init_embeddings
from ngat.sampler import SamplerConfig
from ngat.trainer import (
    MiniBatch,
    TrainConfig,
    adam_step,
    bpr_loss,
    l2_penalty,
    loss_and_gradients,
    sample_batches,
    sample_negatives,
    train,
)


def _block_graph(seed=0, users=30, items=30, p=0.4):
    rng = np.random.default_rng(seed)
    edges = np.argwhere(rng.random((users, items)) < p)
    return split(edges, SplitSpec(rng_seed=seed))


class TestNegatives:
    def test_two_items_forces_the_other(self):
        g = train_only_graph(np.array([0]), np.array([0]), 1, 2)
        neg = sample_negatives(g, np.zeros(50, np.int64), np.random.default_rng(0))
        assert (neg == 1).all()

    def test_uniform_over_non_owned(self):
        g = train_only_graph(np.array([0, 0]), np.array([3, 7]), 1, 10)
        neg = sample_negatives(g, np.zeros(100_000, np.int64), np.random.default_rng(1))
        freq = np.bincount(neg, minlength=10) / len(neg)
        assert freq[3] == 0 and freq[7] == 0
        others = np.delete(freq, [3, 7])
        assert np.all(np.abs(others - 0.125) < 0.01)

    def test_user_owning_everything_is_skipped(self):
        g = train_only_graph(np.array([0, 0, 1]), np.array([0, 1, 0]), 2, 2)
        with pytest.warns(UserWarning, match="own every item"):
            batches = list(sample_batches(g, 10, np.random.default_rng(0)))
        users = np.concatenate([b.users for b in batches])
        assert users.tolist() == [1]

    def test_epoch_covers_each_edge_once(self):
        g = _block_graph(2)
        batches = list(sample_batches(g, 37, np.random.default_rng(5)))
        assert all(len(b) <= 37 for b in batches)
        pairs = [(int(u), int(i)) for b in batches for u, i in zip(b.users, b.pos)]
        assert len(pairs) == g.num_train_edges
        assert set(pairs) == {tuple(e) for e in g.train_edges().tolist()}
        for b in batches:
            for u, j in zip(b.users, b.neg):
                assert j not in set(g.train_adj_user[u].tolist())


class TestLoss:
    def test_equal_scores_give_ln2(self):
        assert bpr_loss(np.zeros(5), np.zeros(5)) == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin_goes_to_zero(self):
        assert bpr_loss(np.array([60.0]), np.array([0.0])) < 1e-20

    def test_matches_straight_line_formula(self):
        rng = np.random.default_rng(0)
        pos, neg = rng.normal(size=7), rng.normal(size=7)
        lam, theta = 3e-3, 2.5
        ref = sum(-math.log(1 / (1 + math.exp(-(p - n)))) for p, n in zip(pos, neg)) / 7 + lam * theta
        assert abs(bpr_loss(pos, neg, lam, theta) - ref) < 1e-12
        lit = sum(-math.log(1 + math.exp(p - n)) for p, n in zip(pos, neg)) / 7 + lam * theta
        assert abs(bpr_loss(pos, neg, lam, theta, "paper_literal") - lit) < 1e-12

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            bpr_loss(np.zeros(1), np.zeros(1), loss_form="hinge")

    def test_l2_counts_each_touched_row_once(self):
        table = init_embeddings(3, 4, 2, 0, "float64")
        batch = MiniBatch(np.array([0, 0]), np.array([1, 1]), np.array([2, 1]))
        ref = sum(float(table.user_rows[0] @ table.user_rows[0]) for _ in [0])
        ref += sum(float(table.item_rows[i] @ table.item_rows[i]) for i in (1, 2))
        assert l2_penalty(table, batch) == pytest.approx(ref, rel=1e-14)


class TestAdam:
    def test_zero_gradient_rows_untouched(self):
        table = init_embeddings(4, 3, 2, 0, "float64")
        grads = trainer_mod.Gradients(np.zeros((4, 2)), np.zeros((3, 2)), {})
        grads.user[1] = [0.5, -0.5]
        before = table.copy()
        adam_step(table, grads, 0.01)
        adam_step(table, trainer_mod.Gradients(np.zeros((4, 2)), np.zeros((3, 2)), {}), 0.01)
        for name in ("user_rows", "user_m", "user_v"):
            a, b = getattr(table, name), getattr(before, name)
            assert np.array_equal(np.delete(a, 1, 0), np.delete(b, 1, 0))
        assert np.array_equal(table.item_rows, before.item_rows)
        assert np.array_equal(table.item_m, before.item_m) and np.array_equal(table.item_v, before.item_v)
        assert table.step == 2

    def test_first_step_magnitude_is_lr(self):
        table = init_embeddings(1, 1, 3, 0, "float64")
        before = table.user_rows.copy()
        g = np.array([[2.0, -0.3, 1e-3]])
        adam_step(table, trainer_mod.Gradients(g, np.zeros((1, 3)), {}), 0.01)
        np.testing.assert_allclose(before - table.user_rows, 0.01 * np.sign(g), rtol=1e-4)

    def test_scalar_quadratic_converges(self):
        table = init_embeddings(1, 1, 1, 0, "float64")
        table.user_rows[:] = 0.0
        for _ in range(5000):
            x = table.user_rows[0, 0]
            g = np.array([[2 * (x - 3)]])
            if g[0, 0] == 0:
                break
            adam_step(table, trainer_mod.Gradients(g, np.zeros((1, 1)), {}), 0.01)
        assert abs(table.user_rows[0, 0] - 3) < 1e-3

    def test_shape_mismatch(self):
        table = init_embeddings(2, 2, 2, 0)
        with pytest.raises(ValueError):
            adam_step(table, trainer_mod.Gradients(np.zeros((3, 2)), np.zeros((2, 2)), {}), 0.1)


def test_sparse_update_locality():
    # two disconnected components; a batch inside the first must not move the second
    a = [(u, i) for u in range(3) for i in range(3)]
    b = [(u + 3, i + 3) for u in range(3) for i in range(2)]
    u, i = np.array(a + b).T
    g = train_only_graph(u, i, 6, 5)
    cfg = ModelConfig(4, 2, "ngat", dtype="float64")
    table = init_embeddings(6, 5, 4, 1, "float64")
    before = table.copy()
    batch = MiniBatch(np.array([0, 1]), np.array([0, 2]), np.array([1, 1]))
    adj = [(g.train_adj_user, g.train_adj_item)] * 2
    _, grads = loss_and_gradients(table, adj, batch, cfg, 1e-3)
    assert not grads.user[3:].any() and not grads.item[3:].any()
    adam_step(table, grads, 0.05)
    assert np.array_equal(table.user_rows[3:], before.user_rows[3:])
    assert np.array_equal(table.item_rows[3:], before.item_rows[3:])
    assert not np.array_equal(table.user_rows[:3], before.user_rows[:3])


class TestTrain:
    def test_zero_epochs_returns_initial(self):
        g = _block_graph()
        cfg = ModelConfig(8, 1)
        res = train(g, cfg, TrainConfig(max_epochs=0, rng_seed=4))
        assert res.history == []
        init = init_embeddings(g.num_users, g.num_items, 8, 4)
        assert np.array_equal(res.checkpoint.table.user_rows, init.user_rows)
        assert np.array_equal(res.checkpoint.table.item_rows, init.item_rows)

    def test_deterministic(self):
        g = _block_graph(1)
        cfg = ModelConfig(8, 2)
        tc = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=4, eval_every=2, rng_seed=3)
        sc = SamplerConfig((4, 4), 3)
        a, b = train(g, cfg, tc, sc), train(g, cfg, tc, sc)
        assert a.history == b.history and a.epoch_losses == b.epoch_losses
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
        assert a.final_checkpoint.to_bytes() == b.final_checkpoint.to_bytes()

    def test_history_schema_and_callback(self):
        g = _block_graph(1)
        seen = []
        res = train(g, ModelConfig(8, 1), TrainConfig(batch_size=128, max_epochs=4, eval_every=2),
                    on_evaluation=seen.append)
        assert [h["epoch"] for h in res.history] == [2, 4]
        assert seen == res.history
        assert set(res.history[0]) == {"epoch", "train_loss", "val_recall20", "val_ndcg20", "wall_seconds"}
        assert res.history[0]["wall_seconds"] is None
        assert len(res.epoch_losses) == 4

    def test_early_stop_after_patience(self, monkeypatch):
        monkeypatch.setattr(trainer_mod, "adam_step", lambda table, *a, **k: table)
        g = _block_graph(2)
        res = train(g, ModelConfig(8, 1), TrainConfig(batch_size=256, max_epochs=100, eval_every=2,
                                                     early_stop_patience=3))
        assert res.stopped_early
        assert len(res.history) == 3
        assert res.history[-1]["epoch"] == 6
        assert res.best_epoch == 0

    def test_debug_mode_checks_negatives(self):
        g = _block_graph(3)
        res = train(g, ModelConfig(4, 1), TrainConfig(batch_size=64, max_epochs=2, eval_every=1, debug=True))
        assert len(res.history) == 2

    def test_sampler_hops_must_match_layers(self):
        g = _block_graph()
        with pytest.raises(ValueError, match="hop caps"):
            train(g, ModelConfig(4, 2), TrainConfig(max_epochs=1), SamplerConfig((3,)))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(loss_form="mse")

    def test_loss_decreases_on_small_graph(self):
        g = _block_graph(4, 40, 40, 0.3)
        res = train(g, ModelConfig(16, 1), TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=10,
                                                      eval_every=10))
        assert res.epoch_losses[-1] < res.epoch_losses[0]


@pytest.mark.filterwarnings("error")
def test_zero_layers_reproduces_bpr_mf():
    rng = np.random.default_rng(8)
    hit = rng.random((12, 10)) < 0.4
    hit[:, 0], hit[np.arange(12), np.arange(12) % 9 + 1] = False, True
    g = train_only_graph(*np.nonzero(hit), 12, 10)
    res = train(g, ModelConfig(4, 0, dtype="float64"),
                TrainConfig(learning_rate=0.01, batch_size=7, l2_lambda=1e-3, max_epochs=3, eval_every=10,
                            rng_seed=2))
    P, Q = bpr_mf_reference(g, 4, 2, 0.01, 7, 1e-3, 3)
    np.testing.assert_allclose(res.final_checkpoint.table.user_rows, P, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.final_checkpoint.table.item_rows, Q, rtol=0, atol=1e-12)
