import math

import numpy as np
import pytest

from cali3f.data import ClientShard
from cali3f.models import (
    GradientBlocks,
    SparseRows,
    StructureError,
    TrainConfig,
    VARIANTS,
    forward,
    init_model,
    load_params,
    local_train,
    loss_and_grad,
    merge_blocks,
    predict,
    save_params,
    sgd_step,
    split_blocks,
)
from oracles import analytic, finite_difference, max_relative_error, random_instance


def zeros_like(params):
    out = params.copy()
    for block in split_blocks(out):
        for v in block.values():
            v[...] = 0.0
    return out


class TestInit:
    def test_deterministic(self):
        a = init_model("neumf", 5, 7, TrainConfig(init_seed=3))
        b = init_model("neumf", 5, 7, TrainConfig(init_seed=3))
        for x, y in zip(split_blocks(a), split_blocks(b)):
            for k in x:
                assert np.array_equal(x[k], y[k])

    def test_gmf_dense_block(self):
        p = init_model("gmf", 3, 4, TrainConfig(embedding_dim=8))
        assert set(p.dense) == {"out_w", "out_b"}
        assert p.dense["out_w"].shape == (8,) and p.dense["out_b"].shape == (1,)

    def test_neumf_shapes(self):
        p = init_model("neumf", 3, 4, TrainConfig(embedding_dim=8, mlp_widths=(16, 8)))
        assert p.dense["W0"].shape == (16, 16)
        assert p.dense["W1"].shape == (16, 8)
        assert p.dense["out_w"].shape == (16,)
        assert predict(p, [0, 1], [2, 3]).shape == (2,)

    def test_user_rows(self):
        p = init_model("neumf", 6, 4, TrainConfig())
        u, _, _ = split_blocks(p)
        assert len(u) == 2 and all(v.shape[0] == 6 for v in u.values())

    def test_partition_counts(self):
        p = init_model("neumf", 6, 4, TrainConfig())
        counts = p.num_parameters()
        total = sum(v.size for blk in split_blocks(p) for v in blk.values())
        assert counts["user"] + counts["item"] + counts["dense"] == total

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            init_model("svd", 3, 3, TrainConfig())


class TestForward:
    def test_zero_params(self):
        for v in VARIANTS:
            assert forward(zeros_like(init_model(v, 2, 2, TrainConfig())), 0, 1) == 0.5

    def test_gmf_hand(self):
        p = zeros_like(init_model("gmf", 1, 1, TrainConfig(embedding_dim=8)))
        p.user["gmf"][0, 0] = 1.0
        p.item["gmf"][0, 0] = 1.0
        p.dense["out_w"][:] = 1.0
        assert forward(p, 0, 0) == pytest.approx(0.7310585786, abs=1e-9)

    def test_flip_sign(self):
        p = init_model("gmf", 2, 3, TrainConfig(init_seed=1))
        p.dense["out_w"] *= 50
        s = forward(p, 1, 2)
        p.dense["out_w"] *= -1
        assert forward(p, 1, 2) == pytest.approx(1 - s, abs=1e-15)

    def test_out_of_range(self):
        p = init_model("gmf", 2, 3, TrainConfig())
        with pytest.raises(IndexError):
            forward(p, 2, 0)


class TestLoss:
    def test_half(self):
        p = zeros_like(init_model("gmf", 1, 1, TrainConfig()))
        loss, _ = loss_and_grad(p, [0], [0], [1.0])
        assert loss == pytest.approx(math.log(2))

    def test_confident_wrong(self):
        p = zeros_like(init_model("gmf", 1, 1, TrainConfig()))
        p.dense["out_b"][0] = math.log(9)  # sigmoid = 0.9
        loss, _ = loss_and_grad(p, [0], [0], [0.0])
        assert loss == pytest.approx(2.302585, abs=1e-6)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_finite_difference_3x3(self, variant):
        params, users, items, labels = random_instance(variant, 3, 3, seed=11)
        assert max_relative_error(analytic(params, users, items, labels),
                                  finite_difference(params, users, items, labels)) < 1e-4

    def test_clamped_is_zero_loss_and_grad(self):
        p = zeros_like(init_model("gmf", 1, 1, TrainConfig()))
        p.dense["out_b"][0] = 40.0
        loss, g = loss_and_grad(p, [0], [0], [1.0])
        assert loss == pytest.approx(-math.log(1 - 1e-7))
        assert g.dense["out_b"][0] == 0.0

    def test_nonnegative(self):
        params, users, items, labels = random_instance("neumf", seed=5, scale=3.0)
        assert loss_and_grad(params, users, items, labels)[0] >= 0


class TestSGD:
    def _grads(self, p, value):
        return GradientBlocks({k: SparseRows(np.array([0]), np.full((1, p.dim), value)) for k in p.user},
                              {k: SparseRows(np.array([0]), np.full((1, p.dim), value)) for k in p.item},
                              {k: np.full_like(v, value) for k, v in p.dense.items()})

    def test_zero_lr(self):
        p = init_model("neumf", 2, 2, TrainConfig())
        q = sgd_step(p, self._grads(p, 0.7), 0.0)
        assert all(np.array_equal(p.dense[k], q.dense[k]) for k in p.dense)

    def test_scalar(self):
        p = init_model("gmf", 1, 1, TrainConfig(embedding_dim=1))
        p.dense["out_b"][0] = 1.0
        q = sgd_step(p, self._grads(p, 0.5), 0.1)
        assert q.dense["out_b"][0] == pytest.approx(0.95)

    def test_two_steps_equal_double(self):
        p = init_model("neumf", 2, 2, TrainConfig())
        g = self._grads(p, 0.25)
        a = sgd_step(sgd_step(p, g, 0.1), g, 0.1)
        b = sgd_step(p, g, 0.2)
        for x, y in zip(split_blocks(a), split_blocks(b)):
            for k in x:
                np.testing.assert_allclose(x[k], y[k], atol=1e-15)

    def test_structure_mismatch(self):
        p = init_model("gmf", 2, 2, TrainConfig())
        q = init_model("neumf", 2, 2, TrainConfig())
        with pytest.raises(StructureError):
            sgd_step(p, self._grads(q, 0.1), 0.1)


class TestLocalTrain:
    shard = ClientShard(1, np.array([0, 2, 3]), test_item=4)

    def test_zero_lr(self):
        p = init_model("neumf", 3, 12, TrainConfig())
        d = local_train(self.shard, p, TrainConfig(lr=0.0), 0)
        assert all(not np.any(v) for v in d.delta.dense.values())
        assert d.touched_items == set()

    def test_single_step(self):
        shard = ClientShard(0, np.array([2]), test_item=None)
        cfg = TrainConfig(lr=0.3, local_epochs=1, neg_ratio=0)
        p = init_model("neumf", 1, 5, cfg)
        d = local_train(shard, p, cfg, 0)
        _, g = loss_and_grad(p, [0], [2], [1.0])
        for k in p.dense:
            np.testing.assert_allclose(d.delta.dense[k], 0.3 * g.dense[k], atol=1e-15)
        np.testing.assert_allclose(d.delta.item["mlp"].values, 0.3 * g.item["mlp"].values, atol=1e-15)

    def test_locality_and_reproducibility(self):
        cfg = TrainConfig(lr=0.5, local_epochs=3, batch_size=4)
        p = init_model("neumf", 3, 40, cfg)
        a = local_train(self.shard, p, cfg, 9)
        b = local_train(self.shard, p, cfg, 9)
        assert a.touched_items and a.delta.touched_users == {1}
        assert not a.touched_items & {4}
        for k in p.dense:
            assert np.array_equal(a.delta.dense[k], b.delta.dense[k])
        assert a.num_instances == 15


def test_split_merge_identity():
    p = init_model("neumf", 3, 3, TrainConfig())
    q = merge_blocks(p, *split_blocks(p))
    for x, y in zip(split_blocks(p), split_blocks(q)):
        assert x is y


def test_checkpoint_round_trip(tmp_path):
    p = init_model("mlp", 3, 4, TrainConfig(init_seed=2))
    save_params(tmp_path / "m.npz", p)
    q = load_params(tmp_path / "m.npz")
    assert q.variant == "mlp" and q.mlp_widths == p.mlp_widths
    for x, y in zip(split_blocks(p), split_blocks(q)):
        for k in x:
            assert np.array_equal(x[k], y[k])
