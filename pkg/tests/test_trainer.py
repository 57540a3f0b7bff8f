import math

import numpy as np
import pytest

from gnnmerge.engine import ARCHS, GnnModel, LayerSpec, forward, init_model
from gnnmerge.errors import ConfigurationError, NumericError
from gnnmerge.evaluation import accuracy
from gnnmerge.graph import EdgeSplit, NodeSplit, generate_sbm, link_split, node_split
from gnnmerge.trainer import (
    LINK,
    NODE,
    TaskSpec,
    TrainConfig,
    grad_check,
    load_task,
    loss_and_grad,
    model_parameters,
    save_task,
    task_loss,
    train,
)


@pytest.fixture(scope="module")
def two_block():
    g = generate_sbm(2, 40, 0.3, 0.02, 4, 0.3, seed=5)
    return g, TaskSpec("nc", NODE, node_split(g, 0), 2)


@pytest.fixture(scope="module")
def link_task():
    g = generate_sbm(2, 20, 0.3, 0.05, 4, 0.3, seed=6).without_labels()
    return g, TaskSpec("lp", LINK, link_split(g, 0))


def central_differences(model, graph, task, h=1e-5):
    """Full numeric gradient, one coordinate at a time."""
    out = []
    for _, p in model_parameters(model):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            plus = task_loss(model, graph, task)
            p[idx] = orig - h
            minus = task_loss(model, graph, task)
            p[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        out.append(g)
    return out


class TestTaskSpec:
    def test_kind_must_match_split(self):
        with pytest.raises(ConfigurationError):
            TaskSpec("x", NODE, EdgeSplit(*[np.zeros((0, 2), dtype=np.int64)] * 6))
        with pytest.raises(ConfigurationError):
            TaskSpec("x", LINK, NodeSplit(np.arange(2), np.arange(0), np.arange(0)))

    def test_json_round_trip(self, tmp_path, two_block, link_task):
        for _, task in (two_block, link_task):
            save_task(task, tmp_path / "t.json", "g.gnmg")
            back, graph_path = load_task(tmp_path / "t.json")
            assert back.to_json("g.gnmg") == task.to_json("g.gnmg")
            assert graph_path == str(tmp_path / "g.gnmg")


class TestLoss:
    def test_zero_model_is_ln2(self, two_block):
        g, task = two_block
        m = init_model("GCN", g.feature_dim, 8, 2, {"nc": ("node", 2)}, seed=0)
        m.heads["nc"][:] = 0.0
        assert task_loss(m, g, task) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_logits(self, two_block):
        g, task = two_block
        onehot = np.eye(2)[g.labels] * 20.0
        m = GnnModel([], {"nc": np.eye(2)}, {"nc": "node"}, {"arch": "GCN"})
        assert task_loss(m, g.with_features(onehot), task) <= 0.01

    def test_nan_names_tensor(self, two_block):
        g, task = two_block
        m = init_model("GCN", g.feature_dim, 8, 2, {"nc": ("node", 2)}, seed=0)
        m.layers[0].weights[0][0, 0] = np.nan
        with pytest.raises(NumericError, match="layer0.W0"):
            loss_and_grad(m, g, task)

    def test_grads_cover_every_tensor(self, two_block):
        g, task = two_block
        m = init_model("GAT", g.feature_dim, 6, 2, {"nc": ("node", 2)}, seed=0)
        _, grads = loss_and_grad(m, g, task)
        shapes = [p.shape for _, p in model_parameters(m)]
        assert [x.shape for x in grads] == shapes
        assert len(shapes) == 2 * 2 + 1

    @pytest.mark.parametrize("arch", ARCHS)
    def test_full_finite_difference_node(self, arch):
        g = generate_sbm(2, 6, 0.5, 0.2, 3, 0.5, seed=1)
        task = TaskSpec("nc", NODE, node_split(g, 0), 2)
        m = init_model(arch, 3, 4, 2, {"nc": ("node", 2)}, seed=3)
        _, grads = loss_and_grad(m, g, task)
        numeric = central_differences(m, g, task)
        for a, n in zip(grads, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)

    def test_full_finite_difference_link(self, link_task):
        g, task = link_task
        m = init_model("SAGE", g.feature_dim, 4, 2, {"lp": ("link", 4)}, seed=2)
        _, grads = loss_and_grad(m, g, task)
        for a, n in zip(grads, central_differences(m, g, task)):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)


class TestGradCheck:
    def test_linear_model(self, two_block):
        g, task = two_block
        m = init_model("GCN", g.feature_dim, 8, 1, {"nc": ("node", 2)}, seed=1)
        assert m.layers[0].activation == "identity"
        assert grad_check(m, g, task, num_coords=50, seed=0) <= 1e-7

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("kind", [NODE, LINK])
    @pytest.mark.parametrize("seed", range(5))
    def test_all_architectures(self, arch, kind, seed):
        g = generate_sbm(2, 20, 0.15, 0.02, 4, 0.3, seed=seed)
        if kind == NODE:
            task, out = TaskSpec("t", NODE, node_split(g, seed), 2), 2
        else:
            g = g.without_labels()
            task, out = TaskSpec("t", LINK, link_split(g, seed)), 8
        m = init_model(arch, g.feature_dim, 8, 2, {"t": (kind, out)}, seed=100 + seed)
        assert grad_check(m, g, task, num_coords=50, seed=seed) <= 1e-4

    def test_tiny_gradients_agree_to_noise_floor(self, two_block):
        # Degree-13 GIN sums give logits near 50; gradients of ~1e-8 on nearly
        # dead units then sit below what a 1e-5 central difference resolves.
        g, task = two_block
        m = init_model("GIN", g.feature_dim, 8, 2, {"nc": ("node", 2)}, seed=7)
        _, grads = loss_and_grad(m, g, task)
        numeric = central_differences(m, g, task)
        for a, n in zip(grads, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-9)

    def test_num_coords_validated(self, two_block):
        g, task = two_block
        m = init_model("GCN", g.feature_dim, 4, 1, {"nc": ("node", 2)}, seed=0)
        with pytest.raises(ConfigurationError):
            grad_check(m, g, task, num_coords=0)


class TestTrain:
    def test_separable_reaches_high_accuracy(self, two_block):
        g, task = two_block
        m = train(g, TrainConfig(task, hidden_dim=32, seed=0))
        logits = forward(m, g)[0] @ m.heads["nc"]
        assert accuracy(logits, g.labels, task.split.train) >= 0.95
        assert float(m.metadata["final_loss"]) <= float(m.metadata["initial_loss"])

    def test_zero_epochs_unchanged(self, two_block):
        g, task = two_block
        m = train(g, TrainConfig(task, hidden_dim=8, epochs=0, seed=4))
        ref = init_model("GCN", g.feature_dim, 8, 2, {"nc": ("node", 2)}, seed=4)
        for (_, a), (_, b) in zip(model_parameters(m), model_parameters(ref)):
            assert a.tobytes() == b.tobytes()

    def test_zero_learning_rate_unchanged(self, two_block):
        g, task = two_block
        m = train(g, TrainConfig(task, hidden_dim=8, epochs=5, learning_rate=0.0, seed=4))
        ref = init_model("GCN", g.feature_dim, 8, 2, {"nc": ("node", 2)}, seed=4)
        for (_, a), (_, b) in zip(model_parameters(m), model_parameters(ref)):
            np.testing.assert_array_equal(a, b)

    def test_bit_deterministic(self, link_task):
        g, task = link_task
        cfg = TrainConfig(task, arch="GAT", hidden_dim=8, epochs=20, seed=3)
        a, b = train(g, cfg), train(g, cfg)
        for (_, x), (_, y) in zip(model_parameters(a), model_parameters(b)):
            assert x.tobytes() == y.tobytes()

    def test_link_training_lowers_loss(self, link_task):
        g, task = link_task
        m = train(g, TrainConfig(task, hidden_dim=8, epochs=50, learning_rate=0.01, seed=0))
        assert float(m.metadata["final_loss"]) < float(m.metadata["initial_loss"])

    def test_glorot_bounds(self):
        m = init_model("GCN", 10, 6, 1, {}, seed=0)
        assert np.abs(m.layers[0].weights[0]).max() <= math.sqrt(6 / 16)

    def test_negative_epochs(self, two_block):
        with pytest.raises(ConfigurationError):
            TrainConfig(two_block[1], epochs=-1)

    def test_task_mismatch(self, two_block):
        g, task = two_block
        bad = TaskSpec("nc", NODE, NodeSplit(np.array([g.num_nodes + 3]), np.arange(0), np.arange(0)), 2)
        with pytest.raises(ConfigurationError):
            train(g, TrainConfig(bad, hidden_dim=4, epochs=1))

    def test_layer_spec_models_train(self, two_block):
        g, task = two_block
        layer = LayerSpec("GCN", g.feature_dim, 2, [np.zeros((g.feature_dim, 2))], activation="identity")
        m = GnnModel([layer], {"nc": np.eye(2)}, {"nc": "node"})
        assert task_loss(m, g, task) == pytest.approx(math.log(2))
