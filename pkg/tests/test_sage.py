import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadsage.errors import ConfigError, LabelError, ShapeError, StaleCacheError
from roadsage.graph import to_dual
from roadsage.sage import (
    OptimizerState,
    SageConfig,
    SageModel,
    adam_step,
    aggregate,
    apply_update,
    backward,
    forward,
    load_model,
    model_from_dict,
    model_to_dict,
    random_walk_pairs,
    sample_neighborhood,
    save_model,
    supervised_loss,
    unsupervised_loss,
)

from conftest import graph_from_pairs, random_graph
from oracles import adjacency_mean, jitter_biases, analytic_and_numeric_grads, dense_forward, max_relative_error


def star_dual(n_leaves):
    """Dual where node 0 ("c") has ``n_leaves`` neighbours."""
    pairs = [("c", "h0", "h1")] + [(f"l{i:02d}", "h1", f"t{i:02d}") for i in range(n_leaves)]
    return to_dual(graph_from_pairs(pairs))


# --- sampling --------------------------------------------------------------


def test_fanout_larger_than_degree_returns_all():
    d = star_dual(3)
    c = d.index()["c"]
    nb = sample_neighborhood(d, [c], [10], rng=0)
    assert sorted(nb.neighbor_lists(0)[0]) == sorted(d.neighbors[c])


def test_fanout_caps_distinct_neighbours():
    d = star_dual(30)
    c = d.index()["c"]
    got = sample_neighborhood(d, [c], [10], rng=0).neighbor_lists(0)[0]
    assert len(got) == 10 and len(set(got)) == 10
    assert set(got) <= set(d.neighbors[c])


def test_isolated_node_has_no_neighbours():
    d = to_dual(graph_from_pairs([("e1", "a", "b")]))
    assert len(sample_neighborhood(d, [0], [5], rng=0).neighbor_lists(0)[0]) == 0


def test_sampling_is_seeded():
    d = star_dual(30)
    a = sample_neighborhood(d, [0, 1, 2], [3, 2], rng=5)
    b = sample_neighborhood(d, [0, 1, 2], [3, 2], rng=5)
    for x, y in zip(a.layers, b.layers):
        np.testing.assert_array_equal(x, y)


# --- aggregation -----------------------------------------------------------


def test_mean_aggregate_examples():
    np.testing.assert_array_equal(aggregate([[1, 3], [3, 5]]), [2, 4])
    np.testing.assert_array_equal(aggregate([[1, 3]]), [1, 3])
    np.testing.assert_array_equal(aggregate(np.empty((0, 2)), dim=2), [0, 0])


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_aggregate_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(n, 4))
    W, b = rng.normal(size=(4, 4)), rng.normal(size=4)
    perm = rng.permutation(n)
    np.testing.assert_allclose(aggregate(H[perm], "mean"), aggregate(H, "mean"), rtol=0, atol=1e-12)
    np.testing.assert_allclose(aggregate(H[perm], "mean_pool", W, b), aggregate(H, "mean_pool", W, b), rtol=0, atol=1e-12)


# --- forward ---------------------------------------------------------------


def test_k1_identity_mean_is_neighbour_mean():
    # node "c" continues into two roads with features [1,3] and [3,5]
    d = to_dual(graph_from_pairs([("c", "a", "b"), ("x", "b", "p"), ("y", "b", "q")]))
    X = np.zeros((3, 2))
    idx = d.index()
    X[idx["x"]] = [1, 3]
    X[idx["y"]] = [3, 5]
    cfg = SageConfig(input_dim=2, embedding_dim=2, K=1, aggregator="mean", fanouts=(None,), self_concat=False)
    model = SageModel(cfg, {"W1": np.eye(2), "b1": np.zeros(2)})
    z, _ = forward(model, X, sample_neighborhood(d, [idx["c"]], [None]))
    np.testing.assert_array_equal(z[0], [2, 4])


def test_dropout_zero_train_equals_eval():
    g = random_graph(np.random.default_rng(1), 6, 14)
    d = to_dual(g)
    X = np.random.default_rng(2).normal(size=(d.n_nodes, 5))
    model = SageModel(SageConfig(input_dim=5, hidden_units=6, embedding_dim=4, fanouts=(None, None)))
    nb = sample_neighborhood(d, np.arange(d.n_nodes), [None, None])
    a, _ = forward(model, X, nb, train=False)
    b, _ = forward(model, X, nb, train=True, rng=3)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("aggregator", ["mean", "mean_pool"])
@pytest.mark.parametrize("self_concat", [True, False])
def test_path_graph_matches_dense_oracle(aggregator, self_concat):
    d = to_dual(graph_from_pairs([("e1", "a", "b"), ("e2", "b", "c"), ("e3", "c", "d")]))
    X = np.random.default_rng(0).normal(size=(3, 4))
    cfg = SageConfig(input_dim=4, hidden_units=5, embedding_dim=3, aggregator=aggregator, self_concat=self_concat, fanouts=(None, None), seed=0)
    model = SageModel(cfg)
    z, _ = forward(model, X, sample_neighborhood(d, [0, 1, 2], [None, None]))
    np.testing.assert_allclose(z, dense_forward(model, X, d), rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_graph_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 10)), int(rng.integers(1, 20)))
    d = to_dual(g)
    X = rng.normal(size=(d.n_nodes, 3))
    cfg = SageConfig(input_dim=3, hidden_units=4, embedding_dim=2, fanouts=(None, None), seed=seed % 1000)
    model = SageModel(cfg)
    batch = rng.permutation(d.n_nodes)
    z, _ = forward(model, X, sample_neighborhood(d, batch, [None, None]))
    np.testing.assert_allclose(z, dense_forward(model, X, d)[batch], rtol=0, atol=1e-10)


def test_k1_identity_forward_equals_adjacency_mean():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 8, 18)
    d = to_dual(g)
    X = rng.normal(size=(d.n_nodes, 3))
    cfg = SageConfig(input_dim=3, embedding_dim=3, K=1, aggregator="mean", fanouts=(None,), self_concat=False)
    model = SageModel(cfg, {"W1": np.eye(3), "b1": np.zeros(3)})
    z, _ = forward(model, X, sample_neighborhood(d, np.arange(d.n_nodes), [None]))
    np.testing.assert_allclose(z, adjacency_mean(X, d), rtol=0, atol=1e-12)


def test_shape_checks():
    model = SageModel(SageConfig(input_dim=3, hidden_units=4, embedding_dim=2, fanouts=(None, None)))
    d = star_dual(2)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((d.n_nodes, 4)), sample_neighborhood(d, [0], [None, None]))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((d.n_nodes, 3)), sample_neighborhood(d, [0], [None]))


def test_config_validation():
    with pytest.raises(ConfigError):
        SageConfig(input_dim=3, K=2, fanouts=(5,))
    with pytest.raises(ConfigError):
        SageConfig(input_dim=3, aggregator="max")
    with pytest.raises(ConfigError):
        SageConfig(input_dim=3, dropout=1.0)


# --- losses ----------------------------------------------------------------


def test_uniform_logits_loss_is_log8():
    loss, _ = supervised_loss(np.zeros((4, 8)), [0, 1, 2, 7])
    assert loss == pytest.approx(math.log(8))


def test_large_margin_loss_vanishes():
    logits = np.zeros((1, 8))
    logits[0, 3] = 60.0
    assert supervised_loss(logits, [3])[0] < 1e-20


def test_cross_entropy_by_hand():
    logits = np.array([[2.0] + [0.0] * 7])
    want = -(2.0 - math.log(math.exp(2.0) + 7.0))
    loss, grad = supervised_loss(logits, [0])
    assert loss == pytest.approx(want, rel=1e-14)
    p0 = math.exp(2.0) / (math.exp(2.0) + 7.0)
    assert grad[0, 0] == pytest.approx(p0 - 1.0)


def test_supervised_loss_rejects_bad_labels():
    with pytest.raises(LabelError):
        supervised_loss(np.zeros((2, 8)), [0, 8])


def test_unsupervised_loss_at_zero():
    loss, *_ = unsupervised_loss(np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)), Q=1)
    assert loss == pytest.approx(2 * math.log(2))


def test_unsupervised_loss_limit():
    u = np.array([[30.0, 0.0]])
    loss, *_ = unsupervised_loss(u, np.array([[30.0, 0.0]]), np.array([[-30.0, 0.0]]), Q=1)
    assert loss < 1e-300 or loss == 0.0


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_unsupervised_loss_scalar_oracle_and_gradient():
    rng = np.random.default_rng(7)
    u, v, negs = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(2, 4))
    want = -math.log(_sigmoid(float(u[0] @ v[0]))) - sum(math.log(_sigmoid(-float(u[0] @ n))) for n in negs)
    loss, d_u, d_pos, d_negs = unsupervised_loss(u, v, negs, Q=2)
    assert loss == pytest.approx(want, rel=1e-12)
    # finite differences on every input coordinate
    h = 1e-6
    for arr, grad in ((u, d_u), (v, d_pos), (negs, d_negs)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = unsupervised_loss(u, v, negs)[0]
            arr[idx] = old - h
            down = unsupervised_loss(u, v, negs)[0]
            arr[idx] = old
            assert grad[idx] == pytest.approx((up - down) / (2 * h), abs=1e-7)


# --- gradients -------------------------------------------------------------


def test_zero_output_gradient_gives_zero_grads():
    d = star_dual(4)
    X = np.random.default_rng(0).normal(size=(d.n_nodes, 3))
    model = SageModel(SageConfig(input_dim=3, hidden_units=4, embedding_dim=2, fanouts=(None, None)))
    z, cache = forward(model, X, sample_neighborhood(d, [0, 1], [None, None]))
    for g in backward(model, cache, np.zeros_like(z)).values():
        assert not g.any()


def test_single_parameter_square():
    params = {"w": np.array([3.0])}
    # d(w^2)/dw at 3 is 6; one tiny SGD-like Adam step moves opposite to it
    grad = 2 * params["w"]
    assert grad[0] == 6.0
    adam_step(params, {"w": grad}, OptimizerState(learning_rate=0.1))
    assert params["w"][0] == pytest.approx(2.9)


@pytest.mark.parametrize("aggregator", ["mean", "mean_pool"])
@pytest.mark.parametrize("self_concat", [True, False])
def test_finite_difference_gradients(aggregator, self_concat):
    rng = np.random.default_rng(11)
    g = random_graph(rng, 6, 14)
    d = to_dual(g)
    X = rng.normal(size=(d.n_nodes, 3))
    cfg = SageConfig(input_dim=3, hidden_units=5, embedding_dim=4, aggregator=aggregator, self_concat=self_concat, fanouts=(3, 2), n_classes=8, seed=1)
    model = SageModel(cfg)
    jitter_biases(model, rng)
    assert model.n_parameters() <= 200
    batch = np.arange(min(5, d.n_nodes))
    labels = rng.integers(0, 8, size=batch.size)
    grads, numeric = analytic_and_numeric_grads(model, X, d, batch, cfg.fanouts, seed=2, labels=labels)
    assert max_relative_error(grads, numeric) < 1e-4


def test_stale_cache_rejected():
    d = star_dual(3)
    X = np.ones((d.n_nodes, 3))
    model = SageModel(SageConfig(input_dim=3, hidden_units=4, embedding_dim=2, fanouts=(None, None)))
    z, cache = forward(model, X, sample_neighborhood(d, [0], [None, None]))
    apply_update(model, backward(model, cache, np.ones_like(z)), OptimizerState(1e-3))
    with pytest.raises(StaleCacheError):
        backward(model, cache, np.ones_like(z))


# --- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState(0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_learning_rate():
    p = {"w": np.array([0.0, 0.0])}
    adam_step(p, {"w": np.array([0.3, -5.0])}, OptimizerState(0.01))
    np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-6)


def test_adam_two_steps_scalar_oracle():
    lr, b1, b2, eps, g = 0.05, 0.9, 0.999, 1e-8, 0.7
    w, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = {"w": np.array([1.0])}
    st_ = OptimizerState(lr)
    adam_step(p, {"w": np.array([g])}, st_)
    adam_step(p, {"w": np.array([g])}, st_)
    assert p["w"][0] == pytest.approx(w, rel=1e-15)


def test_adam_weight_decay_shrinks():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.array([0.0])}, OptimizerState(0.1, weight_decay=0.5))
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))


# --- walks and checkpoints -------------------------------------------------


def test_random_walk_pairs_are_neighbours_within_window():
    g = random_graph(np.random.default_rng(9), 6, 15, self_loops=False)
    d = to_dual(g)
    pairs = random_walk_pairs(d, walks_per_node=3, walk_length=3, window=2, rng=0)
    two_hop = [set(d.neighbors[i]) | {k for j in d.neighbors[i] for k in d.neighbors[j]} for i in range(d.n_nodes)]
    for a, b in pairs:
        assert a != b and b in two_hop[a]


def test_checkpoint_bit_exact(tmp_path):
    model = SageModel(SageConfig(input_dim=5, hidden_units=7, embedding_dim=3, n_classes=8, seed=4))
    model.params["W1"][0, 0] = 1 / 3  # not representable in short decimal
    save_model(model, tmp_path / "m.json", {"note": "x"})
    back, extra = load_model(tmp_path / "m.json")
    assert extra == {"note": "x"}
    assert back.config == model.config
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert model_to_dict(model_from_dict(model_to_dict(model))) == model_to_dict(model)


def test_training_determinism():
    g = random_graph(np.random.default_rng(3), 8, 20)
    d = to_dual(g)
    X = np.random.default_rng(4).normal(size=(d.n_nodes, 4))

    def run():
        model = SageModel(SageConfig(input_dim=4, hidden_units=6, embedding_dim=3, fanouts=(3, 2), dropout=0.2, seed=3))
        rng = np.random.default_rng(0)
        opt = OptimizerState(1e-2)
        for _ in range(5):
            nb = sample_neighborhood(d, np.arange(d.n_nodes), model.config.fanouts, rng)
            z, cache = forward(model, X, nb, train=True, rng=rng)
            apply_update(model, backward(model, cache, z), opt)
        return model.params

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
