import math

import numpy as np
import pytest
from scipy.optimize import nnls

from conftest import random_graph
from graphsteal import gnn
from graphsteal.graphdata import CategoricalGraph, LabeledDataset, RelaxedGraph


def _model(seed=0, a=4, hidden=(5, 4), C=3):
    return gnn.GnnClassifier.init(a, hidden, C, seed)


def _fd(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# --------------------------------------------------------------------------- forward


def test_zero_weights_give_zero_logits():
    clf = _model().scaled(0.0)
    g = random_graph(np.random.default_rng(0), 5, 4, 3)
    assert np.all(gnn.forward(clf, g) == 0)


def test_scaling_by_two_multiplies_logits_by_eight():
    clf = _model()
    g = random_graph(np.random.default_rng(1), 6, 4, 3)
    assert clf.homogeneity_degree == 3
    np.testing.assert_allclose(gnn.forward(clf.scaled(2.0), g), 8 * gnn.forward(clf, g), rtol=1e-12)


def test_homogeneity_residuals():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 6, 4, 3)
    clf = _model()
    assert gnn.check_homogeneity(clf, g, 1.0) == 0.0
    scale = 1 + np.abs(gnn.forward(clf, g)).max()
    assert gnn.check_homogeneity(clf, g, 0.5) <= 1e-9 * scale
    for s in range(20):
        clf = _model(seed=s)
        g = random_graph(rng, int(rng.integers(2, 9)), 4, 3)
        assert gnn.check_homogeneity(clf, g, 2.0) <= 1e-9 * (1 + 8 * np.abs(gnn.forward(clf, g)).max())
    with pytest.raises(ValueError):
        gnn.check_homogeneity(clf, g, 0.0)


def test_logits_are_permutation_invariant():
    rng = np.random.default_rng(3)
    clf = _model()
    for _ in range(10):
        g = random_graph(rng, 7, 4, 3)
        np.testing.assert_allclose(gnn.forward(clf, g.permute(rng.permutation(7))), gnn.forward(clf, g),
                                   rtol=1e-12, atol=1e-12)


def test_relaxed_forward_of_onehots_matches_categorical():
    g = random_graph(np.random.default_rng(4), 5, 4, 3)
    clf = _model()
    np.testing.assert_allclose(gnn.forward(clf, g.relax()), gnn.forward(clf, g), rtol=1e-12)


def test_dimension_mismatch_raises():
    g = random_graph(np.random.default_rng(5), 4, 3, 3)
    with pytest.raises(gnn.DimensionError):
        gnn.forward(_model(a=4), g)
    with pytest.raises(gnn.DimensionError):
        _model().with_vector(np.zeros(3))


def test_param_vector_round_trip():
    clf = _model()
    theta = clf.to_vector()
    assert theta.size == clf.num_params == 4 * 5 + 5 * 4 + 4 * 3
    np.testing.assert_array_equal(clf.with_vector(theta).to_vector(), theta)


# --------------------------------------------------------------------------- margins and confidence


def test_margin_formula_and_ties():
    assert gnn.margins(np.array([[2.0, 0.5]]), [0])[0] == 1.5
    assert gnn.margins(np.array([[1.0, 1.0, 0.0]]), [0])[0] == 0.0
    assert gnn.runner_up(np.array([[0.0, 3.0, 3.0]]), [0])[0] == 1


def test_confidence_properties():
    clf = _model().scaled(0.0)
    g = random_graph(np.random.default_rng(6), 4, 4, 3)
    assert gnn.confidence(clf, g, 1) == pytest.approx(1 / 3, abs=1e-15)
    assert gnn.softmax(np.array([10.0, -10.0]))[0] >= 0.9999
    clf = _model(seed=9)
    assert sum(gnn.confidence(clf, g, y) for y in range(3)) == pytest.approx(1.0, abs=1e-12)


def test_margin_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for k in range(10):
        clf = _model(seed=k)
        g = random_graph(rng, int(rng.integers(3, 7)), 4, 3)
        y = int(rng.integers(3))
        m, grad = gnn.margin_and_grad(clf, g, y)
        j = gnn.runner_up(gnn.forward(clf, g)[None], [y])[0]

        def fixed_margin(th):
            z = gnn.forward(clf.with_vector(th), g)
            return z[y] - z[j]

        assert fixed_margin(clf.to_vector()) == pytest.approx(m)
        assert _rel(grad, _fd(fixed_margin, clf.to_vector())) <= 1e-4


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    graphs = [random_graph(rng, int(rng.integers(3, 7)), 4, 3) for _ in range(6)]
    y = rng.integers(0, 3, size=6)
    X, A = gnn.batch_inputs(graphs, 4)
    for k in range(10):
        clf = _model(seed=100 + k)
        loss, grad = gnn.loss_and_grad(clf, X, A, y)
        f = lambda th: float(gnn.cross_entropy(gnn.forward_batch(clf.with_vector(th), X, A), y).mean())  # noqa: E731
        assert f(clf.to_vector()) == pytest.approx(float(np.mean(loss)))
        assert _rel(grad, _fd(f, clf.to_vector())) <= 1e-4


def test_relaxed_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    clf = _model(seed=3)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        x = rng.dirichlet(np.ones(4), size=n)
        e = rng.dirichlet(np.ones(3), size=(n, n))
        e = 0.5 * (e + e.transpose(1, 0, 2))
        idx = np.arange(n)
        e[idx, idx] = 0
        e[idx, idx, 0] = 1
        y = int(rng.integers(3))
        losses, [(dx, de)] = gnn.relaxed_loss_and_grad(clf, [RelaxedGraph(x, e)], [y])
        fx = lambda v: gnn.relaxed_loss_and_grad(clf, [RelaxedGraph(v, e)], [y])[0][0]  # noqa: E731
        assert _rel(dx, _fd(fx, x)) <= 1e-4
        iu, ju = np.triu_indices(n, 1)

        def fe(u):
            ee = e.copy()
            ee[iu, ju] = u
            ee[ju, iu] = u
            return gnn.relaxed_loss_and_grad(clf, [RelaxedGraph(x, ee)], [y])[0][0]

        # the returned entry is the derivative for the tied pair, mirrored
        np.testing.assert_array_equal(de[iu, ju], de[ju, iu])
        assert _rel(de[iu, ju], _fd(fe, e[iu, ju])) <= 1e-4


# --------------------------------------------------------------------------- training


def _separable():
    # class 0: all nodes category 0, class 1: all nodes category 1; sum pooling separates them
    graphs, labels = [], []
    for n in range(2, 7):
        for c in (0, 1):
            edges = [(i, i + 1, 1) for i in range(n - 1)]
            graphs.append(CategoricalGraph.from_edge_list([c] * n, edges, 2, 2))
            labels.append(c)
    return LabeledDataset(graphs, labels, 2, 2, 2, 12)


def test_separable_toy_set_is_fit():
    ds = _separable()
    assert len(ds) == 10
    res = gnn.train(ds, gnn.TrainConfig(lr=0.05, epochs=2000, hidden=(8,), seed=0))
    assert gnn.accuracy(res.model, ds) == 1.0
    m, _ = gnn.margin_features(res.model, ds.graphs, ds.labels)
    assert np.all(m >= 0)
    assert res.monotone


def test_zero_learning_rate_keeps_init():
    ds = _separable()
    cfg = gnn.TrainConfig(lr=0.0, epochs=20, hidden=(4,), seed=5)
    init = gnn.GnnClassifier.init(2, (4,), 2, 5)
    np.testing.assert_array_equal(gnn.train(ds, cfg).model.to_vector(), init.to_vector())


def test_dp_without_noise_or_clipping_matches_plain_training():
    ds = _separable()
    plain = gnn.train(ds, gnn.TrainConfig(lr=0.05, epochs=200, hidden=(4,), seed=1))
    dp = gnn.train(ds, gnn.TrainConfig(lr=0.05, epochs=200, hidden=(4,), seed=1,
                                      dp=gnn.DPConfig(clip_norm=1e9, noise_multiplier=0.0)))
    np.testing.assert_allclose(dp.model.to_vector(), plain.model.to_vector(), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(dp.loss_history, plain.loss_history, rtol=1e-12)


def test_training_rejects_missing_class():
    ds = _separable().subset([0, 2, 4])
    with pytest.raises(ValueError):
        gnn.train(ds, gnn.TrainConfig(epochs=1))


def test_divergence_reports_step():
    ds = _separable()
    cfg = gnn.TrainConfig(lr=0.05, epochs=5, hidden=(8,), seed=0, init_scale=1e200)
    with np.errstate(all="ignore"), pytest.raises(gnn.DivergenceError, match="step 0"):
        gnn.train(ds, cfg)


def test_privacy_accounting_is_monotone_and_invertible():
    eps = [gnn.gaussian_epsilon(s, 1000, 1e-5) for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    assert math.isinf(gnn.gaussian_epsilon(0.0, 10, 1e-5))
    nm = gnn.noise_for_epsilon(8.0, 1000, 1e-5)
    assert gnn.gaussian_epsilon(nm, 1000, 1e-5) == pytest.approx(8.0, rel=1e-6)


def _cone_distance(theta, G):
    """min over lam >= 0 of |theta/|theta| - G^T lam/|G^T lam||, via the cone projection."""
    lam, _ = nnls(G.T, theta)
    v = G.T @ lam
    if not np.any(v):
        return math.sqrt(2.0)
    return float(np.linalg.norm(theta / np.linalg.norm(theta) - v / np.linalg.norm(v)))


def test_true_labels_explain_parameters_better_than_shuffled():
    from graphsteal.graphdata import GenConfig, gen_synthetic_dataset

    wins = 0
    for seed in range(5):
        ds = gen_synthetic_dataset(GenConfig(num_graphs=40, n_max=8), seed).subset(range(10))
        if len(set(ds.labels)) < 2:
            continue
        res = gnn.train(ds, gnn.TrainConfig(lr=0.05, epochs=3000, hidden=(8,), seed=seed))
        theta = res.model.to_vector()
        _, G = gnn.margin_features(res.model, ds.graphs, ds.labels)
        shuffled = np.random.default_rng(seed).permutation(ds.labels)
        while np.array_equal(shuffled, ds.labels):
            shuffled = np.random.default_rng(seed + 50).permutation(ds.labels)
        _, Gs = gnn.margin_features(res.model, ds.graphs, shuffled)
        wins += _cone_distance(theta, G) < _cone_distance(theta, Gs)
    assert wins == 5
