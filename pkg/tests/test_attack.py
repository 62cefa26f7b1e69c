import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import nnls

from graphsteal import attack as atk
from graphsteal import gnn
from graphsteal.diffusion import DenoiserHyper, build_schedule, train_denoiser
from graphsteal.graphdata import CategoricalGraph, LabeledDataset, canonical_key


def _keys(graphs):
    return sorted(canonical_key(g) for g in graphs)


@pytest.fixture(scope="module")
def setup(small_dataset):
    ds = small_dataset
    tgt, aux = ds.subset(range(20)), ds.subset(range(20, 60))
    clf = gnn.train(tgt, gnn.TrainConfig(lr=0.05, epochs=300, hidden=(8, 8), seed=0)).model
    s = build_schedule(10, ds.a, ds.b)
    den = train_denoiser(aux, s, DenoiserHyper(steps=100, hidden=8, pair_hidden=8), 0).params
    cfg = atk.AttackConfig(m=5, k=6, K=3, pgd=atk.PgdConfig(steps=10, step_size=1.0),
                           mask_opt=atk.MaskOptConfig(steps=2000))
    return atk.AttackInputs(clf, aux, den, s), cfg


# --------------------------------------------------------------------------- candidates


def test_full_class_selection_returns_everything(setup):
    inputs, _ = setup
    m = int(inputs.aux.class_counts().min())
    aux = inputs.aux.subset([i for c in range(2) for i in np.flatnonzero(np.array(inputs.aux.labels) == c)[:m]])
    assert sorted(atk.select_candidates(inputs.target, aux, m)) == list(range(len(aux)))


def test_uniform_classifier_selects_first_indices(setup):
    inputs, _ = setup
    flat = inputs.target.scaled(0.0)
    labels = np.array(inputs.aux.labels)
    want = [i for c in range(2) for i in np.flatnonzero(labels == c)[:3]]
    assert atk.select_candidates(flat, inputs.aux, 3) == want


def test_top_confidence_graph_per_class_is_chosen(setup, monkeypatch):
    inputs, _ = setup
    labels = np.array(inputs.aux.labels)
    conf = np.full(len(labels), 0.5)
    best = [int(np.flatnonzero(labels == c)[-1]) for c in range(2)]
    conf[best] = 0.99
    monkeypatch.setattr(gnn, "confidences", lambda clf, graphs, ys: conf)
    assert atk.select_candidates(inputs.target, inputs.aux, 1) == best


def test_selected_confidences_dominate(setup):
    inputs, _ = setup
    idx = atk.select_candidates(inputs.target, inputs.aux, 4)
    conf = gnn.confidences(inputs.target, inputs.aux.graphs, inputs.aux.labels)
    labels = np.array(inputs.aux.labels)
    for c in range(2):
        chosen = [i for i in idx if labels[i] == c]
        rest = [i for i in np.flatnonzero(labels == c) if i not in chosen]
        assert len(chosen) == 4 and conf[chosen].min() >= conf[rest].max()


def test_small_class_is_named(setup):
    inputs, _ = setup
    with pytest.raises(atk.AttackError, match="class"):
        atk.select_candidates(inputs.target, inputs.aux, 1000)


# --------------------------------------------------------------------------- noise optimization


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_simplex_projection_is_optimal(k, seed):
    v = np.random.default_rng(seed).normal(scale=3, size=(4, k))
    p = atk.project_simplex(v)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    # KKT: v - p equals the shift on the support and is no larger off it
    for row_v, row_p in zip(v, p):
        shift = (row_v - row_p)[row_p > 0]
        assert np.ptp(shift) <= 1e-9
        assert np.all((row_v - row_p)[row_p == 0] <= shift[0] + 1e-9)


def test_zero_pgd_steps_is_identity(setup):
    inputs, _ = setup
    g = inputs.aux.graphs[:4]
    res = atk.optimize_noise(inputs.target, g, inputs.aux.labels[:4], atk.PgdConfig(steps=0))
    assert res.graphs == list(g)


def test_pgd_never_increases_loss(setup):
    inputs, _ = setup
    g, y = inputs.aux.graphs[:8], inputs.aux.labels[:8]
    res = atk.optimize_noise(inputs.target, g, y, atk.PgdConfig(steps=30, step_size=2.0))
    h = res.loss_history
    assert np.all(h[1:] <= h[:-1] + 1e-12)
    for r in res.relaxed:
        r.check()
        np.testing.assert_array_equal(r.e, r.e.transpose(1, 0, 2))


def test_two_node_candidate_descends():
    ds = LabeledDataset([CategoricalGraph([c, c], np.array([[0, 1], [1, 0]]), 2, 2) for c in (0, 1)] * 5,
                        [0, 1] * 5, 2, 2, 2, 12)
    clf = gnn.train(ds, gnn.TrainConfig(lr=0.05, epochs=500, hidden=(6,), seed=1)).model
    g = CategoricalGraph([1, 1], np.array([[0, 0], [0, 0]]), 2, 2)
    res = atk.optimize_noise(clf, [g], [0], atk.PgdConfig(steps=200, step_size=0.01))
    h = res.loss_history[:, 0]
    assert np.mean(h[1:] < h[:-1]) >= 0.9
    assert h[-1] < h[0]


def test_saturated_candidate_is_unchanged(setup):
    inputs, _ = setup
    g, y = inputs.aux.graphs[0], inputs.aux.labels[0]
    loud = inputs.target.scaled(50.0)
    z = gnn.forward(loud, g)
    y = int(np.argmax(z))
    assert gnn.cross_entropy(z[None], [y])[0] < 1e-6
    assert atk.optimize_noise(loud, [g], [y], atk.PgdConfig(steps=20)).graphs[0] == g


def test_node_freeze_keeps_categories(setup):
    inputs, _ = setup
    g, y = inputs.aux.graphs[:5], inputs.aux.labels[:5]
    res = atk.optimize_noise(inputs.target, g, y, atk.PgdConfig(steps=20, step_size=2.0), optimize_nodes=False)
    assert all(np.array_equal(a.nodes, b.nodes) for a, b in zip(g, res.graphs))


# --------------------------------------------------------------------------- selection mask


def _opt(**kw):
    return atk.MaskOptConfig(**{"steps": 20000, **kw})


def test_mask_recovers_exact_representation():
    theta = np.random.default_rng(0).normal(size=30)
    r = atk.optimize_selection_mask(theta, theta[None], "auto", _opt())
    assert r.lam[0] == pytest.approx(1.0, abs=1e-6)
    assert r.fit_loss <= 1e-6


def test_mask_nonnegativity_binds():
    theta = np.random.default_rng(1).normal(size=30)
    r = atk.optimize_selection_mask(theta, -theta[None], "auto", _opt())
    assert abs(r.lam[0]) <= 1e-6
    assert r.fit_loss == pytest.approx(theta @ theta, rel=1e-9)


def test_orthogonal_features_match_nnls():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.normal(size=(40, 5)))
    G = q.T
    theta = 2 * G[0] + 3 * G[2]
    r = atk.optimize_selection_mask(theta, G, "auto", _opt())
    ref, _ = nnls(G.T, theta)
    np.testing.assert_allclose(r.lam, [2, 0, 3, 0, 0], atol=1e-4)
    np.testing.assert_allclose(r.lam, ref, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_mask_matches_nnls_on_random_systems(M, seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(M, 12))
    theta = rng.normal(size=12)
    r = atk.optimize_selection_mask(theta, G, "auto", _opt(steps=50000))
    ref, _ = nnls(G.T, theta)
    assert r.lam.min() >= -1e-6
    np.testing.assert_allclose(r.lam, ref, atol=1e-4)
    hist = np.array(r.objective_history)
    assert np.all(hist[1:] <= hist[:-1] + 1e-9)


def test_fixed_alpha_and_learning_rate_descend():
    rng = np.random.default_rng(3)
    G, theta = rng.normal(size=(6, 10)), rng.normal(size=10)
    r = atk.optimize_selection_mask(theta, G, 0.5, atk.MaskOptConfig(steps=300, lr=1.0))
    hist = np.array(r.objective_history)
    assert np.all(hist[1:] <= hist[:-1] + 1e-9)
    assert r.alpha == 0.5


def test_inconsistent_feature_layout_is_rejected():
    with pytest.raises(ValueError):
        atk.optimize_selection_mask(np.zeros(5), np.zeros((3, 4)), "auto", _opt())
    with pytest.raises(ValueError):
        atk.optimize_selection_mask(np.zeros(5), np.zeros((0, 5)), "auto", _opt())


def test_ranking_breaks_ties_by_index():
    assert atk.rank_by_lambda([0.5, 1.0, 0.5, 1.0]).tolist() == [1, 3, 0, 2]


# --------------------------------------------------------------------------- pipeline


def test_pipeline_output_and_audit(setup):
    inputs, cfg = setup
    res = atk.run_graphsteal(inputs, cfg, 0)
    assert len(res.graphs) == cfg.k
    gen = [r.stages["generated"] for r in res.records]
    assert set(map(canonical_key, res.graphs)) <= set(map(canonical_key, gen))
    ranks = sorted(res.records, key=lambda r: r.rank)
    assert [r.lam for r in ranks] == sorted((r.lam for r in ranks), reverse=True)
    for r in res.records:
        assert set(r.stages) == {"selected", "optimized", "generated"}
        assert r.label == inputs.aux.labels[r.source_index]
        assert r.stages["selected"] is inputs.aux.graphs[r.source_index]
    assert res.lam.min() >= -1e-6


def test_full_selection_is_a_permutation(setup):
    inputs, cfg = setup
    M = 2 * cfg.m
    cfg_all = atk.AttackConfig(m=cfg.m, k=M, K=cfg.K, pgd=cfg.pgd, mask_opt=cfg.mask_opt)
    res = atk.run_graphsteal(inputs, cfg_all, 1)
    assert _keys(res.graphs) == _keys(r.stages["generated"] for r in res.records)
    rand = atk.run_ablation("S", inputs, cfg_all, 1)
    assert _keys(rand.graphs) == _keys(res.graphs)


def test_pipeline_is_deterministic(setup):
    from graphsteal.formats import audit_bytes, graphset_bytes

    inputs, cfg = setup
    a, b = atk.run_graphsteal(inputs, cfg, 3), atk.run_graphsteal(inputs, cfg, 3)
    assert graphset_bytes(a.graphs, a.labels, 3, 2) == graphset_bytes(b.graphs, b.labels, 3, 2)
    assert audit_bytes(a, 3, 2) == audit_bytes(b, 3, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        atk.AttackConfig(m=2, k=5).validate(2)
    with pytest.raises(ValueError):
        atk.AttackConfig(m=0).validate()
    with pytest.raises(ValueError):
        atk.AttackConfig(alpha=-1.0).validate()


# --------------------------------------------------------------------------- ablations


def test_ablations_mark_one_substitution(setup):
    inputs, cfg = setup
    full = atk.run_graphsteal(inputs, cfg, 2)
    for v in atk.ABLATIONS:
        res = atk.run_ablation(v, inputs, cfg, 2)
        assert res.variant == v and len(res.graphs) == cfg.k
        assert all(len(r.substitutions) == 1 for r in res.records)
    d = atk.run_ablation("D", inputs, cfg, 2)
    assert all("generated" not in r.stages for r in d.records)
    assert [r.stages["optimized"] for r in d.records] == [r.stages["optimized"] for r in full.records]
    o = atk.run_ablation("O", inputs, cfg, 2)
    assert [r.stages["selected"] for r in o.records] == [r.stages["selected"] for r in full.records]


def test_aux_selection_stays_in_aux(setup):
    inputs, cfg = setup
    res = atk.run_ablation("G", inputs, cfg, 0)
    assert set(map(canonical_key, res.graphs)) <= set(map(canonical_key, inputs.aux.graphs))


def test_unknown_variant_is_rejected(setup):
    inputs, cfg = setup
    with pytest.raises(ValueError):
        atk.run_ablation("X", inputs, cfg, 0)


# --------------------------------------------------------------------------- baselines


def test_confidence_baseline_with_all_graphs_is_sorted_aux(setup):
    inputs, _ = setup
    n = len(inputs.aux)
    res = atk.run_baseline("bl_conf", inputs, n, 0)
    conf = gnn.confidences(inputs.target, res.graphs, res.labels)
    assert np.all(conf[:-1] >= conf[1:])
    assert _keys(res.graphs) == _keys(inputs.aux.graphs)
    with pytest.raises(atk.AttackError):
        atk.run_baseline("bl_conf", inputs, n + 1, 0)


def test_random_baseline_without_edges(setup):
    inputs, _ = setup
    out = atk.bl_rand(inputs.aux, 7, 0, edge_prob=0.0)
    assert len(out) == 7 and all(not g.edges.any() for g in out)
    sizes = {g.n for g in inputs.aux.graphs}
    assert {g.n for g in atk.run_baseline("bl_rand", inputs, 20, 0).graphs} <= sizes


def test_graphmi_with_zero_steps_is_random_aux_pick(setup):
    inputs, _ = setup
    res = atk.run_baseline("graphmi_g", inputs, 5, 4, pgd=atk.PgdConfig(steps=0))
    idx = np.sort(np.random.default_rng([4, 8]).choice(len(inputs.aux), size=5, replace=False))
    assert res.graphs == [inputs.aux.graphs[i] for i in idx]


def test_diffusion_baseline_sizes_come_from_aux(setup):
    inputs, _ = setup
    res = atk.run_baseline("bl_diff", inputs, 6, 0)
    assert len(res.graphs) == 6
    assert {g.n for g in res.graphs} <= {g.n for g in inputs.aux.graphs}


def test_unknown_baseline_is_rejected(setup):
    inputs, _ = setup
    with pytest.raises(ValueError):
        atk.run_baseline("nope", inputs, 3, 0)
