"""Training-graph reconstruction pipeline, baselines and ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from .diffusion import DenoiserParams, NoiseSchedule, sample_unconditional, sdedit_generate
from .graphdata import CategoricalGraph, LabeledDataset, RelaxedGraph

log = logging.getLogger(__name__)


class AttackError(RuntimeError):
    pass


class NonFiniteLoss(AttackError):
    pass


@dataclass
class PgdConfig:
    steps: int = 100
    step_size: float = 0.5
    max_halvings: int = 10


@dataclass
class MaskOptConfig:
    steps: int = 5000
    lr: float | None = None  # None: 1 / Lipschitz constant
    tol: float = 1e-13
    max_halvings: int = 20


@dataclass
class AttackConfig:
    m: int = 30
    k: int = 30
    K: int = 10
    alpha: float | str = "auto"
    pgd: PgdConfig = field(default_factory=PgdConfig)
    mask_opt: MaskOptConfig = field(default_factory=MaskOptConfig)

    def validate(self, num_classes: int | None = None):
        if self.m < 1:
            raise ValueError("attack.m must be >= 1")
        if self.k < 1:
            raise ValueError("attack.k must be >= 1")
        if self.alpha != "auto" and float(self.alpha) < 0:
            raise ValueError("attack.alpha must be >= 0")
        if num_classes is not None and self.k > num_classes * self.m:
            raise ValueError(f"attack.k={self.k} exceeds M={num_classes * self.m}")
        if self.K < 0:
            raise ValueError("attack.K must be >= 0")


@dataclass
class CandidateRecord:
    cid: int
    source_index: int
    label: int
    seed: list
    stages: dict = field(default_factory=dict)  # stage -> CategoricalGraph
    confidence: dict = field(default_factory=dict)
    lam: float | None = None
    rank: int | None = None
    substitutions: list = field(default_factory=list)


@dataclass
class AttackResult:
    graphs: list[CategoricalGraph]
    labels: list[int]
    records: list[CandidateRecord]
    lam: np.ndarray | None = None
    variant: str = "graphsteal"


# --------------------------------------------------------------------------- candidates


def select_candidates(clf: gnn.GnnClassifier, aux: LabeledDataset, m: int) -> list[int]:
    """Top-m aux indices per class by softmax confidence; ties by index."""
    conf = gnn.confidences(clf, aux.graphs, aux.labels)
    labels = np.asarray(aux.labels)
    out = []
    for c in range(aux.num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < m:
            raise AttackError(f"class {c} has {len(idx)} auxiliary graphs, fewer than m={m}")
        order = np.lexsort((idx, -conf[idx]))
        out.extend(int(i) for i in idx[order[:m]])
    return out


# --------------------------------------------------------------------------- noise optimization


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each last-axis row onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    k = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def _assemble(x, upper, n, b):
    e = np.zeros((n, n, b))
    e[..., 0] = 1.0
    iu, ju = np.triu_indices(n, 1)
    e[iu, ju] = upper
    e[ju, iu] = upper
    return RelaxedGraph(x, e)


@dataclass
class NoiseOptResult:
    graphs: list[CategoricalGraph]
    relaxed: list[RelaxedGraph]
    loss_history: np.ndarray  # (steps + 1, num_candidates)
    accepted: np.ndarray  # (steps, num_candidates) bool


def optimize_noise(clf: gnn.GnnClassifier, graphs, labels, pgd: PgdConfig, optimize_nodes=True) -> NoiseOptResult:
    """Projected gradient descent on relaxed candidates, then argmax rounding.

    Node rows and the i<j edge fibers are the variables; each candidate keeps
    its own step size, halved whenever a proposal would raise its loss.
    """
    graphs = list(graphs)
    labels = np.asarray(labels)
    if pgd.steps == 0:
        relaxed = [g.relax() for g in graphs]
        losses, _ = gnn.relaxed_loss_and_grad(clf, relaxed, labels)
        return NoiseOptResult(list(graphs), relaxed, losses[None, :], np.zeros((0, len(graphs)), bool))
    xs = [g.relax().x for g in graphs]
    ups = []
    for g in graphs:
        iu, ju = np.triu_indices(g.n, 1)
        ups.append(g.relax().e[iu, ju])
    b = graphs[0].b
    step = np.full(len(graphs), float(pgd.step_size))

    def build(xs_, ups_):
        return [_assemble(x, u, g.n, b) for x, u, g in zip(xs_, ups_, graphs)]

    cur = build(xs, ups)
    loss, grads = gnn.relaxed_loss_and_grad(clf, cur, labels)
    history = [loss.copy()]
    accepted_hist = []
    for it in range(pgd.steps):
        bad = ~np.isfinite(loss)
        if bad.any():
            raise NonFiniteLoss(f"non-finite loss for candidate {int(np.flatnonzero(bad)[0])} at step {it}")
        gx = [d[0] for d in grads]
        gu = []
        for d, g in zip(grads, graphs):
            iu, ju = np.triu_indices(g.n, 1)
            gu.append(d[1][iu, ju])
        pending = np.ones(len(graphs), dtype=bool)
        new_xs, new_ups, new_loss = list(xs), list(ups), loss.copy()
        accepted = np.zeros(len(graphs), dtype=bool)
        for _ in range(pgd.max_halvings + 1):
            idx = np.flatnonzero(pending)
            if len(idx) == 0:
                break
            px = [project_simplex(xs[i] - step[i] * gx[i]) if optimize_nodes else xs[i] for i in idx]
            pu = [project_simplex(ups[i] - step[i] * gu[i]) for i in idx]
            trial = [_assemble(x, u, graphs[i].n, b) for x, u, i in zip(px, pu, idx)]
            tl, _ = gnn.relaxed_loss_and_grad(clf, trial, labels[idx])
            for j, i in enumerate(idx):
                if np.isfinite(tl[j]) and tl[j] <= loss[i]:
                    new_xs[i], new_ups[i], new_loss[i] = px[j], pu[j], tl[j]
                    accepted[i] = True
                    pending[i] = False
                else:
                    step[i] *= 0.5
        xs, ups = new_xs, new_ups
        cur = build(xs, ups)
        loss, grads = gnn.relaxed_loss_and_grad(clf, cur, labels)
        history.append(loss.copy())
        accepted_hist.append(accepted)
    out = [r.discretize() for r in cur]
    return NoiseOptResult(out, cur, np.array(history), np.array(accepted_hist))


# --------------------------------------------------------------------------- selection mask


@dataclass
class MaskResult:
    lam: np.ndarray
    objective_history: list[float]
    fit_loss: float
    alpha: float
    steps: int


def auto_alpha(theta, features) -> float:
    """A penalty weight past which the hinge acts as an exact constraint.

    At the constrained optimum the residual is no longer than theta, so each
    multiplier is bounded by ``2 |g_i| |theta|``.
    """
    G = np.asarray(features, dtype=float)
    return float(2.0 * np.linalg.norm(G, axis=1).max() * np.linalg.norm(theta) * 1.01 + 1e-12)


def optimize_selection_mask(theta, features, alpha, opt: MaskOptConfig) -> MaskResult:
    """Minimize ``|theta - G^T lam|^2 + alpha * sum(max(-lam, 0))`` from lam = 0.

    Proximal gradient steps; the hinge is handled by its proximal map and a
    step is accepted only if the objective does not increase (the step size
    is halved otherwise).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    G = np.asarray(features, dtype=float)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("features must be a non-empty (M, P) matrix")
    if G.shape[1] != theta.shape[0]:
        raise ValueError(f"feature length {G.shape[1]} does not match parameter length {theta.shape[0]}")
    if alpha == "auto":
        alpha = auto_alpha(theta, G)
    alpha = float(alpha)
    K = G @ G.T
    c = G @ theta
    tt = float(theta @ theta)

    def fit(lam):
        return float(lam @ K @ lam - 2 * lam @ c + tt)

    def objective(lam):
        return fit(lam) + alpha * float(np.maximum(-lam, 0).sum())

    lip = 2.0 * float(np.linalg.eigvalsh(K)[-1])
    base = opt.lr if opt.lr is not None else (1.0 / lip if lip > 0 else 1.0)
    lam = np.zeros(G.shape[0])
    f = objective(lam)
    history = [f]
    steps = 0
    for steps in range(1, opt.steps + 1):
        grad = 2.0 * (K @ lam - c)
        eta = base
        moved = False
        for _ in range(opt.max_halvings + 1):
            z = lam - eta * grad
            t = eta * alpha
            new = np.where(z >= 0, z, np.where(z < -t, z + t, 0.0))
            fn = objective(new)
            if fn <= f:
                moved = True
                break
            eta *= 0.5
        if not moved:
            break
        delta = float(np.abs(new - lam).max())
        lam, f = new, fn
        history.append(f)
        if delta <= opt.tol:
            break
    return MaskResult(lam, history, fit(lam), alpha, steps)


def rank_by_lambda(lam) -> np.ndarray:
    lam = np.asarray(lam)
    return np.lexsort((np.arange(len(lam)), -lam))


# --------------------------------------------------------------------------- pipeline


@dataclass
class AttackInputs:
    target: gnn.GnnClassifier
    aux: LabeledDataset
    denoiser: DenoiserParams | None = None
    schedule: NoiseSchedule | None = None


def _uniform_graphs(sizes, a, b, rng):
    out = []
    for n in sizes:
        nodes = rng.integers(0, a, size=n)
        e = np.zeros((n, n), dtype=np.int64)
        iu, ju = np.triu_indices(n, 1)
        e[iu, ju] = rng.integers(0, b, size=len(iu))
        e = e + e.T
        out.append(CategoricalGraph(nodes, e, a, b))
    return out


def _select(inputs: AttackInputs, graphs, labels, config: AttackConfig):
    feats = gnn.margin_features(inputs.target, graphs, labels)[1]
    mask = optimize_selection_mask(inputs.target.to_vector(), feats, config.alpha, config.mask_opt)
    return mask.lam, rank_by_lambda(mask.lam)


def _pipeline(inputs: AttackInputs, config: AttackConfig, seed: int, variant: str) -> AttackResult:
    clf, aux = inputs.target, inputs.aux
    config.validate(aux.num_classes)
    if variant == "G":
        labels = list(aux.labels)
        lam, order = _select(inputs, aux.graphs, labels, config)
        top = order[:config.k]
        recs = []
        for rank, i in enumerate(order):
            r = CandidateRecord(int(i), int(i), labels[i], [seed], substitutions=["selection over auxiliary set"])
            r.stages["auxiliary"] = aux.graphs[i]
            r.lam = float(lam[i])
            r.rank = rank
            recs.append(r)
        return AttackResult([aux.graphs[i] for i in top], [labels[i] for i in top], recs, lam, "G")

    if variant != "D" and (inputs.denoiser is None or inputs.schedule is None):
        raise AttackError("a trained denoiser is required")
    idx = select_candidates(clf, aux, config.m)
    cand = [aux.graphs[i] for i in idx]
    labels = [aux.labels[i] for i in idx]
    records = [CandidateRecord(c, i, y, [seed]) for c, (i, y) in enumerate(zip(idx, labels))]
    for r, g in zip(records, cand):
        r.stages["selected"] = g

    if variant == "O":
        rng = np.random.default_rng([seed, 3])
        opt = _uniform_graphs([g.n for g in cand], aux.a, aux.b, rng)
        for r in records:
            r.substitutions.append("optimized stage replaced by uniform categorical noise")
    else:
        opt = optimize_noise(clf, cand, labels, config.pgd).graphs
    for r, g in zip(records, opt):
        r.stages["optimized"] = g

    if variant == "D":
        gen = list(opt)
        for r in records:
            r.substitutions.append("diffusion skipped")
    else:
        gen = sdedit_generate(inputs.denoiser, inputs.schedule, opt, config.K, [seed, 1])
        for r, g in zip(records, gen):
            r.stages["generated"] = g

    stage_list = [("selected", cand), ("optimized", opt)] + ([] if variant == "D" else [("generated", gen)])
    for name, gs in stage_list:
        conf = gnn.confidences(clf, gs, labels)
        for r, p in zip(records, conf):
            r.confidence[name] = float(p)

    if variant == "S":
        rng = np.random.default_rng([seed, 4])
        order = rng.permutation(len(gen))
        lam = None
        for r in records:
            r.substitutions.append("random selection")
    else:
        lam, order = _select(inputs, gen, labels, config)
    for rank, i in enumerate(order):
        records[i].rank = rank
        if lam is not None:
            records[i].lam = float(lam[i])
    top = order[:config.k]
    return AttackResult([gen[i] for i in top], [labels[i] for i in top], records, lam,
                        "graphsteal" if variant == "full" else variant)


def run_graphsteal(inputs: AttackInputs, config: AttackConfig, seed: int) -> AttackResult:
    return _pipeline(inputs, config, seed, "full")


ABLATIONS = ("O", "D", "S", "G")


def run_ablation(variant: str, inputs: AttackInputs, config: AttackConfig, seed: int) -> AttackResult:
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")
    return _pipeline(inputs, config, seed, variant)


# --------------------------------------------------------------------------- baselines


BASELINES = ("bl_rand", "bl_conf", "bl_diff", "graphmi_g")


def aux_density(aux: LabeledDataset) -> float:
    pairs = sum(g.n * (g.n - 1) // 2 for g in aux.graphs)
    edges = sum(int(np.count_nonzero(np.triu(g.edges, 1))) for g in aux.graphs)
    return edges / pairs


def bl_rand(aux: LabeledDataset, k: int, seed, edge_prob: float | None = None) -> list[CategoricalGraph]:
    """Erdos-Renyi graphs with aux sizes, node marginals and edge density."""
    rng = np.random.default_rng(seed)
    p = aux_density(aux) if edge_prob is None else float(edge_prob)
    sizes = np.array([g.n for g in aux.graphs])
    node_freq = np.bincount(np.concatenate([g.nodes for g in aux.graphs]), minlength=aux.a).astype(float)
    node_freq /= node_freq.sum()
    present = np.concatenate([g.edges[np.triu_indices(g.n, 1)] for g in aux.graphs])
    present = present[present > 0]
    edge_freq = np.bincount(present, minlength=aux.b)[1:].astype(float)
    edge_freq = edge_freq / edge_freq.sum() if edge_freq.sum() > 0 else np.full(aux.b - 1, 1.0 / (aux.b - 1))
    out = []
    for _ in range(k):
        n = int(rng.choice(sizes))
        nodes = rng.choice(aux.a, size=n, p=node_freq)
        iu, ju = np.triu_indices(n, 1)
        on = rng.random(len(iu)) < p
        cats = rng.choice(np.arange(1, aux.b), size=len(iu), p=edge_freq)
        e = np.zeros((n, n), dtype=np.int64)
        e[iu, ju] = np.where(on, cats, 0)
        out.append(CategoricalGraph(nodes, e + e.T, aux.a, aux.b))
    return out


def bl_conf(clf, aux: LabeledDataset, k: int) -> list[int]:
    if k > len(aux):
        raise AttackError(f"k={k} exceeds the auxiliary set size {len(aux)}")
    conf = gnn.confidences(clf, aux.graphs, aux.labels)
    return [int(i) for i in np.lexsort((np.arange(len(aux)), -conf))[:k]]


def run_baseline(method: str, inputs: AttackInputs, k: int, seed, pgd: PgdConfig | None = None,
                 edge_prob: float | None = None) -> AttackResult:
    aux = inputs.aux
    if method == "bl_rand":
        gs = bl_rand(aux, k, [seed, 5], edge_prob)
        return AttackResult(gs, [-1] * k, [], None, method)
    if method == "bl_conf":
        idx = bl_conf(inputs.target, aux, k)
        return AttackResult([aux.graphs[i] for i in idx], [aux.labels[i] for i in idx], [], None, method)
    if method == "bl_diff":
        if inputs.denoiser is None or inputs.schedule is None:
            raise AttackError("bl_diff needs a trained denoiser")
        rng = np.random.default_rng([seed, 6])
        sizes = rng.choice([g.n for g in aux.graphs], size=k)
        gs = sample_unconditional(inputs.denoiser, inputs.schedule, sizes, [seed, 7])
        return AttackResult(gs, [-1] * k, [], None, method)
    if method == "graphmi_g":
        if k > len(aux):
            raise AttackError(f"k={k} exceeds the auxiliary set size {len(aux)}")
        rng = np.random.default_rng([seed, 8])
        idx = np.sort(rng.choice(len(aux), size=k, replace=False))
        gs = [aux.graphs[i] for i in idx]
        ys = [aux.labels[i] for i in idx]
        res = optimize_noise(inputs.target, gs, ys, pgd or PgdConfig(), optimize_nodes=False)
        return AttackResult(res.graphs, ys, [], None, method)
    raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINES}")
