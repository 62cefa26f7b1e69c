"""Discrete graph diffusion with uniform transitions.

Nodes and edges are noised independently with
``Q^t = alpha_t I + (1 - alpha_t) 11^T / k``; the reverse step samples each
entry from the x0-posterior mixture
``p(x^{t-1} | G^t) = sum_{x0} p_phi(x0 | G^t) q(x^{t-1} | x^t, x0)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graphdata import CategoricalGraph, LabeledDataset

log = logging.getLogger(__name__)


class ImpossibleTransition(RuntimeError):
    pass


class DenoiserDivergence(RuntimeError):
    pass


# --------------------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    T: int
    a: int
    b: int
    kind: str
    alpha: np.ndarray  # index t = 1..T (alpha[0] = 1)
    alpha_bar: np.ndarray  # index t = 0..T

    def Q(self, t: int, k: int) -> np.ndarray:
        return _uniform_transition(self.alpha[t], k)

    def Qbar(self, t: int, k: int) -> np.ndarray:
        return _uniform_transition(self.alpha_bar[t], k)

    def QX(self, t):
        return self.Q(t, self.a)

    def QE(self, t):
        return self.Q(t, self.b)

    def QbarX(self, t):
        return self.Qbar(t, self.a)

    def QbarE(self, t):
        return self.Qbar(t, self.b)


def _uniform_transition(alpha, k):
    return alpha * np.eye(k) + (1.0 - alpha) / k * np.ones((k, k))


def build_schedule(T: int, a: int, b: int, kind: str = "cosine", s: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    t = np.arange(T + 1)
    if kind == "cosine":
        f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        bar = f / f[0]
    elif kind == "linear":
        bar = np.cumprod(np.r_[1.0, np.full(T, 0.005 ** (1 / T))])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = np.ones(T + 1)
    alpha[1:] = np.clip(bar[1:] / np.maximum(bar[:-1], 1e-300), 1e-4, 1.0)
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, a, b, kind, alpha, alpha_bar)


# --------------------------------------------------------------------------- batching


@dataclass
class NoisyBatch:
    """Padded categorical batch: nodes (B, N), edges (B, N, N), mask (B, N); pads are -1."""

    nodes: np.ndarray
    edges: np.ndarray
    mask: np.ndarray
    a: int
    b: int

    @classmethod
    def from_graphs(cls, graphs):
        graphs = list(graphs)
        N = max(g.n for g in graphs)
        B = len(graphs)
        nodes = -np.ones((B, N), dtype=np.int64)
        edges = -np.ones((B, N, N), dtype=np.int64)
        mask = np.zeros((B, N), dtype=bool)
        for k, g in enumerate(graphs):
            nodes[k, :g.n] = g.nodes
            edges[k, :g.n, :g.n] = g.edges
            mask[k, :g.n] = True
        for k in range(B):
            np.fill_diagonal(edges[k], -1)
        return cls(nodes, edges, mask, graphs[0].a, graphs[0].b)

    @property
    def pair_mask(self):
        return self.edges >= 0

    def onehots(self):
        X = (self.nodes[..., None] == np.arange(self.a)).astype(float)
        E = (self.edges[..., None] == np.arange(self.b)).astype(float)
        return X, E

    def to_graphs(self):
        out = []
        for k in range(len(self.nodes)):
            n = int(self.mask[k].sum())
            e = self.edges[k, :n, :n].copy()
            np.fill_diagonal(e, 0)
            out.append(CategoricalGraph(self.nodes[k, :n], e, self.a, self.b))
        return out

    def copy(self):
        return NoisyBatch(self.nodes.copy(), self.edges.copy(), self.mask.copy(), self.a, self.b)


def _sample_rows(probs, rng):
    """Sample one category per row of ``probs`` (..., k) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (u[..., None] >= cdf).sum(-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _noise_batch(schedule: NoiseSchedule, batch: NoisyBatch, t, rng) -> NoisyBatch:
    """Sample G^t ~ q(G^t | G^0) for each graph; t may be per-graph."""
    B, N = batch.nodes.shape
    t = np.broadcast_to(np.asarray(t), (B,))
    bar = schedule.alpha_bar[t]
    X, E = batch.onehots()
    px = bar[:, None, None] * X + (1 - bar[:, None, None]) / batch.a
    pe = bar[:, None, None, None] * E + (1 - bar[:, None, None, None]) / batch.b
    nodes = np.where(batch.mask, _sample_rows(px, rng), -1)
    iu, ju = np.triu_indices(N, 1)
    upper = _sample_rows(pe[:, iu, ju], rng)
    edges = -np.ones((B, N, N), dtype=np.int64)
    edges[:, iu, ju] = upper
    edges[:, ju, iu] = upper
    edges = np.where(batch.pair_mask, edges, -1)
    return NoisyBatch(nodes, edges, batch.mask.copy(), batch.a, batch.b)


def forward_noise(schedule: NoiseSchedule, graph: CategoricalGraph, t: int, seed) -> CategoricalGraph:
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must be in [0, {schedule.T}]")
    if t == 0:
        return graph
    rng = np.random.default_rng(seed)
    return _noise_batch(schedule, NoisyBatch.from_graphs([graph]), t, rng).to_graphs()[0]


# --------------------------------------------------------------------------- denoiser


def time_features(t, T, n_freq=3):
    t = np.asarray(t, dtype=float) / T
    cols = [t]
    for k in range(n_freq):
        w = 2.0 ** k * np.pi
        cols += [np.sin(w * t), np.cos(w * t)]
    return np.stack(cols, axis=-1)


@dataclass
class DenoiserParams:
    a: int
    b: int
    T: int
    hidden: int
    pair_hidden: int
    rounds: int
    weights: dict = field(default_factory=dict)

    @property
    def dt(self):
        return 7

    def shapes(self):
        a, b, d, d2, dt = self.a, self.b, self.hidden, self.pair_hidden, self.dt
        du = a + (b - 1) + dt
        out = {"W0": (du, d)}
        for r in range(self.rounds):
            out[f"U{r}"] = (d, d)
            out[f"V{r}"] = ((b - 1) * d, d)
        out["Wx"] = (2 * d + du, a)
        out["Wq"] = (3 * d + b + dt, d2)
        out["We"] = (d2 + b, b)
        return out

    @classmethod
    def init(cls, a, b, T, hidden=32, pair_hidden=32, rounds=2, seed=0):
        p = cls(a, b, T, hidden, pair_hidden, rounds)
        rng = np.random.default_rng(seed)
        for name, shp in p.shapes().items():
            bound = 1.0 / math.sqrt(max(shp[0], 1))
            p.weights[name] = rng.uniform(-bound, bound, size=shp)
        return p

    def to_vector(self):
        return np.concatenate([self.weights[k].ravel() for k in self.shapes()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        p = DenoiserParams(self.a, self.b, self.T, self.hidden, self.pair_hidden, self.rounds)
        pos = 0
        for name, shp in self.shapes().items():
            size = int(np.prod(shp))
            p.weights[name] = vec[pos:pos + size].reshape(shp).copy()
            pos += size
        if pos != len(vec):
            raise ValueError(f"expected {pos} denoiser parameters, got {len(vec)}")
        return p

    def header(self):
        return {"a": self.a, "b": self.b, "T": self.T, "hidden": self.hidden,
                "pair_hidden": self.pair_hidden, "rounds": self.rounds}


def _denoiser_forward(p: DenoiserParams, X, E, mask, t):
    """Clean-graph logits for one-hot noisy inputs.

    X (B, N, a), E (B, N, N, b), mask (B, N) bool, t (B,). Edge logits are
    symmetric in (i, j) by construction.
    """
    W = p.weights
    m = mask.astype(float)[..., None]
    B, N = X.shape[:2]
    tf = time_features(t, p.T)
    Ec = E[..., 1:]
    deg = Ec.sum(axis=2)
    u = np.concatenate([X, deg, np.broadcast_to(tf[:, None, :], (B, N, tf.shape[1]))], axis=-1) * m
    h0pre = u @ W["W0"]
    h = np.maximum(h0pre, 0.0) * m
    hs, aggs, zs = [h], [], []
    for r in range(p.rounds):
        agg = np.einsum("bijc,bjd->bicd", Ec, h).reshape(B, N, -1)
        z = h @ W[f"U{r}"] + agg @ W[f"V{r}"]
        h = h + np.maximum(z, 0.0) * m
        aggs.append(agg)
        zs.append(z)
        hs.append(h)
    count = np.maximum(m.sum(axis=1), 1.0)  # (B, 1)
    gp = (h * m).sum(axis=1) / count  # graph readout
    cx = np.concatenate([h, u, np.broadcast_to(gp[:, None, :], h.shape)], axis=-1)
    ox = cx @ W["Wx"]
    P1 = h[:, :, None, :] * h[:, None, :, :]
    P2 = h[:, :, None, :] + h[:, None, :, :]
    q = np.concatenate([P1, P2, np.broadcast_to(gp[:, None, None, :], P1.shape), E,
                        np.broadcast_to(tf[:, None, None, :], (B, N, N, tf.shape[1]))], axis=-1)
    zqpre = q @ W["Wq"]
    zq = np.maximum(zqpre, 0.0)
    ce = np.concatenate([zq, E], axis=-1)
    oe = ce @ W["We"]
    cache = dict(u=u, m=m, count=count, h0pre=h0pre, hs=hs, aggs=aggs, zs=zs, cx=cx, q=q, zqpre=zqpre, ce=ce, Ec=Ec)
    return ox, oe, cache


def _sum2(x, y):
    return x.reshape(-1, x.shape[-1]).T @ y.reshape(-1, y.shape[-1])


def _denoiser_backward(p: DenoiserParams, cache, dox, doe):
    W = p.weights
    d = p.hidden
    g = {}
    g["Wx"] = _sum2(cache["cx"], dox)
    dcx = dox @ W["Wx"].T
    dh = dcx[..., :d].copy()
    dgp = dcx[..., -d:].sum(axis=1)
    g["We"] = _sum2(cache["ce"], doe)
    dce = doe @ W["We"].T
    dzq = dce[..., :p.pair_hidden] * (cache["zqpre"] > 0)
    g["Wq"] = _sum2(cache["q"], dzq)
    dq = dzq @ W["Wq"].T
    dP1 = dq[..., :d]
    dP2 = dq[..., d:2 * d]
    dgp = dgp + dq[..., 2 * d:3 * d].sum(axis=(1, 2))
    h = cache["hs"][-1]
    dP1s = dP1 + dP1.transpose(0, 2, 1, 3)
    dh += np.einsum("bijd,bjd->bid", dP1s, h)
    dh += (dP2 + dP2.transpose(0, 2, 1, 3)).sum(axis=2)
    m = cache["m"]
    dh += dgp[:, None, :] * m / cache["count"][:, None, :]
    Ec = cache["Ec"]
    B, N = h.shape[:2]
    for r in reversed(range(p.rounds)):
        hr = cache["hs"][r]
        dz = dh * m * (cache["zs"][r] > 0)
        g[f"U{r}"] = _sum2(hr, dz)
        g[f"V{r}"] = _sum2(cache["aggs"][r], dz)
        dagg = (dz @ W[f"V{r}"].T).reshape(B, N, -1, d)
        dh = dh + dz @ W[f"U{r}"].T + np.einsum("bijc,bicd->bjd", Ec, dagg)
    dh0pre = dh * m * (cache["h0pre"] > 0)
    g["W0"] = _sum2(cache["u"], dh0pre)
    return g


def _ce_terms(ox, oe, X0, E0, mask, pair_mask):
    """Mean node CE + mean edge CE, with gradients w.r.t. the logits."""
    def part(o, target, msk):
        z = o - o.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        cnt = max(msk.sum(), 1)
        loss = -(logp * target).sum(-1)[msk].sum() / cnt
        grad = (np.exp(logp) - target) * msk[..., None] / cnt
        return loss, grad

    lx, gx = part(ox, X0, mask)
    le, ge = part(oe, E0, pair_mask)
    return lx + le, gx, ge


def denoiser_loss(p: DenoiserParams, clean: NoisyBatch, noisy: NoisyBatch, t):
    X0, E0 = clean.onehots()
    Xt, Et = noisy.onehots()
    ox, oe, cache = _denoiser_forward(p, Xt, Et, noisy.mask, t)
    loss, gx, ge = _ce_terms(ox, oe, X0, E0, clean.mask, clean.pair_mask)
    return loss, _denoiser_backward(p, cache, gx, ge)


def predict_clean(p: DenoiserParams, noisy: NoisyBatch, t):
    """Per-entry clean-category distributions (B, N, a) and (B, N, N, b)."""
    Xt, Et = noisy.onehots()
    B = Xt.shape[0]
    ox, oe, _ = _denoiser_forward(p, Xt, Et, noisy.mask, np.full(B, t))
    px = np.exp(ox - ox.max(-1, keepdims=True))
    px /= px.sum(-1, keepdims=True)
    pe = np.exp(oe - oe.max(-1, keepdims=True))
    pe /= pe.sum(-1, keepdims=True)
    return px, pe


@dataclass
class DenoiserHyper:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    hidden: int = 32
    pair_hidden: int = 32
    rounds: int = 2
    holdout_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: str = "none"  # "none" | "cosine"


@dataclass
class DenoiserResult:
    params: DenoiserParams
    loss_history: list[float]
    heldout_loss: float | None
    baseline_entropy: float | None


def marginal_entropy(graphs) -> float:
    """Node-category entropy + edge-category entropy of the empirical marginals."""
    nodes = np.concatenate([g.nodes for g in graphs])
    a, b = graphs[0].a, graphs[0].b
    pairs = np.concatenate([g.edges[np.triu_indices(g.n, 1)] for g in graphs])

    def ent(v, k):
        p = np.bincount(v, minlength=k) / len(v)
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    return ent(nodes, a) + ent(pairs, b)


def evaluate_denoiser(p: DenoiserParams, schedule: NoiseSchedule, graphs, seed, repeats=4) -> float:
    rng = np.random.default_rng(seed)
    clean = NoisyBatch.from_graphs(graphs)
    total = 0.0
    for _ in range(repeats):
        t = rng.integers(1, schedule.T + 1, size=len(graphs))
        noisy = _noise_batch(schedule, clean, t, rng)
        X0, E0 = clean.onehots()
        Xt, Et = noisy.onehots()
        ox, oe, _ = _denoiser_forward(p, Xt, Et, noisy.mask, t)
        total += _ce_terms(ox, oe, X0, E0, clean.mask, clean.pair_mask)[0]
    return total / repeats


def train_denoiser(aux: LabeledDataset | list, schedule: NoiseSchedule, hyper: DenoiserHyper,
                   seed: int) -> DenoiserResult:
    """Minibatch training of the clean-graph predictor with Adam.

    Each example draws t uniformly from 1..T and is noised with q(G^t | G^0).
    """
    graphs = list(aux.graphs if isinstance(aux, LabeledDataset) else aux)
    if not graphs:
        raise ValueError("auxiliary set is empty")
    a, b = graphs[0].a, graphs[0].b
    p = DenoiserParams.init(a, b, schedule.T, hyper.hidden, hyper.pair_hidden, hyper.rounds, seed)
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(graphs))
    n_hold = int(round(hyper.holdout_fraction * len(graphs)))
    if len(graphs) - n_hold < 1:
        n_hold = 0
    held = [graphs[i] for i in order[:n_hold]]
    train_set = [graphs[i] for i in order[n_hold:]]
    mom = {k: np.zeros_like(v) for k, v in p.weights.items()}
    vel = {k: np.zeros_like(v) for k, v in p.weights.items()}
    history = []
    perm = rng.permutation(len(train_set))
    pos = 0
    bs = min(hyper.batch_size, len(train_set))
    for step in range(hyper.steps):
        if pos + bs > len(perm):
            perm = rng.permutation(len(train_set))
            pos = 0
        batch = [train_set[i] for i in perm[pos:pos + bs]]
        pos += bs
        clean = NoisyBatch.from_graphs(batch)
        t = rng.integers(1, schedule.T + 1, size=len(batch))
        noisy = _noise_batch(schedule, clean, t, rng)
        loss, grads = denoiser_loss(p, clean, noisy, t)
        if not np.isfinite(loss):
            raise DenoiserDivergence(f"denoiser loss became non-finite at step {step}")
        history.append(float(loss))
        lr = hyper.lr
        if hyper.lr_decay == "cosine":
            lr *= 0.5 * (1 + math.cos(math.pi * step / hyper.steps))
        c1 = 1 - hyper.beta1 ** (step + 1)
        c2 = 1 - hyper.beta2 ** (step + 1)
        for k, gk in grads.items():
            mom[k] = hyper.beta1 * mom[k] + (1 - hyper.beta1) * gk
            vel[k] = hyper.beta2 * vel[k] + (1 - hyper.beta2) * gk * gk
            p.weights[k] = p.weights[k] - lr * (mom[k] / c1) / (np.sqrt(vel[k] / c2) + 1e-8)
    heldout = baseline = None
    if held:
        heldout = float(evaluate_denoiser(p, schedule, held, [seed, 2]))
        baseline = marginal_entropy(train_set)
    return DenoiserResult(p, history, heldout, baseline)


# --------------------------------------------------------------------------- reverse process


def posterior_probs(pred, xt, Qt, Qbar_prev, Qbar_t):
    """p(x^{t-1} = k | x^t) for predicted clean distributions ``pred`` (..., k).

    ``xt`` holds the current category index per entry.
    """
    denom = Qbar_t[:, xt]  # (k0, ...) -> value x0 Qbar_t x_t^T
    denom = np.moveaxis(denom, 0, -1)
    if np.any((denom <= 0) & (pred > 0)):
        bad = np.argwhere(((denom <= 0) & (pred > 0)).any(-1))[0]
        raise ImpossibleTransition(f"zero normalizer at entry {tuple(bad.tolist())}")
    w = np.where(pred > 0, pred / np.where(denom > 0, denom, 1.0), 0.0)
    mix = w @ Qbar_prev  # sum_x0 w(x0) Qbar_prev[x0, k]
    post = np.moveaxis(Qt[:, xt], 0, -1) * mix  # Q^t[k, x_t]
    z = post.sum(-1, keepdims=True)
    if np.any(z <= 0):
        bad = np.argwhere(z[..., 0] <= 0)[0]
        raise ImpossibleTransition(f"zero normalizer at entry {tuple(bad.tolist())}")
    return post / z


def _denoise_batch(p: DenoiserParams, schedule: NoiseSchedule, noisy: NoisyBatch, t: int, rng) -> NoisyBatch:
    px, pe = predict_clean(p, noisy, t)
    a, b = noisy.a, noisy.b
    try:
        post_x = posterior_probs(px, np.maximum(noisy.nodes, 0), schedule.Q(t, a),
                                 schedule.Qbar(t - 1, a), schedule.Qbar(t, a))
        B, N = noisy.nodes.shape
        iu, ju = np.triu_indices(N, 1)
        et = np.maximum(noisy.edges[:, iu, ju], 0)
        post_e = posterior_probs(pe[:, iu, ju], et, schedule.Q(t, b),
                                 schedule.Qbar(t - 1, b), schedule.Qbar(t, b))
    except ImpossibleTransition as exc:
        raise ImpossibleTransition(f"t={t}: {exc}") from None
    nodes = np.where(noisy.mask, _sample_rows(post_x, rng), -1)
    upper = _sample_rows(post_e, rng)
    edges = -np.ones_like(noisy.edges)
    edges[:, iu, ju] = upper
    edges[:, ju, iu] = upper
    edges = np.where(noisy.pair_mask, edges, -1)
    return NoisyBatch(nodes, edges, noisy.mask.copy(), a, b)


def denoise_step(p: DenoiserParams, schedule: NoiseSchedule, noisy, t: int, seed):
    """One reverse step G^t -> G^{t-1}; accepts a graph or a list of graphs."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}]")
    single = isinstance(noisy, CategoricalGraph)
    graphs = [noisy] if single else list(noisy)
    rng = np.random.default_rng(seed)
    out = _denoise_batch(p, schedule, NoisyBatch.from_graphs(graphs), t, rng).to_graphs()
    return out[0] if single else out


def _reverse(p, schedule, batch: NoisyBatch, K: int, rng) -> NoisyBatch:
    for t in range(K, 0, -1):
        batch = _denoise_batch(p, schedule, batch, t, rng)
    return batch


def sdedit_generate(p: DenoiserParams, schedule: NoiseSchedule, inputs, K: int, seed):
    """Noise the input(s) to step K, then run the reverse chain down to 0.

    Node counts are inherited from the inputs. Accepts one graph or a list.
    """
    if not 0 <= K <= schedule.T:
        raise ValueError(f"K must be in [0, {schedule.T}]")
    single = isinstance(inputs, CategoricalGraph)
    graphs = [inputs] if single else list(inputs)
    if K == 0:
        return inputs if single else graphs
    rng = np.random.default_rng(seed)
    batch = _noise_batch(schedule, NoisyBatch.from_graphs(graphs), K, rng)
    out = _reverse(p, schedule, batch, K, rng).to_graphs()
    return out[0] if single else out


def sample_unconditional(p: DenoiserParams, schedule: NoiseSchedule, sizes, seed):
    """Generate graphs with the given node counts from the uniform limit."""
    rng = np.random.default_rng(seed)
    sizes = list(sizes)
    N = max(sizes)
    B = len(sizes)
    mask = np.arange(N)[None, :] < np.asarray(sizes)[:, None]
    nodes = np.where(mask, rng.integers(0, p.a, size=(B, N)), -1)
    iu, ju = np.triu_indices(N, 1)
    upper = rng.integers(0, p.b, size=(B, len(iu)))
    edges = -np.ones((B, N, N), dtype=np.int64)
    edges[:, iu, ju] = upper
    edges[:, ju, iu] = upper
    pair_mask = mask[:, :, None] & mask[:, None, :] & ~np.eye(N, dtype=bool)
    edges = np.where(pair_mask, edges, -1)
    batch = NoisyBatch(nodes, edges, mask, p.a, p.b)
    return _reverse(p, schedule, batch, schedule.T, rng).to_graphs()
