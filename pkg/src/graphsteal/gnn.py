"""Bias-free homogeneous GCN classifier with analytic gradients.

Layer i computes ``H_i = ReLU(S H_{i-1} W_i)`` with
``S = D^-1/2 (A + I) D^-1/2``; node states are sum-pooled and mapped to
logits by a bias-free readout. Scaling every weight by s scales the logits
by ``s ** (depth + 1)``.

Parameter vector layout (version 1): conv weights in layer order, then the
readout, each block flattened row-major.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graphdata import CategoricalGraph, LabeledDataset, RelaxedGraph

log = logging.getLogger(__name__)

PARAM_LAYOUT_VERSION = 1


class DimensionError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class GnnClassifier:
    conv_weights: list[np.ndarray]
    readout: np.ndarray
    seed: int | None = None

    @property
    def depth(self) -> int:
        return len(self.conv_weights)

    @property
    def homogeneity_degree(self) -> int:
        return self.depth + 1

    @property
    def in_dim(self) -> int:
        return self.conv_weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.readout.shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.conv_weights] + [self.num_classes]

    def weights(self) -> list[np.ndarray]:
        return [*self.conv_weights, self.readout]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights()])

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights())

    def with_vector(self, theta) -> "GnnClassifier":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got {theta.shape}")
        out, pos = [], 0
        for w in self.weights():
            out.append(theta[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
        return GnnClassifier(out[:-1], out[-1], self.seed)

    def scaled(self, sigma: float) -> "GnnClassifier":
        return self.with_vector(sigma * self.to_vector())

    @classmethod
    def init(cls, in_dim, hidden, num_classes, seed, scale=1.0) -> "GnnClassifier":
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, num_classes]
        ws = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = scale / math.sqrt(d_in)
            ws.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        return cls(ws[:-1], ws[-1], seed)


def batch_inputs(graphs, a=None):
    """Stack graphs into padded node features (B, N, a) and adjacency (B, N, N).

    Padding rows are zero; because there is no bias, padded nodes stay at zero
    through every layer and do not change the pooled sum.
    """
    graphs = list(graphs)
    n_pad = max(g.n for g in graphs)
    a = a or (graphs[0].a if isinstance(graphs[0], CategoricalGraph) else graphs[0].x.shape[1])
    X = np.zeros((len(graphs), n_pad, a))
    A = np.zeros((len(graphs), n_pad, n_pad))
    for k, g in enumerate(graphs):
        n = g.n
        if isinstance(g, CategoricalGraph):
            if g.a != a:
                raise DimensionError(f"graph has {g.a} node categories, model expects {a}")
            X[k, np.arange(n), g.nodes] = 1.0
            A[k, :n, :n] = g.edges != 0
        else:
            if g.x.shape[1] != a:
                raise DimensionError(f"graph has {g.x.shape[1]} node categories, model expects {a}")
            X[k, :n] = g.x
            A[k, :n, :n] = g.adjacency
    return X, A


def _normalize(A):
    n = A.shape[-1]
    At = A + np.eye(n)
    deg = At.sum(-1)
    r = deg ** -0.5
    S = r[..., :, None] * At * r[..., None, :]
    return S, deg


@dataclass
class _Cache:
    S: np.ndarray
    deg: np.ndarray
    H: list = field(default_factory=list)
    SH: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    pooled: np.ndarray | None = None


def forward_batch(clf: GnnClassifier, X, A, return_cache=False):
    if X.shape[-1] != clf.in_dim:
        raise DimensionError(f"input has {X.shape[-1]} node categories, model expects {clf.in_dim}")
    S, deg = _normalize(A)
    cache = _Cache(S, deg, [X])
    H = X
    for W in clf.conv_weights:
        SH = S @ H
        Z = SH @ W
        H = np.maximum(Z, 0.0)
        cache.SH.append(SH)
        cache.Z.append(Z)
        cache.H.append(H)
    cache.pooled = H.sum(axis=1)
    logits = cache.pooled @ clf.readout
    return (logits, cache) if return_cache else logits


def backward_batch(clf: GnnClassifier, cache: _Cache, dlogits, params=True, inputs=False):
    """Backpropagate per-sample output gradients.

    Returns ``(dtheta, dX, dA)``: dtheta is (B, P) per-sample parameter
    gradients in vector layout; dX, dA are input gradients (None unless
    ``inputs``). dA treats every ordered entry A[i, j] as independent.
    """
    grads = []
    grads.append(cache.pooled[:, :, None] * dlogits[:, None, :])
    dpooled = dlogits @ clf.readout.T
    dH = np.broadcast_to(dpooled[:, None, :], cache.H[-1].shape)
    dS = np.zeros_like(cache.S) if inputs else None
    for k in reversed(range(clf.depth)):
        W = clf.conv_weights[k]
        dZ = dH * (cache.Z[k] > 0)
        if params:
            grads.append(np.einsum("bnd,bne->bde", cache.SH[k], dZ))
        dSH = dZ @ W.T
        if inputs:
            dS += dSH @ cache.H[k].transpose(0, 2, 1)
        if k > 0 or inputs:
            dH = cache.S.transpose(0, 2, 1) @ dSH
    dtheta = None
    if params:
        blocks = grads[1:][::-1] + grads[:1]
        dtheta = np.concatenate([g.reshape(g.shape[0], -1) for g in blocks], axis=1)
    if not inputs:
        return dtheta, None, None
    dX = dH
    S, deg = cache.S, cache.deg
    r = deg ** -0.5
    ddeg = -0.5 / deg * ((dS * S).sum(-1) + (dS * S).sum(-2))
    dA = dS * r[..., :, None] * r[..., None, :] + ddeg[..., :, None]
    return dtheta, dX, dA


def forward(clf: GnnClassifier, graph) -> np.ndarray:
    X, A = batch_inputs([graph], clf.in_dim)
    return forward_batch(clf, X, A)[0]


def logits_of(clf: GnnClassifier, graphs) -> np.ndarray:
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, clf.num_classes))
    X, A = batch_inputs(graphs, clf.in_dim)
    return forward_batch(clf, X, A)


def embed(clf: GnnClassifier, graphs) -> np.ndarray:
    """Sum-pooled last hidden layer (the penultimate representation)."""
    X, A = batch_inputs(list(graphs), clf.in_dim)
    _, cache = forward_batch(clf, X, A, return_cache=True)
    return cache.pooled


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, y):
    """Per-sample ``log(1 + sum_{j!=y} exp(-(z_y - z_j)))``, i.e. softmax CE."""
    y = np.asarray(y)
    return -log_softmax(logits)[np.arange(len(y)), y]


def ce_dlogits(logits, y):
    p = softmax(logits)
    p[np.arange(len(y)), y] -= 1.0
    return p


def runner_up(logits, y):
    """Index of the largest wrong-class logit; ties go to the smallest index."""
    masked = np.array(logits, dtype=float, copy=True)
    masked[np.arange(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def margins(logits, y):
    y = np.asarray(y)
    j = runner_up(logits, y)
    idx = np.arange(len(y))
    return logits[idx, y] - logits[idx, j]


def confidence(clf: GnnClassifier, graph, y) -> float:
    return float(softmax(forward(clf, graph))[y])


def confidences(clf: GnnClassifier, graphs, labels) -> np.ndarray:
    p = softmax(logits_of(clf, graphs))
    return p[np.arange(len(p)), np.asarray(labels)]


def margin_and_grad(clf: GnnClassifier, graph, y):
    m, g = margin_features(clf, [graph], [y])
    return float(m[0]), g[0]


def margin_features(clf: GnnClassifier, graphs, labels):
    """Margins and per-sample gradients of ``f_y - f_{j*}`` w.r.t. theta."""
    y = np.asarray(labels)
    if clf.num_classes < 2:
        raise DimensionError("margins need at least two classes")
    X, A = batch_inputs(list(graphs), clf.in_dim)
    logits, cache = forward_batch(clf, X, A, return_cache=True)
    j = runner_up(logits, y)
    idx = np.arange(len(y))
    d = np.zeros_like(logits)
    d[idx, y] += 1.0
    d[idx, j] -= 1.0
    dtheta, _, _ = backward_batch(clf, cache, d)
    return logits[idx, y] - logits[idx, j], dtheta


def check_homogeneity(clf: GnnClassifier, graph, sigma: float) -> float:
    """Max abs deviation of f(G; sigma*theta) from sigma**L * f(G; theta)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    base = forward(clf, graph) * sigma ** clf.homogeneity_degree
    return float(np.max(np.abs(forward(clf.scaled(sigma), graph) - base)))


# --------------------------------------------------------------------------- training


@dataclass
class DPConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    delta: float = 1e-5
    epsilon: float | None = None

    def validate(self):
        if self.clip_norm <= 0:
            raise ValueError("dp.clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("dp.noise_multiplier must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 1000
    hidden: tuple[int, ...] = (16, 16)
    seed: int = 0
    init_scale: float = 1.0
    dp: DPConfig | None = None

    def validate(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.dp is not None:
            self.dp.validate()


@dataclass
class TrainResult:
    model: GnnClassifier
    loss_history: list[float]
    monotone: bool
    epsilon: float | None = None


def gaussian_epsilon(noise_multiplier: float, steps: int, delta: float) -> float:
    """(eps, delta) of ``steps`` full-batch Gaussian mechanisms via RDP.

    Each step has RDP ``alpha / (2 sigma^2)``; conversion uses
    ``eps = rdp + log(1/delta) / (alpha - 1)`` minimized over alpha.
    """
    if noise_multiplier <= 0:
        return math.inf
    # closed-form minimizer of T*a/(2s^2) + log(1/d)/(a-1)
    c = steps / (2 * noise_multiplier ** 2)
    alpha = 1 + math.sqrt(math.log(1 / delta) / c)
    return c * alpha + math.log(1 / delta) / (alpha - 1)


def noise_for_epsilon(epsilon: float, steps: int, delta: float) -> float:
    lo, hi = 1e-3, 1e4
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if gaussian_epsilon(mid, steps, delta) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def loss_and_grad(clf: GnnClassifier, X, A, y, per_sample=False):
    logits, cache = forward_batch(clf, X, A, return_cache=True)
    losses = cross_entropy(logits, y)
    dtheta, _, _ = backward_batch(clf, cache, ce_dlogits(logits, y))
    if per_sample:
        return losses, dtheta
    return losses.mean(), dtheta.mean(axis=0)


def train(dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Full-batch gradient descent on the mean cross-entropy.

    With ``config.dp`` each per-sample gradient is clipped to ``clip_norm``
    and Gaussian noise of std ``clip_norm * noise_multiplier`` is added to
    their sum before averaging.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    dataset.check_all_classes()
    clf = GnnClassifier.init(dataset.a, config.hidden, dataset.num_classes, config.seed,
                              config.init_scale)
    X, A = batch_inputs(dataset.graphs, dataset.a)
    y = np.asarray(dataset.labels)
    theta = clf.to_vector()
    dp = config.dp
    nm = None
    if dp is not None:
        nm = dp.noise_multiplier
        if dp.epsilon is not None:
            nm = noise_for_epsilon(dp.epsilon, config.epochs, dp.delta)
    noise_rng = np.random.default_rng([config.seed, 0xD9])
    history = []
    monotone = True
    for step in range(config.epochs):
        model = clf.with_vector(theta)
        losses, per = loss_and_grad(model, X, A, y, per_sample=True)
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at step {step}")
        if history and loss > history[-1] + 1e-6:
            monotone = False
        history.append(loss)
        if dp is None:
            grad = per.mean(axis=0)
        else:
            norms = np.linalg.norm(per, axis=1)
            scale = np.minimum(1.0, dp.clip_norm / np.maximum(norms, 1e-300))
            total = (per * scale[:, None]).sum(axis=0)
            if nm > 0:
                total = total + noise_rng.normal(0.0, dp.clip_norm * nm, size=total.shape)
            grad = total / len(y)
        theta = theta - config.lr * grad
    model = clf.with_vector(theta)
    final = float(cross_entropy(forward_batch(model, X, A), y).mean())
    if not np.isfinite(final):
        raise DivergenceError(f"training loss became non-finite at step {config.epochs}")
    history.append(final)
    eps = None
    if dp is not None:
        eps = gaussian_epsilon(nm, config.epochs, dp.delta)
    return TrainResult(model, history, monotone, eps)


def accuracy(clf: GnnClassifier, dataset: LabeledDataset) -> float:
    pred = np.argmax(logits_of(clf, dataset.graphs), axis=1)
    return float(np.mean(pred == np.asarray(dataset.labels)))


# --------------------------------------------------------------------------- relaxed loss


def relaxed_loss_and_grad(clf: GnnClassifier, relaxed: list[RelaxedGraph], labels):
    """Cross-entropy on relaxed graphs with gradients w.r.t. the simplices.

    Returns per-graph losses and lists of (dx, de) where de is w.r.t. the
    full (n, n, b) tensor under the tie e[i, j] = e[j, i] (the gradient is
    placed symmetrically, so a step on the upper triangle and its mirror is
    the same step).
    """
    y = np.asarray(labels)
    X, A = batch_inputs(relaxed, clf.in_dim)
    logits, cache = forward_batch(clf, X, A, return_cache=True)
    losses = cross_entropy(logits, y)
    _, dX, dA = backward_batch(clf, cache, ce_dlogits(logits, y), params=False, inputs=True)
    out = []
    for k, g in enumerate(relaxed):
        n, b = g.n, g.e.shape[2]
        dadj = dA[k, :n, :n]
        dadj = dadj + dadj.T
        np.fill_diagonal(dadj, 0.0)
        de = np.zeros((n, n, b))
        # A_ij = 1 - e_ij[0]; only the "no edge" channel enters the classifier
        de[:, :, 0] = -dadj
        out.append((dX[k, :n].copy(), de))
    return losses, out
