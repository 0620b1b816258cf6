"""Numpy models with hand-written backward passes, losses and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, xlogy

from .graph import Graph, NormAdj, spmm
from .propagation import DEFAULT_FLOOR

CHECKPOINT_FORMAT = "propdistill-checkpoint"
CHECKPOINT_VERSION = 1


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator so init and dropout masks replay bit-for-bit."""
    return np.random.Generator(np.random.Philox(seed))


def glorot(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _dropout(h, rate, train_mode, rng):
    if not train_mode or rate <= 0.0:
        return h, None
    mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * mask, mask


def _check_dim(X, expected):
    if X.ndim != 2 or X.shape[1] != expected:
        raise ValueError(f"input has shape {X.shape}, model expects {expected} columns")


@dataclass
class MlpModel:
    weights: list
    biases: list
    dropout: float = 0.5

    kind = "mlp"

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, X, train_mode=False, rng=None, cache=None):
        X = np.asarray(X, dtype=np.float64)
        _check_dim(X, self.dims[0])
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
                h, mask = _dropout(h, self.dropout, train_mode, rng)
                if cache is not None:
                    cache.append((h > 0, mask))
        return h

    def backward(self, cache, dout):
        grads = []
        d = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                active, mask = cache[2 * i + 1]
                if mask is not None:
                    d = d * mask
                d = d * active
            h_in = cache[2 * i]
            grads.append(d.sum(axis=0))
            grads.append(h_in.T @ d)
            d = d @ self.weights[i].T
        grads.reverse()
        self._dinput = d
        return grads


def init_mlp(dims, rng, dropout=0.5, zero_output=False) -> MlpModel:
    """Glorot-uniform weights, zero biases. ``zero_output`` starts from uniform predictions."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    ws = [glorot(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
    if zero_output:
        ws[-1][:] = 0.0
    bs = [np.zeros(b) for b in dims[1:]]
    return MlpModel(ws, bs, dropout)


def mlp_forward(model: MlpModel, X, train_mode=False, rng=None):
    return model.forward(X, train_mode, rng)


@dataclass
class SageModel:
    """Two mean-aggregator GraphSAGE layers: h' = h Ws + mean_N(h) Wn + b."""

    w_self: list
    w_neigh: list
    biases: list
    dropout: float = 0.5

    kind = "sage"

    @property
    def dims(self):
        return [self.w_self[0].shape[0]] + [w.shape[1] for w in self.w_self]

    def params(self):
        out = []
        for ws, wn, b in zip(self.w_self, self.w_neigh, self.biases):
            out += [ws, wn, b]
        return out

    def forward(self, X, agg, train_mode=False, rng=None, cache=None):
        X = np.asarray(X, dtype=np.float64)
        _check_dim(X, self.dims[0])
        h = X
        last = len(self.w_self) - 1
        for i in range(len(self.w_self)):
            nb = np.asarray(agg @ h)
            if cache is not None:
                cache.append((h, nb))
            h = h @ self.w_self[i] + nb @ self.w_neigh[i] + self.biases[i]
            if i < last:
                h = np.maximum(h, 0.0)
                h, mask = _dropout(h, self.dropout, train_mode, rng)
                if cache is not None:
                    cache.append((h > 0, mask))
        return h

    def backward(self, cache, dout, agg):
        grads = []
        d = dout
        agg_t = agg.T.tocsr()
        n = len(self.w_self)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                active, mask = cache[2 * i + 1]
                if mask is not None:
                    d = d * mask
                d = d * active
            h_in, nb = cache[2 * i]
            grads += [d.sum(axis=0), nb.T @ d, h_in.T @ d]
            d = d @ self.w_self[i].T + np.asarray(agg_t @ (d @ self.w_neigh[i].T))
        grads.reverse()
        return grads


def init_sage(in_dim, hidden, out_dim, rng, dropout=0.5) -> SageModel:
    dims = [in_dim, hidden, out_dim]
    ws, wn, bs = [], [], []
    for a, b in zip(dims[:-1], dims[1:]):
        ws.append(glorot(a, b, rng))
        wn.append(glorot(a, b, rng))
        bs.append(np.zeros(b))
    return SageModel(ws, wn, bs, dropout)


def sage_forward(model: SageModel, X, graph: Graph | sp.spmatrix, train_mode=False, rng=None):
    agg = graph.mean_aggregator() if isinstance(graph, Graph) else graph
    return model.forward(X, agg, train_mode, rng)


@dataclass
class AppnpModel:
    """MLP predictor followed by K steps of Z <- g*A Z + (1-g) Z0."""

    base: MlpModel
    gamma: float = 0.9
    k: int = 10

    kind = "appnp"

    def __post_init__(self):
        if self.k < 1 or not 0.0 < self.gamma < 1.0:
            raise ValueError("APPNP needs k >= 1 and gamma in (0, 1)")

    @property
    def dims(self):
        return self.base.dims

    @property
    def dropout(self):
        return self.base.dropout

    def params(self):
        return self.base.params()

    def forward(self, X, adj: NormAdj, train_mode=False, rng=None, cache=None):
        z0 = self.base.forward(X, train_mode, rng, cache)
        z = z0
        for _ in range(self.k):
            z = self.gamma * spmm(adj, z) + (1.0 - self.gamma) * z0
        return z

    def backward(self, cache, dout, adj: NormAdj):
        # A is symmetric, so the transpose product reuses spmm
        g = dout
        dz0 = np.zeros_like(dout)
        for _ in range(self.k):
            dz0 += (1.0 - self.gamma) * g
            g = self.gamma * spmm(adj, g)
        return self.base.backward(cache, dz0 + g)


def softmax_rows(logits) -> np.ndarray:
    Z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite logits")
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _softmax_backward(P, dP):
    return P * (dP - np.sum(P * dP, axis=1, keepdims=True))


def _as_idx(idx, n):
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValueError("empty index set")
    return idx


def loss_cross_entropy(P, labels, idx):
    """Mean negative log-likelihood over ``idx`` and its gradient w.r.t. the logits."""
    P = np.asarray(P, dtype=np.float64)
    idx = _as_idx(idx, P.shape[0])
    y = np.asarray(labels)[idx]
    picked = P[idx, y]
    loss = -np.mean(np.log(np.maximum(picked, np.finfo(float).tiny)))
    grad = np.zeros_like(P)
    grad[idx] = P[idx]
    grad[idx, y] -= 1.0
    grad /= idx.size
    return float(loss), grad


def loss_kl(target, pred, idx, floor=1e-12, reverse=False):
    """Mean row KL over ``idx`` and its gradient w.r.t. the logits behind ``pred``.

    Default is KL(target || pred); ``reverse`` computes KL(pred || target).
    """
    T = np.asarray(target, dtype=np.float64)
    P = np.asarray(pred, dtype=np.float64)
    idx = _as_idx(idx, P.shape[0])
    t, p = T[idx], P[idx]
    if np.any(p < floor):
        raise ValueError(f"prediction entry below floor {floor}")
    grad = np.zeros_like(P)
    if not reverse:
        loss = np.sum(xlogy(t, t) - t * np.log(p)) / idx.size
        grad[idx] = (p - t) / idx.size
    else:
        t = np.maximum(t, floor)
        r = np.log(p) - np.log(t)
        loss = np.sum(p * r) / idx.size
        grad[idx] = _softmax_backward(p, r + 1.0) / idx.size
    return float(loss), grad


def student_kl(logits, target, idx, operator=None, floor=DEFAULT_FLOOR, reverse=False):
    """KL between ``target`` and the student's (optionally operator-transformed) output.

    ``operator`` is a sparse matrix applied to softmax(logits) before a clamp at
    ``floor`` and row renormalization. Returns (loss, dlogits).
    """
    Z = np.asarray(logits, dtype=np.float64)
    idx = _as_idx(idx, Z.shape[0])
    T = np.asarray(target, dtype=np.float64)
    t = T[idx]
    n = idx.size

    if operator is None:
        logq = log_softmax(Z[idx], axis=1)
        q = np.exp(logq)
        grad = np.zeros_like(Z)
        if not reverse:
            loss = np.sum(xlogy(t, t) - t * logq) / n
            grad[idx] = (q - t) / n
        else:
            r = logq - np.log(np.maximum(t, floor))
            loss = np.sum(q * r) / n
            grad[idx] = _softmax_backward(q, r + 1.0) / n
        return float(loss), grad

    P = softmax_rows(Z)
    M = np.asarray(operator @ P)
    rows = M[idx]
    active = rows > floor
    C = np.where(active, rows, floor)
    s = C.sum(axis=1, keepdims=True)
    Q = C / s
    dQ = np.zeros_like(rows)
    if not reverse:
        loss = np.sum(xlogy(t, t) - t * np.log(Q)) / n
        dQ = -t / Q / n
    else:
        r = np.log(Q) - np.log(np.maximum(t, floor))
        loss = np.sum(Q * r) / n
        dQ = (r + 1.0) / n
    dC = (dQ - np.sum(dQ * Q, axis=1, keepdims=True)) / s
    dM = np.zeros_like(M)
    dM[idx] = dC * active
    dP = np.asarray(operator.T @ dM)
    return float(loss), _softmax_backward(P, dP)


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_init(params, **hyper) -> AdamState:
    st = AdamState(**hyper)
    st.m = [np.zeros_like(p) for p in params]
    st.v = [np.zeros_like(p) for p in params]
    return st


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter / gradient / state count mismatch")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(closure, params, n_samples=200, step=1e-5, seed=0):
    """Max relative error between ``closure``'s analytic grads and central differences.

    ``closure()`` returns (loss, grads) at the current parameter values.
    """
    _, analytic = closure()
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in coords:
        flat = params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, _ = closure()
        flat[j] = orig - step
        down, _ = closure()
        flat[j] = orig
        num = (up - down) / (2 * step)
        ana = analytic[i].reshape(-1)[j]
        denom = max(abs(num), abs(ana), 1e-7)
        worst = max(worst, abs(num - ana) / denom)
    return worst


def save_checkpoint(model, path, extra=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dropout": model.dropout,
        "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in model.params()],
    }
    if isinstance(model, AppnpModel):
        doc["gamma"], doc["k"] = model.gamma, model.k
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))
    return Path(path)


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    arrs = [np.array(p["data"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]]
    kind = doc["kind"]
    if kind in ("mlp", "appnp"):
        mlp = MlpModel(arrs[0::2], arrs[1::2], doc["dropout"])
        return mlp if kind == "mlp" else AppnpModel(mlp, doc["gamma"], doc["k"])
    if kind == "sage":
        return SageModel(arrs[0::3], arrs[1::3], arrs[2::3], doc["dropout"])
    raise ValueError(f"unknown model kind {kind!r}")
