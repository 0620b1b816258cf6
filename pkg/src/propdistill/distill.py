"""Teacher training, student distillation and evaluation."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import SplitSpec
from .graph import Graph, NormAdj, laplacian_quadratic, normalize_adjacency
from .nn import (
    AppnpModel,
    adam_init,
    adam_step,
    init_mlp,
    init_sage,
    loss_cross_entropy,
    make_rng,
    softmax_rows,
    student_kl,
)
from .propagation import DEFAULT_FLOOR, PropagationSpec, propagate_recursive, propagate_recursive_fix

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("plain", "invkd", "pnd", "pnd_fix", "conv")
TARGET_VARIANTS = ("plain", "pnd", "pnd_fix")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 5e-4
    dropout: float = 0.5
    epochs: int = 500
    patience: int = 50
    seed: int = 0
    batch_size: int | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TeacherConfig(TrainConfig):
    arch: str = "sage"
    hidden: int = 128
    appnp_gamma: float = 0.9
    appnp_k: int = 10
    self_loops: bool = False


@dataclass
class DistillConfig(TrainConfig):
    loss_variant: str = "plain"
    alpha: float = 0.0
    gamma: float = 0.9
    steps: int = 10
    hidden: tuple = (128,)
    kl_reverse: bool = False
    temperature: float = 1.0
    floor: float = DEFAULT_FLOOR
    # clamped (2I - gA)P entries pass no gradient; a uniform start keeps them active
    zero_output_init: bool = True

    def __post_init__(self):
        super().__post_init__()
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.hidden = tuple(self.hidden)

    def propagation(self, split: SplitSpec | None = None) -> PropagationSpec | None:
        variant = {"pnd": "recursive", "pnd_fix": "recursive_fix", "invkd": "inverse", "conv": "conv"}
        if self.loss_variant == "plain":
            return None
        fixed = tuple(split.train_idx.tolist()) if self.loss_variant == "pnd_fix" else None
        return PropagationSpec(variant[self.loss_variant], self.gamma, self.steps, fixed)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    model: object = field(default=None, repr=False)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def evaluate(model, X, labels, idx, context=None) -> float:
    """Accuracy of argmax predictions over ``idx``; ties go to the lowest class."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index set")
    logits = model.forward(X) if context is None else model.forward(X, context)
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == np.asarray(labels)[idx]))


def production_eval(tran_acc: float, ind_acc: float) -> float:
    """8:2 interpolation of observed-node and unseen-node accuracy."""
    for v in (tran_acc, ind_acc):
        if not 0.0 <= v <= 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
    return (4.0 * tran_acc + ind_acc) / 5.0


def _visible_features(graph: Graph, split: SplitSpec) -> np.ndarray:
    X = np.array(graph.features, dtype=np.float64)
    if split.production:
        X[split.ind_idx] = 0.0
    return X


def _batches(idx, batch_size, rng):
    if not batch_size or batch_size >= idx.size:
        yield idx
        return
    order = rng.permutation(idx)
    for s in range(0, order.size, batch_size):
        yield np.sort(order[s : s + batch_size])


def _fit(model, context, X, labels, split, cfg: TrainConfig, loss_fn, adj: NormAdj, batch_idx):
    """Adam loop with early stopping on validation accuracy; restores the best parameters."""
    rng = make_rng([cfg.seed, 1])
    params = model.params()
    state = adam_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = TrainReport()
    best_params = [p.copy() for p in params]
    stale = 0
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(batch_idx, cfg.batch_size, rng):
            cache = []
            args = (X, context) if context is not None else (X,)
            logits = model.forward(*args, train_mode=True, rng=rng, cache=cache)
            loss, dlogits = loss_fn(logits, batch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = model.backward(cache, dlogits, context) if context is not None else model.backward(cache, dlogits)
            adam_step(params, grads, state)
            losses.append(loss)
        logits = model.forward(X, context) if context is not None else model.forward(X)
        pred = np.argmax(logits, axis=1)
        val_acc = float(np.mean(pred[split.val_idx] == labels[split.val_idx]))
        smooth = laplacian_quadratic(adj, softmax_rows(logits))
        report.records.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_acc": val_acc, "laplacian": smooth}
        )
        if val_acc > report.best_val_acc:
            report.best_val_acc, report.best_epoch = val_acc, epoch
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, b in zip(params, best_params):
        p[...] = b
    report.model = model
    return report


def train_teacher(graph: Graph, split: SplitSpec, arch: str = "sage", config: TeacherConfig | None = None):
    """Cross-entropy training of a GNN teacher; returns (model, P_t, report)."""
    cfg = copy.copy(config) if config is not None else TeacherConfig()
    cfg.arch = arch
    if split.train_idx.size == 0:
        raise ValueError("empty training set")
    rng = make_rng([cfg.seed, 0])
    X = _visible_features(graph, split)
    labels = np.asarray(graph.labels)
    if arch == "sage":
        model = init_sage(graph.feature_dim, cfg.hidden, graph.num_classes, rng, cfg.dropout)
        context = graph.mean_aggregator()
    elif arch == "appnp":
        base = init_mlp([graph.feature_dim, cfg.hidden, graph.num_classes], rng, cfg.dropout)
        model = AppnpModel(base, cfg.appnp_gamma, cfg.appnp_k)
        context = normalize_adjacency(graph, self_loops=cfg.self_loops)
    else:
        raise ValueError(f"unknown teacher architecture {arch!r}")

    def loss_fn(logits, batch):
        return loss_cross_entropy(softmax_rows(logits), labels, batch)

    adj = normalize_adjacency(graph)
    report = _fit(model, context, X, labels, split, cfg, loss_fn, adj, split.train_idx)
    P_t = softmax_rows(model.forward(X, context))
    return model, P_t, report


def prepare_target(P_t, adj: NormAdj, cfg: DistillConfig, split: SplitSpec) -> np.ndarray:
    if cfg.loss_variant not in TARGET_VARIANTS:
        raise ValueError(f"{cfg.loss_variant!r} transforms the student side, not the target")
    P_t = np.asarray(P_t, dtype=np.float64)
    if cfg.loss_variant == "plain":
        return P_t
    if cfg.loss_variant == "pnd":
        return propagate_recursive(P_t, adj, cfg.gamma, cfg.steps)
    return propagate_recursive_fix(P_t, adj, cfg.gamma, cfg.steps, split.train_idx)


def student_operator(adj: NormAdj, cfg: DistillConfig):
    """Sparse matrix applied to the student's probabilities, or None."""
    if cfg.loss_variant == "invkd":
        n = adj.num_nodes
        return sp.csr_matrix(2.0 * sp.eye(n) - cfg.gamma * adj.matrix)
    if cfg.loss_variant == "conv":
        return adj.matrix
    return None


def distill_student(graph: Graph, P_t, split: SplitSpec, cfg: DistillConfig, adj: NormAdj | None = None):
    """Train an MLP on node features against the teacher's soft labels."""
    adj = normalize_adjacency(graph) if adj is None else adj
    P_t = np.asarray(P_t, dtype=np.float64)
    if P_t.shape != (graph.num_nodes, graph.num_classes):
        raise ValueError("teacher output shape does not match the graph")
    if cfg.loss_variant in TARGET_VARIANTS:
        target, operator = prepare_target(P_t, adj, cfg, split), None
    else:
        target, operator = P_t, student_operator(adj, cfg)

    X = _visible_features(graph, split)
    labels = np.asarray(graph.labels)
    distill_idx = split.observed(graph.num_nodes)
    rng = make_rng([cfg.seed, 0])
    model = init_mlp([graph.feature_dim, *cfg.hidden, graph.num_classes], rng, cfg.dropout,
                     zero_output=cfg.zero_output_init)
    temp = cfg.temperature

    def loss_fn(logits, batch):
        grad = np.zeros_like(logits)
        total = 0.0
        if cfg.alpha > 0.0:
            ce, dce = loss_cross_entropy(softmax_rows(logits), labels, split.train_idx)
            total += cfg.alpha * ce
            grad += cfg.alpha * dce
        if cfg.alpha < 1.0:
            kl, dkl = student_kl(logits / temp, target, batch, operator, cfg.floor, cfg.kl_reverse)
            total += (1.0 - cfg.alpha) * kl
            grad += (1.0 - cfg.alpha) * dkl / temp
        return total, grad

    report = _fit(model, None, X, labels, split, cfg, loss_fn, adj, distill_idx)
    return model, report


def summarize_student(model, graph: Graph, split: SplitSpec) -> dict:
    """Test accuracy; in production mode also tran/ind accuracy and the 8:2 score.

    Inference reads the raw features of every node, including held-out ones:
    the student needs no graph once trained.
    """
    X, labels = graph.features, graph.labels
    if not split.production:
        return {"test_acc": evaluate(model, X, labels, split.test_idx)}
    tran = evaluate(model, X, labels, split.obs_idx)
    ind = evaluate(model, X, labels, split.ind_idx)
    return {
        "test_acc": evaluate(model, X, labels, split.test_idx),
        "tran_acc": tran,
        "ind_acc": ind,
        "prod_score": production_eval(tran, ind),
    }


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def save_matrix(M, path):
    np.savetxt(Path(path), np.asarray(M), delimiter=",", fmt="%.17g")


def load_matrix(path) -> np.ndarray:
    return np.loadtxt(Path(path), delimiter=",", ndmin=2)
