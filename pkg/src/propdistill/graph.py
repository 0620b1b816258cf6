"""Immutable undirected graph, normalized adjacency and the on-disk bundle format."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

BUNDLE_FILES = ("edges.tsv", "features.csv", "labels.csv", "meta.json")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (m, 2) int64, each row (u, v) with u < v, sorted
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    dropped: int = field(default=0, compare=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> sp.csr_matrix:
        """Unweighted symmetric adjacency in CSR form."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def mean_aggregator(self) -> sp.csr_matrix:
        """Row-normalized adjacency D^-1 A; isolated rows stay zero."""
        a = self.adjacency()
        deg = self.degrees().astype(float)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.csr_matrix(sp.diags(inv) @ a)


def build_graph(num_nodes, edges, features, labels, num_classes) -> Graph:
    features = np.array(features, dtype=np.float64, copy=True)
    if features.ndim == 1:
        features = features.reshape(num_nodes, -1)
    if features.shape[0] != num_nodes:
        raise GraphError(f"features have {features.shape[0]} rows, expected {num_nodes}")
    labels = np.array(labels, dtype=np.int64, copy=True).ravel()
    if labels.shape[0] != num_nodes:
        raise GraphError(f"labels have {labels.shape[0]} entries, expected {num_nodes}")
    if num_nodes and (labels.min() < 0 or labels.max() >= num_classes):
        raise GraphError("label out of range [0, num_classes)")

    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise GraphError("edge endpoint out of range")
    e = np.sort(e, axis=1)
    keep = e[:, 0] != e[:, 1]
    uniq = np.unique(e[keep], axis=0) if keep.any() else np.empty((0, 2), np.int64)
    dropped = len(e) - len(uniq)
    if dropped:
        log.warning("dropped %d duplicate edges / self-loops", dropped)

    for arr in (uniq, features, labels):
        arr.setflags(write=False)
    return Graph(num_nodes, uniq, features, labels, int(num_classes), dropped)


@dataclass(frozen=True)
class NormAdj:
    """Symmetric D^-1/2 A D^-1/2 without self-loops."""

    matrix: sp.csr_matrix
    degrees: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(graph: Graph, self_loops: bool = False) -> NormAdj:
    a = graph.adjacency()
    if self_loops:
        a = sp.csr_matrix(a + sp.eye(graph.num_nodes))
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    coo = a.tocoo()
    vals = inv_sqrt[coo.row] * inv_sqrt[coo.col]
    m = sp.csr_matrix((vals, (coo.row, coo.col)), shape=a.shape)
    m.sort_indices()
    return NormAdj(m, deg)


def spmm(adj: NormAdj | sp.spmatrix, dense: np.ndarray) -> np.ndarray:
    """Sparse-dense product; CSR rows are reduced sequentially so output is reproducible."""
    m = adj.matrix if isinstance(adj, NormAdj) else adj
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape[0] != m.shape[1]:
        raise GraphError(f"dimension mismatch: {m.shape} x {dense.shape}")
    return np.asarray(m @ dense)


def laplacian_quadratic(adj: NormAdj, F: np.ndarray) -> float:
    """tr(F^T (I - A_norm) F)."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != adj.num_nodes:
        raise GraphError("F row count does not match graph size")
    return float(np.sum(F * F) - np.sum(F * spmm(adj, F)))


def remove_cross_edges(graph: Graph, set_a, set_b) -> Graph:
    a = np.zeros(graph.num_nodes, bool)
    b = np.zeros(graph.num_nodes, bool)
    a[np.asarray(list(set_a), dtype=np.int64)] = True
    b[np.asarray(list(set_b), dtype=np.int64)] = True
    if (a & b).any():
        raise GraphError("node sets overlap")
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    cross = (a[u] & b[v]) | (b[u] & a[v])
    kept = graph.edges[~cross]
    kept.setflags(write=False)
    return Graph(graph.num_nodes, kept, graph.features, graph.labels, graph.num_classes)


def save_bundle(graph: Graph, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.tsv", "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(d / "features.csv", "w") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(d / "labels.csv", "w") as fh:
        fh.writelines(f"{y}\n" for y in graph.labels)
    meta = {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "num_classes": graph.num_classes,
        "feature_dim": graph.feature_dim,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d


def load_bundle(directory) -> Graph:
    d = Path(directory)
    for name in BUNDLE_FILES:
        if not (d / name).is_file():
            raise GraphError(f"missing bundle file: {d / name}")
    meta = json.loads((d / "meta.json").read_text())
    n, k, fdim = meta["num_nodes"], meta["num_classes"], meta["feature_dim"]

    edges = []
    for line in (d / "edges.tsv").read_text().splitlines():
        if line.strip():
            a, b = line.split("\t")
            edges.append((int(a), int(b)))
    rows = [ln for ln in (d / "features.csv").read_text().splitlines() if ln.strip()]
    if len(rows) != n:
        raise GraphError(f"features.csv has {len(rows)} rows, meta says {n}")
    feats = np.array([[float(x) for x in r.split(",")] for r in rows], dtype=np.float64)
    feats = feats.reshape(n, fdim)
    labels = [int(x) for x in (d / "labels.csv").read_text().split()]
    if len(labels) != n:
        raise GraphError(f"labels.csv has {len(labels)} entries, meta says {n}")

    g = build_graph(n, edges, feats, labels, k)
    if "num_edges" in meta and g.num_edges != meta["num_edges"]:
        raise GraphError(f"edge count {g.num_edges} != meta num_edges {meta['num_edges']}")
    return g
