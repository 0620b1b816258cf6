"""Closed-form self-correction analysis for one lazy propagation step and its checks."""

from __future__ import annotations

import csv
import functools
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import gen_homophily_regular
from .graph import normalize_adjacency
from .propagation import propagate_recursive


@dataclass(frozen=True)
class TheoryParams:
    num_classes: int
    h: float
    p: float
    gamma: float
    eps: float = 0.0
    q: float | None = None
    degree: int = 10

    def __post_init__(self):
        k = self.num_classes
        if k < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.h <= 1.0:
            raise ValueError("h outside [0, 1]")
        if not 1.0 / k < self.p <= 1.0:
            raise ValueError("p must lie in (1/|Y|, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma outside (0, 1)")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps outside [0, 1)")
        if self.q is not None and not 0.0 <= self.q < 1.0 / k:
            raise ValueError("q must lie in [0, 1/|Y|)")


def beta_exact(tp: TheoryParams):
    """Propagated class-0 score and per-wrong-class score of the misclassified node."""
    if tp.q is None:
        raise ValueError("beta_exact needs q")
    k1 = tp.num_classes - 1
    g, h, p, e, q = tp.gamma, tp.h, tp.p, tp.eps, tp.q
    mixed = e * p / k1 + (k1 - e) * (1 - p) / k1**2
    beta = (
        (1 - g) * q
        + g * h * ((1 - e) * p + e * (1 - p) / k1)
        + g * (1 - h) * mixed
    )
    beta_wrong = (
        (1 - g) * (1 - q) / k1
        + g * h * mixed
        + g * (1 - h) / k1 * (e * (1 - p) / k1 + (1 - e) * p)
        + g * (1 - h) * (k1 - 1) / k1 * mixed
    )
    return beta, beta_wrong


def corrected_exact(tp: TheoryParams) -> bool:
    b, bw = beta_exact(tp)
    return b > bw


def _c_term(k, h, p):
    return (1 + 1 / k) * h * p - (h + p) / k


def correction_interval(num_classes, h, p, gamma, eps=0.0):
    """Approximate q-range within which one propagation step fixes the prediction.

    An empty range shows up as q_lo >= q_hi.
    """
    if gamma >= 1.0:
        raise ValueError("gamma = 1 makes the interval undefined")
    k = num_classes
    c = _c_term(k, h, p)
    b = (c + h * p / k) * eps
    q_lo = max(0.0, 1 / k - gamma / (1 - gamma) * (c - b))
    return q_lo, 1 / k


def epsilon_bound(h, num_classes):
    k = num_classes
    if h <= 1 / k:
        raise ValueError("bound only defined for h > 1/|Y|")
    return (k * h - 1) / ((k + 1) * h - 1)


def approximation_band(num_classes, gamma):
    """Width of the q-band in which the approximate interval may disagree with the exact test."""
    return gamma / (1 - gamma) / (num_classes - 1)


@dataclass
class TheoremReport:
    rows: list = field(default_factory=list)
    agreement: float = 1.0
    agreement_large_k: float | None = None
    band_violations: int = 0
    monotone_lines: int = 0
    monotone_failures: int = 0
    bound_monotone: bool = True

    @property
    def passed(self) -> bool:
        large_ok = self.agreement_large_k is None or self.agreement_large_k >= 0.999
        return large_ok and self.band_violations == 0 and self.monotone_failures == 0 and self.bound_monotone

    def write_csv(self, path):
        cols = ["num_classes", "h", "p", "gamma", "eps", "q", "exact", "interval", "boundary_distance", "band"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)


def default_grid():
    ks = [2, 3, 5, 10, 50, 100]
    hs = np.linspace(0.0, 1.0, 6)
    ps = [0.6, 0.8, 0.95, 1.0]
    gammas = [0.1, 0.3, 0.5, 0.7, 0.9]
    epss = [0.0, 0.1, 0.2, 0.3]
    qfrac = np.linspace(0.0, 0.95, 6)
    for k, h, p, g, e, qf in itertools.product(ks, hs, ps, gammas, epss, qfrac):
        if p <= 1 / k:
            continue
        yield TheoryParams(k, float(h), float(p), float(g), float(e), float(qf / k))


def verify_theorem(cells=None, beta_fn=beta_exact, eps_grid=None, large_k=50) -> TheoremReport:
    """Compare the exact correction test with the approximate interval on every cell."""
    cells = list(default_grid() if cells is None else cells)
    rep = TheoremReport()
    agree = agree_large = n_large = 0
    for tp in cells:
        b, bw = beta_fn(tp)
        exact = bool(b > bw)
        lo, hi = correction_interval(tp.num_classes, tp.h, tp.p, tp.gamma, tp.eps)
        inside = lo < hi and lo <= tp.q <= hi
        dist = min(abs(tp.q - lo), abs(hi - tp.q))
        band = approximation_band(tp.num_classes, tp.gamma)
        same = exact == inside
        agree += same
        if tp.num_classes >= large_k:
            n_large += 1
            agree_large += same
        if not same and dist > band:
            rep.band_violations += 1
        rep.rows.append(dict(
            num_classes=tp.num_classes, h=tp.h, p=tp.p, gamma=tp.gamma, eps=tp.eps, q=tp.q,
            exact=int(exact), interval=int(inside), boundary_distance=dist, band=band,
        ))
    rep.agreement = agree / len(cells) if cells else 1.0
    rep.agreement_large_k = agree_large / n_large if n_large else None

    lines = {(tp.num_classes, tp.h, tp.p, tp.gamma) for tp in cells}
    eps_grid = np.linspace(0.0, 0.99, 34) if eps_grid is None else eps_grid
    for k, h, p, g in sorted(lines):
        widths = [max(0.0, hi - lo) for lo, hi in (correction_interval(k, h, p, g, e) for e in eps_grid)]
        rep.monotone_lines += 1
        if np.any(np.diff(widths) > 1e-15):
            rep.monotone_failures += 1

    for k in sorted({tp.num_classes for tp in cells}):
        hs = np.linspace(1 / k, 1.0, 201)[1:]
        vals = [epsilon_bound(h, k) for h in hs]
        rep.bound_monotone &= bool(np.all(np.diff(vals) > 0))
    return rep


def _independent_subset(graph, candidates, limit, rng):
    adj = graph.adjacency()
    taken = np.zeros(graph.num_nodes, bool)
    blocked = np.zeros(graph.num_nodes, bool)
    for v in rng.permutation(candidates):
        if len(np.flatnonzero(taken)) >= limit:
            break
        if not blocked[v]:
            taken[v] = True
            blocked[v] = True
            blocked[adj.indices[adj.indptr[v] : adj.indptr[v + 1]]] = True
    return np.flatnonzero(taken)


@functools.lru_cache(maxsize=64)
def _regular_graph(num_nodes, degree, h, num_classes, seed):
    return gen_homophily_regular(num_nodes, degree, h, num_classes, seed=seed)


def simulate_correction(num_nodes, tp: TheoryParams, seed=0, trials=10):
    """Realize the analysed setting on a regular homophily graph, one propagation step.

    Several mutually non-adjacent class-0 nodes play the misclassified node at once;
    returns one corrected flag per such node.
    """
    if tp.q is None:
        raise ValueError("simulation needs q")
    rng = np.random.default_rng(seed)
    k = tp.num_classes
    g = _regular_graph(num_nodes, tp.degree, tp.h, k, seed)
    n = g.num_nodes
    low = (1 - tp.p) / (k - 1)
    P = np.full((n, k), low)
    P[np.arange(n), g.labels] = tp.p

    targets = _independent_subset(g, np.flatnonzero(g.labels == 0), trials, rng)
    others = np.setdiff1d(np.arange(n), targets)
    n_bad = int(round(tp.eps * (n - 1)))
    bad = rng.choice(others, size=min(n_bad, others.size), replace=False)
    for v in bad:
        wrong = rng.choice([c for c in range(k) if c != g.labels[v]])
        P[v] = low
        P[v, wrong] = tp.p
    P[targets] = (1 - tp.q) / (k - 1)
    P[targets, 0] = tp.q

    out = propagate_recursive(P, normalize_adjacency(g), tp.gamma, 1)
    rows = out[targets]
    return rows[:, 0] > rows[:, 1:].max(axis=1)


def empirical_frontier(num_nodes, tp: TheoryParams, q_cells=10, seeds=(0, 1, 2), trials=20):
    """Index of the first q-cell on [0, 1/|Y|) whose centre is corrected in most trials.

    Returns ``q_cells`` when no cell is corrected.
    """
    width = 1 / tp.num_classes / q_cells
    for j in range(q_cells):
        q = (j + 0.5) * width
        flags = np.concatenate([
            simulate_correction(num_nodes, replace(tp, q=q), seed=s, trials=trials) for s in seeds
        ])
        if flags.mean() >= 0.5:
            return j
    return q_cells


def interval_cell(tp: TheoryParams, q_cells=10) -> int:
    """Grid cell holding the lower end of the approximate interval (``q_cells`` if empty)."""
    lo, hi = correction_interval(tp.num_classes, tp.h, tp.p, tp.gamma, tp.eps)
    if lo >= hi:
        return q_cells
    return min(int(lo * tp.num_classes * q_cells), q_cells)
