"""Propagation operators applied to class-probability matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NormAdj, spmm

VARIANTS = ("ppr_exact", "recursive", "recursive_fix", "inverse", "conv")
DENSE_SOLVE_LIMIT = 5000
DEFAULT_FLOOR = 1e-8


@dataclass(frozen=True)
class PropagationSpec:
    variant: str = "recursive"
    gamma: float = 0.9
    steps: int = 10
    fixed_indices: tuple | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown propagation variant {self.variant!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if (self.fixed_indices is not None) != (self.variant == "recursive_fix"):
            raise ValueError("fixed_indices is required by, and only by, recursive_fix")


def _check_gamma(gamma):
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside (0, 1]")


def normalize_rows(M: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    """Scale rows to sum 1. Rows with no mass (isolated nodes at gamma=1) take ``fallback``."""
    s = M.sum(axis=1, keepdims=True)
    out = M.copy()
    np.divide(M, s, out=out, where=s > 0)
    if fallback is not None:
        empty = s[:, 0] <= 0
        out[empty] = fallback[empty]
    return out


def lazy_step(P: np.ndarray, adj: NormAdj, gamma: float) -> np.ndarray:
    """One application of gamma*A + (1-gamma)*I."""
    return gamma * spmm(adj, P) + (1.0 - gamma) * P


def propagate_recursive(P, adj: NormAdj, gamma: float, steps: int) -> np.ndarray:
    _check_gamma(gamma)
    P = np.asarray(P, dtype=np.float64)
    Z = P
    for _ in range(steps):
        Z = lazy_step(Z, adj, gamma)
    return normalize_rows(Z, P)


def propagate_recursive_fix(P, adj: NormAdj, gamma: float, steps: int, fixed, trace=None) -> np.ndarray:
    """Lazy propagation where rows in ``fixed`` are reset to ``P`` after every step.

    ``trace``, if a list, receives a copy of every intermediate iterate.
    """
    _check_gamma(gamma)
    P = np.asarray(P, dtype=np.float64)
    fixed = np.asarray(sorted(set(int(i) for i in fixed)), dtype=np.int64)
    if fixed.size and (fixed[0] < 0 or fixed[-1] >= P.shape[0]):
        raise IndexError("fixed index out of range")
    Z = P
    for _ in range(steps):
        Z = lazy_step(Z, adj, gamma)
        Z[fixed] = P[fixed]
        if trace is not None:
            trace.append(Z.copy())
    out = normalize_rows(Z, P)
    out[fixed] = P[fixed]  # pinned rows stay bit-identical to the input
    return out


def ppr_exact(H, adj: NormAdj, gamma: float, limit: int = DENSE_SOLVE_LIMIT) -> np.ndarray:
    """(1 - gamma) (I - gamma*A)^-1 H by dense solve."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("ppr_exact needs gamma in [0, 1)")
    n = adj.num_nodes
    if n > limit:
        raise ValueError(f"{n} nodes exceeds the dense-solve limit of {limit}")
    system = np.eye(n) - gamma * adj.toarray()
    try:
        sol = np.linalg.solve(system, np.asarray(H, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular propagation system") from exc
    return (1.0 - gamma) * sol


def inverse_operator(P, adj: NormAdj, gamma: float) -> np.ndarray:
    """(2I - gamma*A) P, unnormalized."""
    P = np.asarray(P, dtype=np.float64)
    return 2.0 * P - gamma * spmm(adj, P)


def conv_operator(P, adj: NormAdj) -> np.ndarray:
    return spmm(adj, P)


def clamp_renormalize(M, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    M = np.maximum(np.asarray(M, dtype=np.float64), floor)
    return M / M.sum(axis=1, keepdims=True)
