"""Dataset loading, splits and synthetic graph generators."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, build_graph, load_bundle, remove_cross_edges


def _idx(x):
    a = np.asarray(sorted(int(i) for i in x), dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    obs_idx: np.ndarray = field(default_factory=lambda: _idx([]))
    ind_idx: np.ndarray = field(default_factory=lambda: _idx([]))
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx", "obs_idx", "ind_idx"):
            object.__setattr__(self, name, _idx(getattr(self, name)))
        object.__setattr__(self, "extra", {k: _idx(v) for k, v in self.extra.items()})
        parts = [set(self.train_idx.tolist()), set(self.val_idx.tolist()), set(self.test_idx.tolist())]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise ValueError("train/val/test sets overlap")
        if self.production:
            obs, ind = set(self.obs_idx.tolist()), set(self.ind_idx.tolist())
            if obs & ind or obs | ind != parts[2]:
                raise ValueError("obs/ind must partition the test set")

    def __eq__(self, other):
        if not isinstance(other, SplitSpec):
            return NotImplemented
        keys = ("train_idx", "val_idx", "test_idx", "obs_idx", "ind_idx")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in keys)

    __hash__ = None

    @property
    def production(self) -> bool:
        return self.ind_idx.size > 0

    def observed(self, num_nodes: int) -> np.ndarray:
        """All nodes visible at training time (everything but the inductive set)."""
        mask = np.ones(num_nodes, bool)
        mask[self.ind_idx] = False
        return np.flatnonzero(mask)

    def to_json(self) -> dict:
        doc = {k: getattr(self, k).tolist() for k in ("train_idx", "val_idx", "test_idx", "obs_idx", "ind_idx")}
        doc.update({k: np.asarray(v).tolist() for k, v in self.extra.items()})
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SplitSpec":
        keys = ("train_idx", "val_idx", "test_idx", "obs_idx", "ind_idx")
        extra = {k: _idx(v) for k, v in doc.items() if k not in keys}
        return cls(**{k: doc.get(k, []) for k in keys}, extra=extra)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def load_dataset(directory) -> Graph:
    return load_bundle(directory)


def make_split(graph: Graph, per_class_train=20, per_class_val=30, seed=0) -> SplitSpec:
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in range(graph.num_classes):
        members = np.flatnonzero(graph.labels == c)
        if members.size < per_class_train + per_class_val:
            raise ValueError(
                f"class {c} has {members.size} nodes, needs {per_class_train + per_class_val}"
            )
        pick = rng.permutation(members)
        train.extend(pick[:per_class_train])
        val.extend(pick[per_class_train : per_class_train + per_class_val])
    rest = np.setdiff1d(np.arange(graph.num_nodes), np.concatenate([train, val]))
    return SplitSpec(train, val, rest)


def make_production_split(graph: Graph, split: SplitSpec, ind_fraction=0.2, seed=0):
    """Hold out a fraction of test nodes as unseen; drop obs/ind cross edges."""
    if not 0.0 < ind_fraction < 1.0:
        raise ValueError("ind_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test = split.test_idx
    n_ind = int(round(ind_fraction * test.size))
    if n_ind == 0 or n_ind == test.size:
        raise ValueError("production split leaves an empty obs or ind set")
    ind = rng.choice(test, size=n_ind, replace=False)
    obs = np.setdiff1d(test, ind)
    observed = np.setdiff1d(np.arange(graph.num_nodes), ind)
    g2 = remove_cross_edges(graph, observed, ind)
    return g2, SplitSpec(split.train_idx, split.val_idx, test, obs, ind, extra=dict(split.extra))


def gen_chains(num_chains=30, length=8, num_classes=10, seed=0, noise=0.0):
    """Disjoint path graphs; one-hot class feature only on each chain's base node.

    ``noise`` > 0 adds uniform(-noise, noise) features to non-base nodes, which
    makes them distinguishable to a feature-only model.
    """
    if num_chains % num_classes:
        raise ValueError("num_chains must be divisible by num_classes")
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.repeat(np.arange(num_classes), num_chains // num_classes))
    n = num_chains * length
    feats = np.zeros((n, num_classes))
    if noise > 0:
        feats = rng.uniform(-noise, noise, size=(n, num_classes))
    labels = np.repeat(classes, length)
    edges = []
    train, val, far = [], [], []
    for c in range(num_chains):
        base = c * length
        feats[base] = 0.0
        feats[base, classes[c]] = 1.0
        edges += [(base + i, base + i + 1) for i in range(length - 1)]
        train.append(base)
        if length > 1:
            val.append(base + 1)
        far += [base + i for i in range(3, length)]
    g = build_graph(n, edges, feats, labels, num_classes)
    test = np.setdiff1d(np.arange(n), np.concatenate([train, val]).astype(np.int64))
    return g, SplitSpec(train, val, test, extra={"far_idx": _idx(far)})


def _pair_stubs(stubs_a, stubs_b, ok, rng, max_rounds=50, max_switches=10000):
    """Randomly match stubs into a simple graph.

    ``stubs_b`` None matches ``stubs_a`` against itself, otherwise a bipartite
    matching. Rejected pairs are reshuffled; pairs that stay stuck are resolved
    by switching with a random accepted edge. Returns an edge set or None.
    """
    bipartite = stubs_b is not None
    key = (lambda u, v: (u, v)) if bipartite else (lambda u, v: (min(u, v), max(u, v)))
    valid = lambda u, v, taken: u != v and ok(u, v) and key(u, v) not in taken
    edges = set()
    a, b = list(stubs_a), (list(stubs_b) if bipartite else None)
    for _ in range(max_rounds):
        if not a:
            break
        if bipartite:
            left, right = rng.permutation(a).tolist(), rng.permutation(b).tolist()
        else:
            arr = rng.permutation(a).tolist()
            left, right = arr[0::2], arr[1::2]
        bad_l, bad_r = [], []
        for u, v in zip(left, right):
            if valid(u, v, edges):
                edges.add(key(u, v))
            else:
                bad_l.append(u)
                bad_r.append(v)
        a, b = (bad_l, bad_r) if bipartite else (bad_l + bad_r, None)
        if len(bad_l) == len(left):
            break
    pending = list(zip(a, b)) if bipartite else list(zip(a[: len(a) // 2], a[len(a) // 2 :]))
    for _ in range(max_switches):
        if not pending:
            return edges
        if not edges:
            return None
        u, v = pending[-1]
        pool = list(edges)
        x, y = pool[rng.integers(len(pool))]
        if not bipartite and rng.random() < 0.5:
            x, y = y, x
        edges.discard((x, y) if bipartite else key(x, y))
        if valid(u, y, edges) and valid(x, v, edges) and key(u, y) != key(x, v):
            edges.add(key(u, y))
            edges.add(key(x, v))
            pending.pop()
        else:
            edges.add((x, y) if bipartite else key(x, y))
    return None


def gen_homophily_regular(num_nodes, degree, homophily, num_classes, seed=0, feature_dim=0,
                          signal=1.0, max_retries=50):
    """d-regular graph where every node has round(h*d) same-class neighbours.

    Classes are equal-sized contiguous blocks. Cross-class edges are spread
    evenly over the other classes when (d - round(h*d)) divides by |Y|-1,
    otherwise uniformly at random. ``feature_dim`` > 0 attaches Gaussian
    features: class centroid * ``signal`` plus unit noise.
    """
    if num_nodes % num_classes:
        raise ValueError("num_nodes must be divisible by num_classes")
    m = num_nodes // num_classes
    same = int(round(homophily * degree))
    cross = degree - same
    if same >= m or (m * same) % 2:
        raise ValueError("infeasible same-class degree for the class size")
    if num_classes == 1 and cross:
        raise ValueError("cross-class edges need at least two classes")
    labels = np.repeat(np.arange(num_classes), m)
    rng = np.random.default_rng(seed)
    even = num_classes > 1 and cross % (num_classes - 1) == 0
    per_pair = cross // (num_classes - 1) if even else 0
    if even and per_pair > m:
        raise ValueError("infeasible cross-class degree")

    for _ in range(max_retries):
        edges = set()
        failed = False
        for c in range(num_classes):
            block = range(c * m, (c + 1) * m)
            got = _pair_stubs([v for v in block for _ in range(same)], None, lambda u, v: u != v, rng)
            if got is None:
                failed = True
                break
            edges |= got
        if failed:
            continue
        if cross and even:
            for c1 in range(num_classes):
                for c2 in range(c1 + 1, num_classes):
                    s1 = [v for v in range(c1 * m, (c1 + 1) * m) for _ in range(per_pair)]
                    s2 = [v for v in range(c2 * m, (c2 + 1) * m) for _ in range(per_pair)]
                    got = _pair_stubs(s1, s2, lambda u, v: True, rng)
                    if got is None:
                        failed = True
                        break
                    edges |= got
                if failed:
                    break
        elif cross:
            got = _pair_stubs(
                [v for v in range(num_nodes) for _ in range(cross)], None,
                lambda u, v: labels[u] != labels[v], rng,
            )
            failed = got is None
            if not failed:
                edges |= got
        if not failed:
            break
    else:
        raise ValueError("could not realize the regular homophily graph within the retry budget")

    if feature_dim > 0:
        centroids = rng.normal(size=(num_classes, feature_dim))
        feats = signal * centroids[labels] + rng.normal(size=(num_nodes, feature_dim))
    else:
        feats = np.zeros((num_nodes, 0))
    return build_graph(num_nodes, sorted(edges), feats, labels, num_classes)


def edge_homophily(graph: Graph) -> float:
    if graph.num_edges == 0:
        return 1.0
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    return float(np.mean(graph.labels[u] == graph.labels[v]))
