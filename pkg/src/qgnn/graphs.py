"""Graph containers, citation-network ingestion and synthetic generators.

Edge lists are stored as an int64 [2, E] array (row 0 = source, row 1 =
target), canonically sorted by (target, source) after deduplication so
segment reductions and CSR construction get contiguous rows for free.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError

Array = np.ndarray


def _canonical_edges(edge_index: Array, num_nodes: int) -> Array:
    """Deduplicate and sort edges by (target, source)."""
    edge_index = np.asarray(edge_index, dtype=np.int64).reshape(2, -1)
    if edge_index.size:
        if edge_index.min() < 0 or edge_index.max() >= num_nodes:
            raise ConfigError("edge endpoint outside [0, num_nodes)")
        keys = edge_index[1] * num_nodes + edge_index[0]
        _, keep = np.unique(keys, return_index=True)
        edge_index = edge_index[:, np.sort(keep)]
        order = np.lexsort((edge_index[0], edge_index[1]))
        edge_index = edge_index[:, order]
    return edge_index


@dataclass
class Graph:
    """One graph: COO edges, features, labels, split masks, degree cache."""

    num_nodes: int
    edge_index: Array                    # [2, E], sources row 0, targets row 1
    x: Array                             # [N, F] float32 node features
    y: Array                             # [N] int labels, or [1] graph label
    train_mask: Optional[Array] = None
    val_mask: Optional[Array] = None
    test_mask: Optional[Array] = None
    prob_mask: Optional[Array] = None    # per-node protection probabilities
    in_degree: Array = field(init=False)

    def __post_init__(self):
        self.edge_index = _canonical_edges(self.edge_index, self.num_nodes)
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.num_nodes:
            raise ConfigError("feature rows != num_nodes")
        self.in_degree = compute_in_degree(self)
        masks = [m for m in (self.train_mask, self.val_mask, self.test_mask) if m is not None]
        if len(masks) > 1:
            stacked = np.stack([np.asarray(m, dtype=bool) for m in masks])
            if (stacked.sum(axis=0) > 1).any():
                raise ConfigError("split masks overlap")
        if self.prob_mask is not None:
            p = np.asarray(self.prob_mask, dtype=np.float32)
            if p.min() < 0.0 or p.max() > 1.0:
                raise ConfigError("prob_mask entries must lie in [0, 1]")
            self.prob_mask = p

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[1]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0


def compute_in_degree(graph: Graph) -> Array:
    """bincount of edge targets."""
    return np.bincount(graph.edge_index[1], minlength=graph.num_nodes).astype(np.int64)


def add_self_loops(graph: Graph) -> Graph:
    """Return a copy with (i -> i) appended for every node lacking one."""
    src, dst = graph.edge_index
    has_loop = np.zeros(graph.num_nodes, dtype=bool)
    has_loop[src[src == dst]] = True
    missing = np.flatnonzero(~has_loop)
    loops = np.stack([missing, missing])
    edges = np.concatenate([graph.edge_index, loops], axis=1)
    return Graph(
        num_nodes=graph.num_nodes,
        edge_index=edges,
        x=graph.x,
        y=graph.y,
        train_mask=graph.train_mask,
        val_mask=graph.val_mask,
        test_mask=graph.test_mask,
        prob_mask=graph.prob_mask,
    )


@dataclass
class GraphBatch:
    """Disjoint union of graphs with a node-to-graph assignment vector."""

    num_nodes: int
    num_graphs: int
    edge_index: Array
    x: Array
    y: Array               # [G] graph labels
    batch: Array           # [N] graph id per node, non-decreasing
    in_degree: Array
    prob_mask: Optional[Array] = None


def make_batch(graphs: list[Graph]) -> GraphBatch:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edges = [g.edge_index + off for g, off in zip(graphs, offsets)]
    batch = np.concatenate([np.full(g.num_nodes, i) for i, g in enumerate(graphs)])
    prob = None
    if all(g.prob_mask is not None for g in graphs):
        prob = np.concatenate([g.prob_mask for g in graphs])
    return GraphBatch(
        num_nodes=int(offsets[-1]),
        num_graphs=len(graphs),
        edge_index=np.concatenate(edges, axis=1),
        x=np.concatenate([g.x for g in graphs]),
        y=np.array([int(g.y[0]) for g in graphs], dtype=np.int64),
        batch=batch.astype(np.int64),
        in_degree=np.concatenate([g.in_degree for g in graphs]),
        prob_mask=prob,
    )


# ---------------------------------------------------------------------------
# citation-network format


def load_citation(content_path, cites_path) -> Graph:
    """Load the classic whitespace citation format.

    content lines: `<paper_id> <w_1..w_F> <class_label>`; cites lines:
    `<cited_id> <citing_id>`.  Features are row-normalized bag-of-words,
    citations become bidirectional edges, and split masks follow the
    20-per-class / next-500 / final-1000 protocol in file order.
    """
    ids: dict[str, int] = {}
    rows, label_names = [], []
    with open(content_path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ParseError(f"content line needs id, words, label: {line!r}", line_no)
            paper_id, label = parts[0], parts[-1]
            try:
                words = np.array(parts[1:-1], dtype=np.float32)
            except ValueError:
                raise ParseError(f"non-numeric word counts in {paper_id}", line_no)
            if paper_id in ids:
                raise ParseError(f"duplicate paper id {paper_id}", line_no)
            ids[paper_id] = len(rows)
            rows.append(words)
            label_names.append(label)
    if not rows:
        raise ParseError("empty content file", 0)
    widths = {r.size for r in rows}
    if len(widths) != 1:
        raise ParseError(f"inconsistent feature widths {sorted(widths)}", 0)

    x = np.stack(rows)
    sums = x.sum(axis=1, keepdims=True)
    nonzero = sums[:, 0] > 0
    x[nonzero] /= sums[nonzero]

    classes = {name: i for i, name in enumerate(sorted(set(label_names)))}
    y = np.array([classes[n] for n in label_names], dtype=np.int64)

    srcs, dsts, skipped = [], [], 0
    with open(cites_path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(f"cites line needs two ids: {line!r}", line_no)
            cited, citing = parts
            if cited not in ids or citing not in ids:
                skipped += 1
                continue
            a, b = ids[citing], ids[cited]
            srcs += [a, b]
            dsts += [b, a]
    if skipped:
        warnings.warn(f"skipped {skipped} citation(s) with unknown paper ids")

    n = len(rows)
    train = np.zeros(n, dtype=bool)
    per_class = {c: 0 for c in classes.values()}
    for i in range(n):
        if per_class[y[i]] < 20:
            per_class[y[i]] += 1
            train[i] = True
    val = np.zeros(n, dtype=bool)
    budget = 500
    for i in range(n):
        if budget == 0:
            break
        if not train[i]:
            val[i] = True
            budget -= 1
    test = np.zeros(n, dtype=bool)
    test[max(0, n - 1000):] = True
    test &= ~(train | val)

    return Graph(
        num_nodes=n,
        edge_index=np.array([srcs, dsts], dtype=np.int64).reshape(2, -1),
        x=x,
        y=y,
        train_mask=train,
        val_mask=val,
        test_mask=test,
    )


# ---------------------------------------------------------------------------
# synthetic generators


def _sym(pairs: Array, n: int) -> Array:
    """Both directions of an undirected pair list."""
    if pairs.size == 0:
        return np.zeros((2, 0), dtype=np.int64)
    u, v = pairs[:, 0], pairs[:, 1]
    return np.stack([np.concatenate([u, v]), np.concatenate([v, u])])


def gen_synthetic(kind: str, n: int, param, seed: int, num_features: int = 16,
                  label=None) -> Graph:
    """Seeded random graph with standard-normal features.

    kinds: erdos_renyi (param = edge probability), preferential_attachment
    (param = edges per new node), star (param unused). All edges are
    bidirectional.
    """
    if n < 2:
        raise ConfigError("need n >= 2 nodes")
    rng = np.random.default_rng(seed)
    if kind == "erdos_renyi":
        p = float(param)
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"edge probability {p} outside [0, 1]")
        iu = np.triu_indices(n, k=1)
        keep = rng.random(iu[0].size) < p
        pairs = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    elif kind == "preferential_attachment":
        m = int(param)
        if not 1 <= m < n:
            raise ConfigError(f"attachment count {m} outside [1, n)")
        pairs = _preferential_attachment_pairs(n, m, rng)
    elif kind == "star":
        hub = np.zeros(n - 1, dtype=np.int64)
        leaves = np.arange(1, n, dtype=np.int64)
        pairs = np.stack([hub, leaves], axis=1)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")

    x = rng.standard_normal((n, num_features)).astype(np.float32)
    if label is None:
        y = np.zeros(n, dtype=np.int64)
    else:
        y = np.array([int(label)], dtype=np.int64)
    return Graph(num_nodes=n, edge_index=_sym(pairs, n), x=x, y=y)


def _preferential_attachment_pairs(n: int, m: int, rng: np.random.Generator) -> Array:
    """Barabási–Albert: each new node attaches m edges to degree-weighted targets."""
    targets = list(range(m))
    repeated: list[int] = []
    pairs = np.empty((m * (n - m), 2), dtype=np.int64)
    k = 0
    for v in range(m, n):
        for t in targets:
            pairs[k, 0] = v
            pairs[k, 1] = t
            k += 1
        repeated.extend(targets)
        repeated.extend([v] * m)
        # sample m distinct degree-weighted endpoints for the next node
        chosen: set[int] = set()
        while len(chosen) < m:
            chosen.add(repeated[rng.integers(0, len(repeated))])
        targets = list(chosen)
    return pairs[:k]


def gen_community_graph(n: int, num_classes: int = 4, seed: int = 0,
                        num_features: int = 16, intra_links: int = 2,
                        noise: float = 1.0, train_frac: float = 0.2,
                        val_frac: float = 0.2) -> Graph:
    """Node-classification fixture: class-clustered features, one hub per
    class wired to every class member, so in-degrees are heavy-tailed the
    way citation graphs are."""
    if n < 4 * num_classes:
        raise ConfigError("need at least 4 nodes per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    means = rng.standard_normal((num_classes, num_features)).astype(np.float32)
    x = means[labels] + noise * rng.standard_normal((n, num_features)).astype(np.float32)

    srcs, dsts = [], []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        hub = members[0]
        for v in members[1:]:
            srcs += [hub, v]
            dsts += [v, hub]
        for v in members:
            others = members[members != v]
            picks = rng.choice(others, size=min(intra_links, others.size),
                               replace=False)
            for u in picks:
                srcs += [v, u]
                dsts += [u, v]

    order = rng.permutation(n)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    train = np.zeros(n, dtype=bool); train[order[:n_train]] = True
    val = np.zeros(n, dtype=bool); val[order[n_train:n_train + n_val]] = True
    test = np.zeros(n, dtype=bool); test[order[n_train + n_val:]] = True
    return Graph(n, np.array([srcs, dsts], dtype=np.int64), x, labels,
                 train_mask=train, val_mask=val, test_mask=test)


def gen_graph_corpus(num_graphs: int, seed: int, n_range=(40, 80),
                     num_features: int = 16, features: str = "degree") -> list[Graph]:
    """Binary graph-classification corpus: Erdős–Rényi (0) vs preferential
    attachment (1).  The task is purely topological, so the default node
    features are a one-hot of the (capped) in-degree, the usual encoding
    for featureless social-network graphs; "normal" and "ones" are
    available as alternatives.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(num_graphs):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        sub_seed = int(rng.integers(0, 2**63 - 1))
        if i % 2 == 0:
            g = gen_synthetic("erdos_renyi", n, 4.0 / (n - 1), sub_seed,
                              num_features, label=0)
        else:
            g = gen_synthetic("preferential_attachment", n, 2, sub_seed,
                              num_features, label=1)
        if features == "ones":
            g.x = np.ones((n, num_features), dtype=np.float32)
        elif features == "degree":
            x = np.zeros((n, num_features), dtype=np.float32)
            x[np.arange(n), np.minimum(g.in_degree, num_features - 1)] = 1.0
            g.x = x
        graphs.append(g)
    return graphs


# ---------------------------------------------------------------------------
# native JSON serialization


def graph_to_json(graph: Graph) -> str:
    doc = {
        "num_nodes": graph.num_nodes,
        "edges": graph.edge_index.T.tolist(),
        "features": np.round(graph.x.astype(float), 7).tolist(),
        "labels": graph.y.tolist(),
        "masks": {
            name: (mask.nonzero()[0].tolist() if mask is not None else None)
            for name, mask in (("train", graph.train_mask),
                               ("val", graph.val_mask),
                               ("test", graph.test_mask))
        },
    }
    return json.dumps(doc)


def graph_from_json(text: str) -> Graph:
    doc = json.loads(text)
    n = doc["num_nodes"]
    def mask_of(idx):
        if idx is None:
            return None
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        return m
    edges = np.array(doc["edges"], dtype=np.int64).reshape(-1, 2).T
    return Graph(
        num_nodes=n,
        edge_index=edges,
        x=np.array(doc["features"], dtype=np.float32),
        y=np.array(doc["labels"], dtype=np.int64),
        train_mask=mask_of(doc["masks"]["train"]),
        val_mask=mask_of(doc["masks"]["val"]),
        test_mask=mask_of(doc["masks"]["test"]),
    )


def save_graph(graph: Graph, path):
    with open(path, "w") as fh:
        fh.write(graph_to_json(graph))


def load_graph(path) -> Graph:
    with open(path) as fh:
        return graph_from_json(fh.read())
