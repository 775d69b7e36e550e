"""GCN, GAT and GIN layers with a quantization site at every intermediate
tensor, plus the mask-aware propagation used by degree-protected training.

Rows of a protected node (mask True) bypass rounding entirely; the low
observers only ever see unprotected rows.  Message-site protection is
keyed by the edge's source node, aggregate/update protection by the
target node.  In eval mode masks are ignored and everything runs on the
low (quantized) path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .graphs import Graph, GraphBatch, add_self_loops
from .quantizer import (
    QuantModule,
    activation_config,
    fake_quantize,
    weight_config,
)

Array = np.ndarray

# site vocabulary per architecture (weights handled separately)
ARCH_SITES = {
    "gcn": ("inputs", "features", "norm", "message", "aggregate", "update"),
    "gat": ("inputs", "features", "attention", "message", "aggregate", "update"),
    "gin": ("inputs", "features", "message", "aggregate", "update"),
}

SITE_NAMES = ("inputs", "weights", "features", "norm", "attention",
              "message", "aggregate", "update")


@dataclass(frozen=True)
class QuantSpec:
    """How to build the quantization sites of one model."""

    enabled: bool = False
    bits: int = 8
    ste: str = "vanilla"
    observer: str = "minmax"
    momentum: float = 0.01
    percentile: float = 0.001
    site_bits: dict = field(default_factory=dict)   # bare site name -> bits

    def make_site(self, bare_name: str, full_name: str) -> QuantModule:
        bits = self.site_bits.get(bare_name, self.bits) if self.enabled else 32
        kw = dict(ste=self.ste, observer=self.observer,
                  momentum=self.momentum, percentile=self.percentile)
        if bare_name == "weights":
            cfg = weight_config(bits, **kw)
        else:
            cfg = activation_config(bits, **kw)
        return QuantModule(cfg, name=full_name)


def fp32_spec() -> QuantSpec:
    return QuantSpec(enabled=False)


# ---------------------------------------------------------------------------
# masked quantization


def weight_quant(w: T.Tensor, qm: QuantModule, training: bool,
                 nqat: Optional[tuple] = None) -> T.Tensor:
    """Quantize a weight tensor; under noisy QAT only a Bernoulli-chosen
    subset of elements is quantized each step (block size 1), the rest pass
    at full precision.  Eval quantizes everything."""
    if qm.config.bypass:
        return w
    w_q = fake_quantize(w, qm, observe=training)
    if not training or nqat is None:
        return w_q
    rate, rng = nqat
    if rate >= 1.0:
        return w_q
    if rate <= 0.0:
        return w
    chosen = (rng.random(w.data.shape) < rate).astype(np.float32)
    quantized = T.mul(w_q, T.constant(chosen))
    passed = T.mul(w, T.constant(1.0 - chosen))
    return T.add(quantized, passed)


def site_quant(x: T.Tensor, qm: QuantModule, training: bool,
               mask: Optional[Array] = None) -> T.Tensor:
    """Quantize x at a site, exempting protected rows when training.

    mask is a per-row boolean protection vector (True = full precision).
    The observer only sees unprotected rows; protected rows pass through
    untouched, in values and in gradients.
    """
    if qm.config.bypass:
        return x
    if not training:
        return fake_quantize(x, qm, observe=False)
    if mask is None:
        return fake_quantize(x, qm, observe=True)
    if mask.shape[0] != x.data.shape[0]:
        raise ContractError(
            f"protection mask has {mask.shape[0]} rows, tensor has {x.data.shape[0]}")
    if not mask.any():
        return fake_quantize(x, qm, observe=True)
    if mask.all():
        return x
    qm.observe(x.data[~mask])
    xq = fake_quantize(x, qm, observe=False)
    keep = T.constant(mask.astype(np.float32).reshape(-1, 1))
    quant = T.constant((~mask).astype(np.float32).reshape(-1, 1))
    return T.add(T.mul(x, keep), T.mul(xq, quant))


def propagate(messages: T.Tensor, edge_index: Array, num_nodes: int,
              sites: dict, mask: Optional[Array], training: bool) -> T.Tensor:
    """Quantized message -> aggregate -> update pipeline over an edge tensor.

    Message rows inherit protection from their source node; the aggregate
    and update sites are keyed by the target node.
    """
    src, dst = edge_index[0], edge_index[1]
    if messages.data.shape[0] != src.shape[0]:
        raise ShapeError("messages rows must equal edge count")
    if mask is not None and mask.shape[0] != num_nodes:
        raise ContractError(f"mask length {mask.shape[0]} != num_nodes {num_nodes}")
    edge_mask = mask[src] if mask is not None else None
    msg_q = site_quant(messages, sites["message"], training, edge_mask)
    aggr = T.scatter_add(msg_q, dst, num_nodes)
    aggr_q = site_quant(aggr, sites["aggregate"], training, mask)
    return site_quant(aggr_q, sites["update"], training, mask)


# ---------------------------------------------------------------------------
# per-graph static preparation


class GraphPrep:
    """Static per-graph arrays shared across epochs."""

    def __init__(self, graph):
        self.num_nodes = graph.num_nodes
        self.edge_index = graph.edge_index
        self.src_nodes = np.unique(graph.edge_index[0])
        self._adj = None
        self._loops = None
        self._norm = None

    @property
    def adj(self) -> T.SparseAdj:
        if self._adj is None:
            self._adj = T.SparseAdj(self.edge_index, self.num_nodes)
        return self._adj

    @property
    def looped_edges(self) -> Array:
        if self._loops is None:
            src, dst = self.edge_index
            has_loop = np.zeros(self.num_nodes, dtype=bool)
            has_loop[src[src == dst]] = True
            missing = np.flatnonzero(~has_loop)
            loops = np.stack([missing, missing])
            edges = np.concatenate([self.edge_index, loops], axis=1)
            order = np.lexsort((edges[0], edges[1]))
            self._loops = edges[:, order]
        return self._loops

    @property
    def gcn_norm(self) -> Array:
        """Per-edge 1/sqrt(d_src * d_dst) over the self-looped edge set."""
        if self._norm is None:
            self._norm = gcn_norm(self.looped_edges, self.num_nodes)
        return self._norm


def gcn_norm(edge_index_with_loops: Array, num_nodes: int) -> Array:
    src, dst = edge_index_with_loops
    deg = np.bincount(dst, minlength=num_nodes).astype(np.float32)
    inv_sqrt = 1.0 / np.sqrt(deg.clip(min=1.0))
    return (inv_sqrt[src] * inv_sqrt[dst]).astype(np.float32)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape=None) -> Array:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# layers


class GCNLayer:
    def __init__(self, in_dim: int, out_dim: int, spec: QuantSpec,
                 rng: np.random.Generator, name: str = "gcn"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = T.Tensor(glorot(rng, in_dim, out_dim), requires_grad=True)
        self.sites = {s: spec.make_site(s, f"{name}.{s}") for s in ARCH_SITES["gcn"]}
        self.sites["weights"] = spec.make_site("weights", f"{name}.weights")
        self.name = name
        self.nqat = None

    def params(self):
        return [(f"{self.name}.weight", self.weight)]

    def forward(self, x: T.Tensor, prep: GraphPrep, mask: Optional[Array],
                training: bool) -> T.Tensor:
        x_q = site_quant(x, self.sites["inputs"], training, mask)
        w_q = weight_quant(self.weight, self.sites["weights"], training, self.nqat)
        feat = T.matmul(x_q, w_q)
        feat_q = site_quant(feat, self.sites["features"], training, mask)
        edges = prep.looped_edges
        norm = T.constant(prep.gcn_norm.reshape(-1, 1))
        norm_q = site_quant(norm, self.sites["norm"], training, None)
        msg = T.mul(T.gather(feat_q, edges[0]), norm_q)
        return propagate(msg, edges, prep.num_nodes, self.sites, mask, training)


class GATLayer:
    def __init__(self, in_dim: int, out_per_head: int, heads: int,
                 spec: QuantSpec, rng: np.random.Generator, name: str = "gat"):
        self.in_dim, self.out_per_head, self.heads = in_dim, out_per_head, heads
        self.weights = [
            T.Tensor(glorot(rng, in_dim, out_per_head), requires_grad=True)
            for _ in range(heads)
        ]
        self.att_src = [
            T.Tensor(glorot(rng, out_per_head, 1, (out_per_head, 1)), requires_grad=True)
            for _ in range(heads)
        ]
        self.att_dst = [
            T.Tensor(glorot(rng, out_per_head, 1, (out_per_head, 1)), requires_grad=True)
            for _ in range(heads)
        ]
        self.sites = {s: spec.make_site(s, f"{name}.{s}") for s in ARCH_SITES["gat"]}
        self.sites["weights"] = spec.make_site("weights", f"{name}.weights")
        self.name = name
        self.nqat = None

    def params(self):
        out = []
        for h in range(self.heads):
            out.append((f"{self.name}.w{h}", self.weights[h]))
            out.append((f"{self.name}.asrc{h}", self.att_src[h]))
            out.append((f"{self.name}.adst{h}", self.att_dst[h]))
        return out

    def forward(self, x: T.Tensor, prep: GraphPrep, mask: Optional[Array],
                training: bool) -> T.Tensor:
        fh = self.out_per_head
        wsite = self.sites["weights"]
        x_q = site_quant(x, self.sites["inputs"], training, mask)
        heads_feat = []
        for h in range(self.heads):
            w_q = weight_quant(self.weights[h], wsite, training, self.nqat)
            heads_feat.append(T.matmul(x_q, w_q))
        feat_q = site_quant(T.concat_cols(heads_feat), self.sites["features"],
                            training, mask)
        edges = prep.looped_edges   # self-edges give the alpha_ii term
        src, dst = edges[0], edges[1]
        scores_src, scores_dst = [], []
        for h in range(self.heads):
            fq_h = T.slice_cols(feat_q, h * fh, (h + 1) * fh)
            a_s = weight_quant(self.att_src[h], wsite, training, self.nqat)
            a_d = weight_quant(self.att_dst[h], wsite, training, self.nqat)
            scores_src.append(T.matmul(fq_h, a_s))
            scores_dst.append(T.matmul(fq_h, a_d))
        asrc = T.concat_cols(scores_src)
        adst = T.concat_cols(scores_dst)
        logits = T.leaky_relu(T.add(T.gather(asrc, src), T.gather(adst, dst)), 0.2)
        logits_q = site_quant(logits, self.sites["attention"], training, None)
        alpha = T.segment_softmax(logits_q, dst, prep.num_nodes)  # not quantized
        msg = T.mul(T.gather(feat_q, src), T.repeat_cols(alpha, fh))
        return propagate(msg, edges, prep.num_nodes, self.sites, mask, training)


class GINLayer:
    """GIN with a learnable epsilon and an MLP update.

    mlp_dims lists the linear layer output widths; citation models use a
    single linear layer.  Messages are verbatim source rows, so the edge
    tensor is never materialized: aggregation runs through a CSR matmul
    over the node-level quantized tensor.
    """

    def __init__(self, in_dim: int, mlp_dims: list[int], spec: QuantSpec,
                 rng: np.random.Generator, name: str = "gin"):
        self.in_dim = in_dim
        self.mlp_dims = list(mlp_dims)
        dims = [in_dim] + self.mlp_dims
        self.mlp = [
            T.Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True)
            for i in range(len(self.mlp_dims))
        ]
        self.eps = T.Tensor(np.zeros((1, 1), dtype=np.float32), requires_grad=True)
        self.sites = {s: spec.make_site(s, f"{name}.{s}") for s in ARCH_SITES["gin"]}
        self.sites["weights"] = spec.make_site("weights", f"{name}.weights")
        self.name = name
        self.nqat = None

    def params(self):
        out = [(f"{self.name}.mlp{i}", w) for i, w in enumerate(self.mlp)]
        out.append((f"{self.name}.eps", self.eps))
        return out

    def _message_quant(self, x_q: T.Tensor, prep: GraphPrep,
                       mask: Optional[Array], training: bool) -> T.Tensor:
        qm = self.sites["message"]
        if qm.config.bypass:
            return x_q
        if not training:
            return fake_quantize(x_q, qm, observe=False)
        sending = np.zeros(prep.num_nodes, dtype=bool)
        sending[prep.src_nodes] = True
        observe_rows = sending if mask is None else (sending & ~mask)
        if observe_rows.any():
            qm.observe(x_q.data[observe_rows])
        if mask is None or not mask.any():
            return fake_quantize(x_q, qm, observe=False)
        if mask.all():
            return x_q
        xq = fake_quantize(x_q, qm, observe=False)
        keep = T.constant(mask.astype(np.float32).reshape(-1, 1))
        quant = T.constant((~mask).astype(np.float32).reshape(-1, 1))
        return T.add(T.mul(x_q, keep), T.mul(xq, quant))

    def forward(self, x: T.Tensor, prep: GraphPrep, mask: Optional[Array],
                training: bool) -> T.Tensor:
        x_q = site_quant(x, self.sites["inputs"], training, mask)
        msg_q = self._message_quant(x_q, prep, mask, training)
        aggr = T.spmm_sum(prep.adj, msg_q)
        aggr_q = site_quant(aggr, self.sites["aggregate"], training, mask)
        scale = T.add(self.eps, T.constant(np.ones((1, 1), dtype=np.float32)))
        h = T.add(T.mul(x_q, scale), aggr_q)
        for i, w in enumerate(self.mlp):
            w_q = weight_quant(w, self.sites["weights"], training, self.nqat)
            h = T.matmul(h, w_q)
            if i + 1 < len(self.mlp):
                h = site_quant(h, self.sites["features"], training, mask)
                h = T.relu(h)
        return site_quant(h, self.sites["update"], training, mask)


# ---------------------------------------------------------------------------
# pooling and readout


def global_pool(h: T.Tensor, batch_vector: Array, num_graphs: int,
                mode: str = "sum") -> T.Tensor:
    pooled = T.scatter_add(h, batch_vector, num_graphs)
    if mode == "sum":
        return pooled
    if mode == "mean":
        counts = np.bincount(batch_vector, minlength=num_graphs).astype(np.float32)
        inv = (1.0 / counts.clip(min=1.0)).reshape(-1, 1)
        return T.mul(pooled, T.constant(inv))
    raise ContractError(f"unknown pool mode {mode!r}")


class ReadoutMLP:
    """Graph-level head: quantized linears, never protection-masked."""

    def __init__(self, dims: list[int], spec: QuantSpec, rng: np.random.Generator,
                 name: str = "readout"):
        self.linears = [
            T.Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True)
            for i in range(len(dims) - 1)
        ]
        self.sites = {}
        for i in range(len(self.linears)):
            self.sites[f"in{i}"] = spec.make_site("inputs", f"{name}.in{i}")
            self.sites[f"w{i}"] = spec.make_site("weights", f"{name}.w{i}")
        self.sites["update"] = spec.make_site("update", f"{name}.update")
        self.name = name
        self.nqat = None

    def params(self):
        return [(f"{self.name}.lin{i}", w) for i, w in enumerate(self.linears)]

    def forward(self, h: T.Tensor, training: bool) -> T.Tensor:
        for i, w in enumerate(self.linears):
            h = site_quant(h, self.sites[f"in{i}"], training, None)
            w_q = weight_quant(w, self.sites[f"w{i}"], training, self.nqat)
            h = T.matmul(h, w_q)
            if i + 1 < len(self.linears):
                h = T.relu(h)
        return site_quant(h, self.sites["update"], training, None)


# ---------------------------------------------------------------------------
# models


def _build_layers(arch: str, in_dim: int, hidden: int, out_dim: int,
                  spec: QuantSpec, rng: np.random.Generator, heads: int):
    if arch == "gcn":
        return [GCNLayer(in_dim, hidden, spec, rng, "layer0"),
                GCNLayer(hidden, out_dim, spec, rng, "layer1")]
    if arch == "gat":
        if hidden % heads:
            raise ShapeError("hidden width must divide evenly across heads")
        return [GATLayer(in_dim, hidden // heads, heads, spec, rng, "layer0"),
                GATLayer(hidden, out_dim, 1, spec, rng, "layer1")]
    if arch == "gin":
        return [GINLayer(in_dim, [hidden], spec, rng, "layer0"),
                GINLayer(hidden, [out_dim], spec, rng, "layer1")]
    raise ContractError(f"unknown architecture {arch!r}")


class NodeModel:
    """Two-layer node classifier (citation-network shape)."""

    def __init__(self, arch: str, in_dim: int, hidden: int, out_dim: int,
                 spec: QuantSpec, rng: np.random.Generator, heads: int = 8,
                 dropout_p: float = 0.5):
        self.arch = arch
        self.dims = (in_dim, hidden, out_dim)
        self.heads = heads
        self.dropout_p = dropout_p
        self.layers = _build_layers(arch, in_dim, hidden, out_dim, spec, rng, heads)
        self._preps: dict[int, GraphPrep] = {}

    def prep_for(self, graph) -> GraphPrep:
        key = id(graph)
        if key not in self._preps:
            self._preps[key] = GraphPrep(graph)
        return self._preps[key]

    def forward(self, graph: Graph, training: bool = False,
                dropout_rng: Optional[np.random.Generator] = None,
                masks: Optional[list] = None) -> T.Tensor:
        prep = self.prep_for(graph)
        masks = masks or [None] * len(self.layers)
        h = T.constant(graph.x)
        for i, layer in enumerate(self.layers):
            if training and self.dropout_p > 0:
                h = T.dropout(h, self.dropout_p, dropout_rng)
            h = layer.forward(h, prep, masks[i], training)
            if i + 1 < len(self.layers):
                h = T.relu(h)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def set_nqat(self, noise_rate: float, rng: np.random.Generator):
        for layer in self.layers:
            layer.nqat = (noise_rate, rng)

    def site_modules(self) -> dict[str, QuantModule]:
        out = {}
        for layer in self.layers:
            for qm in layer.sites.values():
                out[qm.name] = qm
        return out


class GraphModel:
    """Graph classifier: GNN layers, pooled readout, quantized MLP head."""

    def __init__(self, arch: str, in_dim: int, hidden: int, num_classes: int,
                 spec: QuantSpec, rng: np.random.Generator, heads: int = 4,
                 dropout_p: float = 0.0, pool: str = "sum"):
        self.arch = arch
        self.dims = (in_dim, hidden, num_classes)
        self.heads = heads
        self.dropout_p = dropout_p
        self.pool = pool
        self.layers = _build_layers(arch, in_dim, hidden, hidden, spec, rng, heads)
        if arch == "gin":  # graph-level GIN uses 2-layer MLPs
            self.layers = [GINLayer(in_dim, [hidden, hidden], spec, rng, "layer0"),
                           GINLayer(hidden, [hidden, hidden], spec, rng, "layer1")]
        self.readout = ReadoutMLP([hidden, hidden, num_classes], spec, rng)
        self._preps: dict[int, GraphPrep] = {}

    def prep_for(self, batch) -> GraphPrep:
        key = id(batch)
        if key not in self._preps:
            self._preps[key] = GraphPrep(batch)
        return self._preps[key]

    def forward(self, batch: GraphBatch, training: bool = False,
                dropout_rng: Optional[np.random.Generator] = None,
                masks: Optional[list] = None) -> T.Tensor:
        prep = self.prep_for(batch)
        masks = masks or [None] * len(self.layers)
        h = T.constant(batch.x)
        for i, layer in enumerate(self.layers):
            if training and self.dropout_p > 0:
                h = T.dropout(h, self.dropout_p, dropout_rng)
            h = layer.forward(h, prep, masks[i], training)
            h = T.relu(h)
        pooled = global_pool(h, batch.batch, batch.num_graphs, self.pool)
        return self.readout.forward(pooled, training)

    def parameters(self):
        out = [p for layer in self.layers for p in layer.params()]
        out += self.readout.params()
        return out

    def set_nqat(self, noise_rate: float, rng: np.random.Generator):
        for layer in self.layers:
            layer.nqat = (noise_rate, rng)
        self.readout.nqat = (noise_rate, rng)

    def site_modules(self) -> dict[str, QuantModule]:
        out = {}
        for layer in self.layers:
            for qm in layer.sites.values():
                out[qm.name] = qm
        for qm in self.readout.sites.values():
            out[qm.name] = qm
        return out
