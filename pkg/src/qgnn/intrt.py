"""Integer inference runtime: lowering, CSR kernels, benchmark harness.

A trained quantized checkpoint is lowered to int8 operand arrays with
per-site (scale, zero_point) frozen from training.  Dense products run as
float-emulated integer GEMMs (bit-exact integer accumulation, see
`int_gemm`); sparse aggregation runs through numba CSR kernels that read
int8 rows and accumulate in int32, with the per-row zero-point correction
applied afterwards.  Requantization between grids is a 32-bit fixed-point
multiply with round-half-to-even.

The one float island is GAT's attention softmax: logits are dequantized,
softmaxed in f32, and the attention-weighted aggregation accumulates in
f32 before requantizing onto the aggregate grid.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numba import njit, prange, set_num_threads

from .checkpoint import CheckpointError, load_model, read_blob, write_blob
from .errors import LowerError
from .graphs import Graph
from .layers import GraphPrep, NodeModel
from .quantizer import QuantConfig, QuantModule

Array = np.ndarray

INT32_HEADROOM = 2**31 - 2**16


# ---------------------------------------------------------------------------
# fixed-point requantization


def quantize_multiplier(m: float) -> tuple[int, int]:
    """Represent m as M0 * 2^-shift with M0 an int32 in [2^30, 2^31)."""
    if m <= 0.0:
        raise LowerError(f"non-positive requantization multiplier {m}")
    mant, exp = math.frexp(m)            # m = mant * 2^exp, mant in [0.5, 1)
    m0 = int(round(mant * (1 << 31)))
    shift = 31 - exp
    if m0 == (1 << 31):
        m0 >>= 1
        shift -= 1
    if not 1 <= shift <= 62:
        raise LowerError(f"requantization shift {shift} out of range for m={m}")
    return m0, shift


def requantize(acc: Array, m0: int, shift: int, zp: int,
               q_min: int, q_max: int) -> Array:
    """acc * (m0 * 2^-shift) with round-half-to-even, then shift and clamp."""
    t = acc.astype(np.int64) * np.int64(m0)
    r = t >> np.int64(shift)
    rem = t - (r << np.int64(shift))
    half = np.int64(1) << np.int64(shift - 1)
    r = r + ((rem > half) | ((rem == half) & ((r & 1) == 1)))
    return np.clip(r + zp, q_min, q_max)


# ---------------------------------------------------------------------------
# integer dense / sparse kernels


def int_gemm(x_q: Array, x_zp: int, w_q: Array) -> Array:
    """Integer matmul with int32 accumulators, emulated in BLAS floats.

    Partial sums are integers; f32 carries them exactly while
    k*|x-zp|max*|w|max < 2^24, otherwise f64 (exact below 2^53).  Returns
    the zero-point-corrected int64 accumulator (x_q - zp) @ w_q.
    """
    k = x_q.shape[1]
    bound = k * 255 * int(np.abs(w_q).max(initial=1))
    dtype = np.float32 if bound < 2**24 else np.float64
    acc = x_q.astype(dtype) @ w_q.astype(dtype)
    if x_zp:
        acc -= np.float64(x_zp) * w_q.sum(axis=0, dtype=np.int64).astype(dtype)
    return acc.astype(np.int64)


@njit(cache=True)
def _true_int_gemm(x_q, x_zp, w_q, out):
    """Reference integer GEMM; used to verify the emulated path bit-for-bit."""
    n, k = x_q.shape
    m = w_q.shape[1]
    for i in range(n):
        for j in range(m):
            acc = np.int64(0)
            for t in range(k):
                acc += (np.int64(x_q[i, t]) - x_zp) * np.int64(w_q[t, j])
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _spmm_edgeval(row_ptr, col_idx, edge_c, x_q, out):
    # out[i, f] = sum_e edge_c[e] * x_q[col_idx[e], f]; int32 accumulation
    n_rows = row_ptr.shape[0] - 1
    fdim = x_q.shape[1]
    for i in prange(n_rows):
        acc = np.zeros(fdim, dtype=np.int32)
        for e in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[e]
            c = np.int32(edge_c[e])
            row = x_q[j]
            for f in range(fdim):
                acc[f] += c * np.int32(row[f])
        out[i] = acc


@njit(cache=True, parallel=True)
def _spmm_sum(row_ptr, col_idx, x_q, out):
    # out[i, f] = sum_e x_q[col_idx[e], f]; int32 accumulation
    n_rows = row_ptr.shape[0] - 1
    fdim = x_q.shape[1]
    for i in prange(n_rows):
        acc = np.zeros(fdim, dtype=np.int32)
        for e in range(row_ptr[i], row_ptr[i + 1]):
            row = x_q[col_idx[e]]
            for f in range(fdim):
                acc[f] += np.int32(row[f])
        out[i] = acc


@njit(cache=True, parallel=True)
def _spmm_alpha(row_ptr, col_idx, alpha, x_q, x_zp, out):
    # float island: out[i, f] = sum_e alpha[e] * (x_q[col_idx[e], f] - zp)
    n_rows = row_ptr.shape[0] - 1
    fdim = x_q.shape[1]
    for i in prange(n_rows):
        acc = np.zeros(fdim, dtype=np.float32)
        for e in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[e]
            a = alpha[e]
            row = x_q[j]
            for f in range(fdim):
                acc[f] += a * np.float32(np.int32(row[f]) - x_zp)
        out[i] = acc


# ---------------------------------------------------------------------------
# lowered containers


@dataclass
class SiteParams:
    scale: float
    zp: int
    q_min: int
    q_max: int

    @classmethod
    def from_qm(cls, qm: QuantModule, site: str) -> "SiteParams":
        if not (qm.config.bypass or qm.initialized):
            raise LowerError(f"quant site {site!r} was never observed; "
                             "cannot lower an uncalibrated checkpoint")
        s, z, q_min, q_max = qm.qparams()
        return cls(float(s), int(z), int(q_min), int(q_max))

    def quantize(self, values: Array) -> Array:
        q = np.clip(np.rint(values / np.float32(self.scale) + np.float32(self.zp)),
                    self.q_min, self.q_max)
        return q.astype(np.uint8 if self.q_min >= 0 else np.int8)

    def dequantize(self, q: Array) -> Array:
        return ((q.astype(np.float32) - np.float32(self.zp))
                * np.float32(self.scale)).astype(np.float32)


@dataclass
class CsrAdjacency:
    row_ptr: Array                      # int64 [N+1]
    col_idx: Array                      # int64 [E]
    edge_val_q: Optional[Array] = None  # quantized per-edge values (GCN norm)
    edge_scale: float = 1.0
    edge_zp: int = 0

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])


def build_csr(edge_index: Array, num_nodes: int) -> CsrAdjacency:
    src, dst = edge_index
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=num_nodes), out=row_ptr[1:])
    return CsrAdjacency(row_ptr=row_ptr, col_idx=src.astype(np.int64))


def _centered_edge_vals(adj: CsrAdjacency) -> Array:
    return (adj.edge_val_q.astype(np.int16) - np.int16(adj.edge_zp))


def int_spmm(adj: CsrAdjacency, x_q: Array, x_scale: float, x_zp: int,
             out_site: SiteParams) -> Array:
    """Aggregate quantized rows over CSR edges and requantize the int32 row
    accumulators onto `out_site`'s grid (zero-point corrected per row)."""
    n = adj.row_ptr.shape[0] - 1
    acc = np.empty((n, x_q.shape[1]), dtype=np.int32)
    if adj.edge_val_q is not None:
        edge_c = _centered_edge_vals(adj)
        _spmm_edgeval(adj.row_ptr, adj.col_idx, edge_c, x_q, acc)
        if x_zp:
            row_corr = _row_sums(adj, edge_c)
            acc = acc.astype(np.int64) - (x_zp * row_corr)[:, None]
        m = adj.edge_scale * x_scale / out_site.scale
    else:
        _spmm_sum(adj.row_ptr, adj.col_idx, x_q, acc)
        if x_zp:
            deg = np.diff(adj.row_ptr)
            acc = acc.astype(np.int64) - (x_zp * deg)[:, None]
        m = x_scale / out_site.scale
    m0, shift = quantize_multiplier(m)
    q = requantize(acc, m0, shift, out_site.zp, out_site.q_min, out_site.q_max)
    return q.astype(np.uint8 if out_site.q_min >= 0 else np.int8)


def _row_sums(adj: CsrAdjacency, edge_c: Array) -> Array:
    out = np.zeros(adj.row_ptr.shape[0] - 1, dtype=np.int64)
    np.add.at(out, np.repeat(np.arange(out.shape[0]),
                             np.diff(adj.row_ptr)), edge_c.astype(np.int64))
    return out


def int_linear(x_q: Array, x_site: SiteParams, w_q: Array, w_scale: float,
               out_site: SiteParams) -> Array:
    """Dense integer product requantized onto the next site's grid."""
    acc = int_gemm(x_q, x_site.zp, w_q)
    m0, shift = quantize_multiplier(x_site.scale * w_scale / out_site.scale)
    q = requantize(acc, m0, shift, out_site.zp, out_site.q_min, out_site.q_max)
    return q.astype(np.uint8 if out_site.q_min >= 0 else np.int8)


def _relu_int(q: Array, site: SiteParams) -> Array:
    return np.maximum(q, np.asarray(site.zp, dtype=q.dtype))


def _regrid(q: Array, src: SiteParams, dst: SiteParams) -> Array:
    """Requantize values from one grid onto another (fixed-point)."""
    centered = q.astype(np.int64) - src.zp
    m0, shift = quantize_multiplier(src.scale / dst.scale)
    out = requantize(centered, m0, shift, dst.zp, dst.q_min, dst.q_max)
    return out.astype(np.uint8 if dst.q_min >= 0 else np.int8)


# ---------------------------------------------------------------------------
# lowered layers


class IntGCNLayer:
    def __init__(self, layer, sites: dict[str, SiteParams]):
        self.sites = sites
        self.w_scale = sites["weights"].scale
        self.w_q = sites["weights"].quantize(layer.weight.data).astype(np.int8)

    def forward(self, x_q: Array, prep: "IntGraphPrep") -> Array:
        s = self.sites
        feat_q = int_linear(x_q, s["inputs"], self.w_q, self.w_scale, s["features"])
        aggr_q = int_spmm(prep.gcn_adj(s["norm"]), feat_q,
                          s["features"].scale, s["features"].zp, s["aggregate"])
        return _regrid(aggr_q, s["aggregate"], s["update"])


class IntGINLayer:
    def __init__(self, layer, sites: dict[str, SiteParams]):
        self.sites = sites
        self.w_scale = sites["weights"].scale
        self.w_q = [sites["weights"].quantize(w.data).astype(np.int8)
                    for w in layer.mlp]
        self.eps = float(layer.eps.item())

    def forward(self, x_q: Array, prep: "IntGraphPrep") -> Array:
        s = self.sites
        aggr_q = int_spmm(prep.plain_adj(), x_q, s["inputs"].scale,
                          s["inputs"].zp, s["aggregate"])
        # combine (1+eps)x + aggr feeds the MLP at two different grids, so
        # the first linear runs as two integer GEMMs merged in the
        # accumulator domain
        acc_x = int_gemm(x_q, s["inputs"].zp, self.w_q[0])
        acc_a = int_gemm(aggr_q, s["aggregate"].zp, self.w_q[0])
        sx = (1.0 + self.eps) * s["inputs"].scale * self.w_scale
        sa = s["aggregate"].scale * self.w_scale
        out_site = s["features"] if len(self.w_q) > 1 else s["update"]
        real = sx * acc_x.astype(np.float64) + sa * acc_a.astype(np.float64)
        q = np.clip(np.rint(real / out_site.scale + out_site.zp),
                    out_site.q_min, out_site.q_max)
        h = q.astype(np.uint8 if out_site.q_min >= 0 else np.int8)
        for w_q in self.w_q[1:]:
            h = _relu_int(h, s["features"])
            h = int_linear(h, s["features"], w_q, self.w_scale, s["update"])
        return h


class IntGATLayer:
    def __init__(self, layer, sites: dict[str, SiteParams]):
        self.sites = sites
        self.heads = layer.heads
        self.out_per_head = layer.out_per_head
        self.w_scale = sites["weights"].scale
        wq = sites["weights"].quantize
        self.w_q = [wq(w.data).astype(np.int8) for w in layer.weights]
        self.asrc_q = [wq(a.data).astype(np.int8) for a in layer.att_src]
        self.adst_q = [wq(a.data).astype(np.int8) for a in layer.att_dst]

    def forward(self, x_q: Array, prep: "IntGraphPrep") -> Array:
        s = self.sites
        adj = prep.looped_adj()
        src = adj.col_idx
        dst = np.repeat(np.arange(adj.row_ptr.shape[0] - 1), np.diff(adj.row_ptr))
        feats, outs = [], []
        for h in range(self.heads):
            feats.append(int_linear(x_q, s["inputs"], self.w_q[h],
                                    self.w_scale, s["features"]))
        for h in range(self.heads):
            f_q = feats[h]
            # attention scores: integer GEMM, then the float softmax island
            sc_src = int_gemm(f_q, s["features"].zp, self.asrc_q[h]).astype(np.float64)
            sc_dst = int_gemm(f_q, s["features"].zp, self.adst_q[h]).astype(np.float64)
            sc_scale = s["features"].scale * self.w_scale
            logits = sc_scale * (sc_src[src, 0] + sc_dst[dst, 0])
            logits = np.where(logits > 0, logits, 0.2 * logits).astype(np.float32)
            att = s["attention"]
            l_q = np.clip(np.rint(logits / np.float32(att.scale) + np.float32(att.zp)),
                          att.q_min, att.q_max)
            l_hat = ((l_q - np.float32(att.zp)) * np.float32(att.scale)).astype(np.float32)
            alpha = _segment_softmax_f32(l_hat, adj.row_ptr)
            accf = np.empty((f_q.shape[0], self.out_per_head), dtype=np.float32)
            _spmm_alpha(adj.row_ptr, adj.col_idx, alpha, f_q, s["features"].zp, accf)
            agg = s["aggregate"]
            q = np.clip(np.rint(accf * np.float32(s["features"].scale / agg.scale))
                        + agg.zp, agg.q_min, agg.q_max)
            outs.append(q.astype(np.uint8 if agg.q_min >= 0 else np.int8))
        merged = np.concatenate(outs, axis=1)
        return _regrid(merged, s["aggregate"], s["update"])


def _segment_softmax_f32(logits: Array, row_ptr: Array) -> Array:
    out = np.empty_like(logits, dtype=np.float32)
    for i in range(row_ptr.shape[0] - 1):
        lo, hi = row_ptr[i], row_ptr[i + 1]
        if hi > lo:
            seg = logits[lo:hi]
            e = np.exp(seg - seg.max())
            out[lo:hi] = e / e.sum()
    return out


class IntGraphPrep:
    """Per-graph CSR structures shared by all lowered layers."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.prep = GraphPrep(graph)
        self._plain = None
        self._looped = None
        self._gcn = None

    def plain_adj(self) -> CsrAdjacency:
        if self._plain is None:
            self._plain = build_csr(self.graph.edge_index, self.graph.num_nodes)
        return self._plain

    def looped_adj(self) -> CsrAdjacency:
        if self._looped is None:
            self._looped = build_csr(self.prep.looped_edges, self.graph.num_nodes)
        return self._looped

    def gcn_adj(self, norm_site: SiteParams) -> CsrAdjacency:
        if self._gcn is None:
            adj = build_csr(self.prep.looped_edges, self.graph.num_nodes)
            adj.edge_val_q = norm_site.quantize(self.prep.gcn_norm)
            adj.edge_scale = norm_site.scale
            adj.edge_zp = norm_site.zp
            self._gcn = adj
        return self._gcn


class IntModel:
    """A node model lowered to integer arithmetic."""

    def __init__(self, arch: str, dims: tuple, heads: int, layers: list,
                 site_meta: dict):
        self.arch = arch
        self.dims = dims
        self.heads = heads
        self.layers = layers
        self.site_meta = site_meta      # site name -> SiteParams (for tests/io)
        self._preps: dict[int, IntGraphPrep] = {}

    def prep_for(self, graph: Graph) -> IntGraphPrep:
        key = id(graph)
        if key not in self._preps:
            self._preps[key] = IntGraphPrep(graph)
        return self._preps[key]

    def forward(self, graph: Graph) -> Array:
        """Dequantized logits of the integer pipeline."""
        prep = self.prep_for(graph)
        first = self.layers[0].sites["inputs"]
        h = first.quantize(graph.x)
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, prep)
            upd = layer.sites["update"]
            if i + 1 < len(self.layers):
                h = _relu_int(h, upd)
                h = _regrid(h, upd, self.layers[i + 1].sites["inputs"])
        return self.layers[-1].sites["update"].dequantize(h)

    def predict(self, graph: Graph) -> Array:
        return self.forward(graph).argmax(axis=1)


_INT_LAYER = {"gcn": IntGCNLayer, "gat": IntGATLayer, "gin": IntGINLayer}


def _check_accumulator_bounds(model: NodeModel, graph: Optional[Graph]):
    for layer in model.layers:
        k = getattr(layer, "in_dim", 0)
        if k and k * 255 * 127 >= INT32_HEADROOM:
            raise LowerError(f"dense accumulator may overflow int32 at width {k}")
    if graph is not None:
        max_deg = int(graph.in_degree.max()) + 1
        if max_deg * 255 * 255 >= INT32_HEADROOM:
            raise LowerError(
                f"aggregation accumulator may overflow int32 at in-degree {max_deg}")


def lower(source, graph: Optional[Graph] = None) -> IntModel:
    """Lower a trained fake-quant checkpoint (path or model) to integers.

    graph, when given, is used for the aggregation overflow check.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        model, manifest = load_model(source)
        if manifest["config"].get("regime", "fp32") == "fp32":
            raise LowerError("FP32-only checkpoint has no quantization grids to lower")
    else:
        model = source
    if not isinstance(model, NodeModel):
        raise LowerError("only node models lower to the integer runtime")
    _check_accumulator_bounds(model, graph)
    layers, site_meta = [], {}
    for layer in model.layers:
        sites = {}
        for bare, qm in layer.sites.items():
            if bare == "features" and getattr(layer, "mlp", None) is not None \
                    and len(layer.mlp) == 1:
                continue    # single-linear GIN never uses the features site
            sites[bare] = SiteParams.from_qm(qm, qm.name)
            site_meta[qm.name] = sites[bare]
        layers.append(_INT_LAYER[model.arch](layer, sites))
    return IntModel(model.arch, model.dims, model.heads, layers, site_meta)


# ---------------------------------------------------------------------------
# integer checkpoint serialization


def save_int_model(path, int_model: IntModel):
    arrays, layer_docs = {}, []
    for i, layer in enumerate(int_model.layers):
        doc = {"sites": {k: vars(v) for k, v in layer.sites.items()},
               "w_scale": layer.w_scale}
        if isinstance(layer, IntGCNLayer):
            doc["type"] = "gcn"
            arrays[f"l{i}.w"] = layer.w_q
        elif isinstance(layer, IntGINLayer):
            doc["type"] = "gin"
            doc["eps"] = layer.eps
            doc["n_mlp"] = len(layer.w_q)
            for j, w in enumerate(layer.w_q):
                arrays[f"l{i}.w{j}"] = w
        else:
            doc["type"] = "gat"
            doc["heads"] = layer.heads
            doc["out_per_head"] = layer.out_per_head
            for h in range(layer.heads):
                arrays[f"l{i}.w{h}"] = layer.w_q[h]
                arrays[f"l{i}.asrc{h}"] = layer.asrc_q[h]
                arrays[f"l{i}.adst{h}"] = layer.adst_q[h]
        layer_docs.append(doc)
    manifest = {"version": 1, "kind": "int8", "arch": int_model.arch,
                "dims": list(int_model.dims), "heads": int_model.heads,
                "layers": layer_docs}
    write_blob(path, manifest, arrays)


def load_int_model(path) -> IntModel:
    manifest, arrays = read_blob(path)
    if manifest.get("kind") != "int8":
        raise CheckpointError("not an integer-model checkpoint")
    layers = []
    site_meta = {}
    for i, doc in enumerate(manifest["layers"]):
        sites = {k: SiteParams(**v) for k, v in doc["sites"].items()}
        site_meta.update({f"layer{i}.{k}": v for k, v in sites.items()})
        obj = object.__new__(_INT_LAYER[doc["type"]])
        obj.sites = sites
        obj.w_scale = doc["w_scale"]
        if doc["type"] == "gcn":
            obj.w_q = arrays[f"l{i}.w"]
        elif doc["type"] == "gin":
            obj.eps = doc["eps"]
            obj.w_q = [arrays[f"l{i}.w{j}"] for j in range(doc["n_mlp"])]
        else:
            obj.heads = doc["heads"]
            obj.out_per_head = doc["out_per_head"]
            obj.w_q = [arrays[f"l{i}.w{h}"] for h in range(doc["heads"])]
            obj.asrc_q = [arrays[f"l{i}.asrc{h}"] for h in range(doc["heads"])]
            obj.adst_q = [arrays[f"l{i}.adst{h}"] for h in range(doc["heads"])]
        layers.append(obj)
    return IntModel(manifest["arch"], tuple(manifest["dims"]), manifest["heads"],
                    layers, site_meta)


# ---------------------------------------------------------------------------
# FP32 reference runtime (the natural numpy/scipy inference path)


class FloatRuntime:
    """Plain f32 forward pass built on BLAS GEMM and scipy CSR SpMM."""

    def __init__(self, model: NodeModel):
        self.arch = model.arch
        self.layers = model.layers
        self._cache: dict[int, dict] = {}

    def _prep(self, graph: Graph) -> dict:
        key = id(graph)
        if key not in self._cache:
            prep = GraphPrep(graph)
            entry = {"prep": prep}
            n = graph.num_nodes
            src, dst = prep.looped_edges
            entry["norm_csr"] = sp.csr_matrix(
                (prep.gcn_norm, (dst, src)), shape=(n, n))
            entry["plain_csr"] = sp.csr_matrix(
                (np.ones(graph.num_edges, dtype=np.float32),
                 (graph.edge_index[1], graph.edge_index[0])), shape=(n, n))
            entry["looped"] = prep.looped_edges
            self._cache[key] = entry
        return self._cache[key]

    def forward(self, graph: Graph) -> Array:
        entry = self._prep(graph)
        h = graph.x
        for i, layer in enumerate(self.layers):
            if self.arch == "gcn":
                h = entry["norm_csr"] @ (h @ layer.weight.data)
            elif self.arch == "gin":
                aggr = entry["plain_csr"] @ h
                h = (1.0 + layer.eps.item()) * h + aggr
                for j, w in enumerate(layer.mlp):
                    h = h @ w.data
                    if j + 1 < len(layer.mlp):
                        h = np.maximum(h, 0.0)
            else:
                h = self._gat_layer(layer, h, entry)
            if i + 1 < len(self.layers):
                h = np.maximum(h, 0.0)
        return h.astype(np.float32)

    def _gat_layer(self, layer, h: Array, entry: dict) -> Array:
        src, dst = entry["looped"]
        n = h.shape[0]
        outs = []
        for w, a_s, a_d in zip(layer.weights, layer.att_src, layer.att_dst):
            feat = h @ w.data
            logits = (feat @ a_s.data)[src, 0] + (feat @ a_d.data)[dst, 0]
            logits = np.where(logits > 0, logits, 0.2 * logits).astype(np.float32)
            row_ptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(dst, minlength=n), out=row_ptr[1:])
            alpha = _segment_softmax_f32(logits, row_ptr)
            mat = sp.csr_matrix((alpha, (dst, src)), shape=(n, n))
            outs.append(mat @ feat)
        return np.concatenate(outs, axis=1)


# ---------------------------------------------------------------------------
# benchmark harness


def benchmark(float_rt: FloatRuntime, int_model: IntModel, graph: Graph,
              reps: int = 30, warmup: int = 5, threads: int = 1) -> dict:
    """Median/p95 latency of both pipelines and the resulting speedup."""
    if reps < 1:
        raise LowerError("need at least one benchmark rep")
    set_num_threads(max(threads, 1))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:                  # pragma: no cover
        threadpool_limits = None

    def time_fn(fn):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
        arr = np.array(samples)
        return {"median_ms": float(np.median(arr)),
                "p95_ms": float(np.quantile(arr, 0.95))}

    def run():
        results = {
            "fp32": time_fn(lambda: float_rt.forward(graph)),
            "int8": time_fn(lambda: int_model.forward(graph)),
        }
        return results

    if threadpool_limits is not None:
        with threadpool_limits(limits=max(threads, 1)):
            results = run()
    else:                                # pragma: no cover
        results = run()

    speedup = results["fp32"]["median_ms"] / results["int8"]["median_ms"]
    return {
        "arch": int_model.arch,
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "feature_dim": graph.num_features,
        "threads": threads,
        "reps": reps,
        "warmup": warmup,
        "fp32": results["fp32"],
        "int8": results["int8"],
        "speedup": speedup,
    }


def calibrate(model: NodeModel, graph: Graph, passes: int = 2):
    """Run observer-updating forwards so a fresh model can be lowered."""
    saved = model.dropout_p
    model.dropout_p = 0.0
    try:
        for _ in range(passes):
            model.forward(graph, training=True, dropout_rng=None, masks=None)
    finally:
        model.dropout_p = saved
