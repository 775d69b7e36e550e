"""Degree-based stochastic protection masks.

High in-degree nodes get a higher probability of running one training
step at full precision.  Probabilities interpolate between p_min and
p_max through the cumulative in-degree distribution: every node of the
same in-degree shares one probability, and the maximum-degree class
lands exactly on p_max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import Graph, GraphBatch

Array = np.ndarray


@dataclass
class ProtectionMask:
    p: Array       # per-node Bernoulli probabilities
    m: Array       # sampled boolean mask for one step


def _prob_from_degrees(in_degree: Array, p_min: float, p_max: float) -> Array:
    n = in_degree.shape[0]
    counts = np.bincount(in_degree)
    step = (p_max - p_min) / n
    per_degree = np.cumsum(counts * step) + p_min
    return np.clip(per_degree[in_degree], 0.0, 1.0).astype(np.float32)


def build_prob_mask(graph: Graph, p_min: float, p_max: float) -> Array:
    """Per-node protection probabilities from the in-degree distribution."""
    if not 0.0 <= p_min <= p_max <= 1.0:
        raise ConfigError(f"need 0 <= p_min <= p_max <= 1, got ({p_min}, {p_max})")
    return _prob_from_degrees(graph.in_degree, p_min, p_max)


def build_prob_mask_batch(batch: GraphBatch, p_min: float, p_max: float) -> Array:
    """Probabilities computed per graph inside a batch."""
    if not 0.0 <= p_min <= p_max <= 1.0:
        raise ConfigError(f"need 0 <= p_min <= p_max <= 1, got ({p_min}, {p_max})")
    out = np.empty(batch.num_nodes, dtype=np.float32)
    for gid in range(batch.num_graphs):
        rows = batch.batch == gid
        out[rows] = _prob_from_degrees(batch.in_degree[rows], p_min, p_max)
    return out


def sample_mask(p: Array, rng: np.random.Generator) -> Array:
    """One Bernoulli draw per node; resampled fresh each call."""
    return rng.random(p.shape[0]) < p
