"""Modality-specific projections and bidirectional cross-attention.

Each code yields four unified-dimension embeddings: two projections of
the pooled text/graph vectors, and two cross-attention outputs where
one modality's states query the other's. Attention runs over state
sequences (text token states, graph node states); a pooled vector is
the valid length-1 degenerate case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError


@dataclass
class FusionParams:
    """Projectors and query/key/value maps; fields may be arrays or nodes."""

    f_t: np.ndarray  # (d, d_t)
    f_g: np.ndarray  # (d, d_g)
    w_q_t: np.ndarray  # (d, d_t)
    w_k_t: np.ndarray  # (d, d_t)
    w_v_t: np.ndarray  # (d, d_t)
    w_q_g: np.ndarray  # (d, d_g)
    w_k_g: np.ndarray  # (d, d_g)
    w_v_g: np.ndarray  # (d, d_g)
    d: int


@dataclass
class FusedEmbeddings:
    """The four unified embeddings for one code (or a stacked batch)."""

    e_t_s: nc.Node
    e_g_s: nc.Node
    e_t_c: nc.Node
    e_g_c: nc.Node

    def groups(self) -> dict[str, nc.Node]:
        return {"ts": self.e_t_s, "gs": self.e_g_s, "tc": self.e_t_c, "gc": self.e_g_c}


def init_fusion_params(d: int, d_t: int, d_g: int, rng: np.random.Generator) -> FusionParams:
    def w(cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(d, cols))

    return FusionParams(
        f_t=w(d_t),
        f_g=w(d_g),
        w_q_t=w(d_t),
        w_k_t=w(d_t),
        w_v_t=w(d_t),
        w_q_g=w(d_g),
        w_k_g=w(d_g),
        w_v_g=w(d_g),
        d=d,
    )


def project_specific(x_t, x_g, p: FusionParams) -> tuple[nc.Node, nc.Node]:
    """Linear projections of the pooled vectors into the unified space."""
    e_t_s = nc.matmul(x_t, nc.transpose(p.f_t))
    e_g_s = nc.matmul(x_g, nc.transpose(p.f_g))
    return e_t_s, e_g_s


def cross_attend(queries_src, keys_vals_src, w_q, w_k, w_v, d: int) -> nc.Node:
    """Scaled dot-product attention pooled to a single vector.

    Projects queries and keys/values, softmaxes scores over the key axis
    per query row, and averages the attended rows into one 1 x d output.
    """
    queries_src = nc._lift(queries_src)
    keys_vals_src = nc._lift(keys_vals_src)
    if queries_src.value.shape[0] < 1 or keys_vals_src.value.shape[0] < 1:
        raise DimensionError("cross_attend: need at least one query and one key row")
    q = nc.matmul(queries_src, nc.transpose(w_q))
    k = nc.matmul(keys_vals_src, nc.transpose(w_k))
    v = nc.matmul(keys_vals_src, nc.transpose(w_v))
    scores = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(d))
    attn = nc.softmax_rows(scores)
    return nc.mean_rows(nc.matmul(attn, v))


def fuse(text_states, node_states, x_t, x_g, p: FusionParams) -> FusedEmbeddings:
    """Assemble the four fused embeddings for one code."""
    e_t_s, e_g_s = project_specific(x_t, x_g, p)
    e_t_c = cross_attend(text_states, node_states, p.w_q_t, p.w_k_g, p.w_v_g, p.d)
    e_g_c = cross_attend(node_states, text_states, p.w_q_g, p.w_k_t, p.w_v_t, p.d)
    return FusedEmbeddings(e_t_s=e_t_s, e_g_s=e_g_s, e_t_c=e_t_c, e_g_c=e_g_c)
