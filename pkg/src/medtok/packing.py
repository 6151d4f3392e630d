"""Token-packing objectives.

Three ingredients, all over one batch:

  - a KL term aligning the two cross embeddings' softmax(-distance)
    distributions against the full codebook;
  - InfoNCE with in-batch negatives on L2-normalized rows;
  - an orthogonality penalty (mean squared cosine similarity) that
    suppresses leakage between one modality's specific embedding and the
    other modality's cross quantized vector.

The combined token loss is the cross part (two InfoNCE directions minus
a weighted mean normalized dot product) plus the specific part (each
specific quantized vector pulled to its own pre-quantization embedding,
plus the weighted orthogonality penalties).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .fusion import FusedEmbeddings
from .quantizer import Codebook

DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class PackingConfig:
    beta: float = 0.1
    lam: float = 0.1
    tau: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("InfoNCE temperature must be > 0")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lambda must be >= 0")


def kl_alignment_loss(e_t_c, e_g_c, cb: Codebook) -> nc.Node:
    """Mean KL between the two cross embeddings' codebook-distance softmaxes."""
    e_t_c, e_g_c = nc._lift(e_t_c), nc._lift(e_g_c)
    b = e_t_c.value.shape[0]
    if e_g_c.value.shape[0] != b:
        raise ConfigError("kl_alignment_loss: batch sizes differ")
    logits_t = nc.scale(nc.pairwise_sqdist(e_t_c, cb.c), -1.0)
    logits_g = nc.scale(nc.pairwise_sqdist(e_g_c, cb.c), -1.0)
    p = nc.softmax_rows(logits_t)
    log_ratio = nc.sub(nc.log_softmax_rows(logits_t), nc.log_softmax_rows(logits_g))
    return nc.scale(nc.sum_all(nc.mul(p, log_ratio)), 1.0 / b)


def infonce(anchors, positives, tau: float = DEFAULT_TEMPERATURE) -> nc.Node:
    """In-batch InfoNCE over cosine similarities at temperature ``tau``.

    Row i of ``positives`` is the positive for row i of ``anchors``; all
    other rows are negatives.
    """
    anchors, positives = nc._lift(anchors), nc._lift(positives)
    b = anchors.value.shape[0]
    if b < 2:
        raise ConfigError("infonce: need batch size >= 2")
    if positives.value.shape != anchors.value.shape:
        raise ConfigError("infonce: anchors and positives must have equal shapes")
    a_n = nc.normalize_rows(anchors)
    p_n = nc.normalize_rows(positives)
    logits = nc.scale(nc.matmul(a_n, nc.transpose(p_n)), 1.0 / tau)
    diag_mask = nc.constant(np.eye(b))
    log_probs = nc.log_softmax_rows(logits)
    return nc.scale(nc.sum_all(nc.mul(log_probs, diag_mask)), -1.0 / b)


def orthogonality_penalty(a, b) -> nc.Node:
    """Mean squared cosine similarity between paired rows."""
    a, b = nc._lift(a), nc._lift(b)
    if a.value.shape != b.value.shape:
        raise ConfigError("orthogonality_penalty: shapes differ")
    cos = nc.row_sum(nc.mul(nc.normalize_rows(a), nc.normalize_rows(b)))
    return nc.mean_all(nc.mul(cos, cos))


def mean_normalized_dot(a, b) -> nc.Node:
    """Batch mean of row-wise dot products between L2-normalized rows."""
    a, b = nc._lift(a), nc._lift(b)
    return nc.mean_all(nc.row_sum(nc.mul(nc.normalize_rows(a), nc.normalize_rows(b))))


def token_packing_loss(
    fused: FusedEmbeddings,
    quantized: dict[str, nc.Node],
    cfg: PackingConfig,
) -> tuple[nc.Node, nc.Node, nc.Node]:
    """(cross-part, specific-part, total) of the token packing loss.

    ``fused`` holds the batched pre-quantization embeddings (B x d
    each); ``quantized`` maps group name ("ts", "gs", "tc", "gc") to the
    batched straight-through quantized vectors.
    """
    q_ts, q_gs, q_tc, q_gc = (quantized[g] for g in ("ts", "gs", "tc", "gc"))

    cross = nc.add(
        infonce(q_tc, q_gc, cfg.tau),
        infonce(q_gc, q_tc, cfg.tau),
    )
    if cfg.beta != 0.0:
        cross = nc.sub(
            cross,
            nc.scale(mean_normalized_dot(fused.e_t_c, fused.e_g_c), 2.0 * cfg.beta),
        )

    specific = nc.add(
        infonce(q_ts, fused.e_t_s, cfg.tau),
        infonce(q_gs, fused.e_g_s, cfg.tau),
    )
    if cfg.lam != 0.0:
        penalty = nc.add(
            orthogonality_penalty(fused.e_t_s, q_gc),
            orthogonality_penalty(fused.e_g_s, q_tc),
        )
        specific = nc.add(specific, nc.scale(penalty, cfg.lam))

    return cross, specific, nc.add(cross, specific)


def uniform_logits_value(batch: int) -> float:
    """InfoNCE value when every similarity ties: ln(batch)."""
    return math.log(batch)
