"""Region-partitioned codebook: top-K lookup, weighted quantization,
straight-through gradients, and the quantization loss.

The codebook's rows are split into four contiguous regions in fixed
order: text-specific, graph-specific, text-shared, graph-shared. The
specific embeddings query their own region; the two cross embeddings
query the combined shared region (optionally only their modality's
shared sub-region).

Selected tokens are combined with softmax(-squared distance) weights,
so nearer codewords contribute more. The quantized vector used
downstream carries straight-through semantics: its forward value is the
weighted combination, its gradient w.r.t. the query embedding is the
identity, and codebook rows receive gradients only through the loss
terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .fusion import FusedEmbeddings

GROUP_ORDER = ("ts", "gs", "tc", "gc")
DEFAULT_REGION_FRACTIONS = (0.25, 0.25, 0.25, 0.25)


@dataclass(frozen=True)
class RegionLayout:
    """Contiguous, disjoint row ranges covering [0, N) exactly."""

    text_specific: range
    graph_specific: range
    text_shared: range
    graph_shared: range

    def __post_init__(self):
        regions = [self.text_specific, self.graph_specific, self.text_shared, self.graph_shared]
        pos = 0
        for r in regions:
            if r.start != pos:
                raise ConfigError(f"regions must tile [0, N) contiguously; gap at {pos}")
            if len(r) < 1:
                raise ConfigError("every region must be nonempty")
            pos = r.stop

    @property
    def n(self) -> int:
        return self.graph_shared.stop

    @property
    def shared(self) -> range:
        return range(self.text_shared.start, self.graph_shared.stop)

    @classmethod
    def from_fractions(cls, n: int, fractions=DEFAULT_REGION_FRACTIONS) -> "RegionLayout":
        if len(fractions) != 4:
            raise ConfigError("need exactly 4 region fractions")
        if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError("region fractions must be positive and sum to 1")
        raw = [f * n for f in fractions]
        sizes = [math.floor(r) for r in raw]
        leftovers = sorted(range(4), key=lambda i: (-(raw[i] - sizes[i]), i))
        for i in leftovers[: n - sum(sizes)]:
            sizes[i] += 1
        if min(sizes) < 1:
            raise ConfigError(f"codebook size {n} too small for fractions {fractions}")
        bounds = np.cumsum([0] + sizes)
        return cls(*(range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])))

    def region_for_group(self, group: str, cross_whole_shared: bool = True) -> range:
        if group == "ts":
            return self.text_specific
        if group == "gs":
            return self.graph_specific
        if group == "tc":
            return self.shared if cross_whole_shared else self.text_shared
        if group == "gc":
            return self.shared if cross_whole_shared else self.graph_shared
        raise ConfigError(f"unknown token group {group!r}")

    def group_of_id(self, token_id: int) -> str:
        for group, r in zip(
            GROUP_ORDER, (self.text_specific, self.graph_specific, self.text_shared, self.graph_shared)
        ):
            if token_id in r:
                return group
        raise ConfigError(f"token id {token_id} outside [0, {self.n})")

    def as_offsets(self) -> tuple[int, int, int, int]:
        return (
            self.text_specific.start,
            self.graph_specific.start,
            self.text_shared.start,
            self.graph_shared.start,
        )

    @classmethod
    def from_offsets(cls, n: int, offsets) -> "RegionLayout":
        starts = list(offsets) + [n]
        return cls(*(range(starts[i], starts[i + 1]) for i in range(4)))


@dataclass
class Codebook:
    """Learned N x d codeword table; ``c`` may be an array or a node."""

    c: np.ndarray
    layout: RegionLayout

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def d(self) -> int:
        return self.c.shape[1]

    def values(self) -> np.ndarray:
        return self.c.value if isinstance(self.c, nc.Node) else self.c


def init_codebook(
    n: int, d: int, rng: np.random.Generator, fractions=DEFAULT_REGION_FRACTIONS
) -> Codebook:
    """Rows uniform in [-1/sqrt(d), 1/sqrt(d)] under the run seed."""
    bound = 1.0 / np.sqrt(d)
    c = rng.uniform(-bound, bound, size=(n, d))
    return Codebook(c=c, layout=RegionLayout.from_fractions(n, fractions))


@dataclass
class TokenGroup:
    """K selected token ids with weights and the quantized vector.

    ``weights`` sum to 1 and decrease with distance. ``e_hat`` is the
    straight-through forward value. The node handles are populated when
    the group was produced inside a differentiable graph.
    """

    token_ids: np.ndarray  # (K,) global codebook row ids, ascending distance
    weights: np.ndarray  # (K,) float64
    e_hat: np.ndarray  # (d,) float64
    e_hat_node: nc.Node | None = field(default=None, repr=False)
    e_hat_raw_node: nc.Node | None = field(default=None, repr=False)
    weights_node: nc.Node | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.token_ids)


@dataclass
class QuantizedBundle:
    """The four token groups for one code: ts, gs, tc, gc."""

    ts: TokenGroup
    gs: TokenGroup
    tc: TokenGroup
    gc: TokenGroup

    def groups(self) -> dict[str, TokenGroup]:
        return {"ts": self.ts, "gs": self.gs, "tc": self.tc, "gc": self.gc}

    def flat_token_ids(self) -> np.ndarray:
        return np.concatenate([self.groups()[g].token_ids for g in GROUP_ORDER])


def select_topk(e, cb: Codebook, region: range, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The K region codewords nearest to ``e`` by squared Euclidean distance.

    Returns (global ids, distances) sorted ascending by distance, ties
    broken by lower row index.
    """
    if k < 1:
        raise ConfigError("K must be >= 1")
    if k > len(region):
        raise ConfigError(f"K={k} exceeds region size {len(region)}")
    e_val = e.value if isinstance(e, nc.Node) else nc.as_matrix(e)
    if e_val.shape != (1, cb.d):
        raise DimensionError(f"select_topk: expected a 1x{cb.d} query, got {e_val.shape}")
    rows = cb.values()[region.start : region.stop]
    dists = nc.sqdist_values(e_val, rows)[0]
    order = np.argsort(dists, kind="stable")[:k]
    return (region.start + order).astype(np.int64), dists[order]


def aggregate_quantize(e, ids, dists, cb: Codebook) -> TokenGroup:
    """Combine the selected codewords into a quantized vector.

    Weights are softmax(-distance) over the K selected rows; the
    straight-through output's gradient w.r.t. ``e`` is the identity and
    the query side of the distances is detached, so codebook rows learn
    only from explicit loss terms.
    """
    e_node = e if isinstance(e, nc.Node) else nc.constant(e)
    ids = np.asarray(ids, dtype=np.int64)
    if dists is not None and len(np.atleast_1d(dists)) != len(ids):
        raise DimensionError("aggregate_quantize: ids and dists lengths differ")
    selected = nc.gather_rows(cb.c, ids)
    d_node = nc.pairwise_sqdist(nc.stop_grad(e_node), selected)
    w = nc.softmax_rows(nc.scale(d_node, -1.0))
    e_hat_raw = nc.matmul(w, selected)
    e_hat = nc.straight_through(e_hat_raw, e_node)
    return TokenGroup(
        token_ids=ids,
        weights=w.value[0].copy(),
        e_hat=e_hat.value[0].copy(),
        e_hat_node=e_hat,
        e_hat_raw_node=e_hat_raw,
        weights_node=w,
    )


def quantize_group(e, cb: Codebook, region: range, k: int) -> TokenGroup:
    ids, dists = select_topk(e, cb, region, k)
    return aggregate_quantize(e, ids, dists, cb)


def quantize_all(
    f: FusedEmbeddings, cb: Codebook, k: int, cross_whole_shared: bool = True
) -> QuantizedBundle:
    """Quantize the four fused embeddings against their regions."""
    layout = cb.layout
    return QuantizedBundle(
        ts=quantize_group(f.e_t_s, cb, layout.text_specific, k),
        gs=quantize_group(f.e_g_s, cb, layout.graph_specific, k),
        tc=quantize_group(f.e_t_c, cb, layout.region_for_group("tc", cross_whole_shared), k),
        gc=quantize_group(f.e_g_c, cb, layout.region_for_group("gc", cross_whole_shared), k),
    )


def vq_loss(pairs, alpha: float) -> nc.Node:
    """Codebook alignment plus commitment over (e, e_hat_raw) pairs.

    For each pair: ||sg[e] - e_hat||^2 + alpha * ||e - sg[e_hat]||^2.
    The first term's gradient reaches codebook rows only, the second
    term's reaches the encoder path only.
    """
    total = None
    for e, e_hat in pairs:
        e = e if isinstance(e, nc.Node) else nc.constant(e)
        e_hat = e_hat if isinstance(e_hat, nc.Node) else nc.constant(e_hat)
        diff_cb = nc.sub(nc.stop_grad(e), e_hat)
        diff_enc = nc.sub(e, nc.stop_grad(e_hat))
        term = nc.add(
            nc.sum_all(nc.mul(diff_cb, diff_cb)),
            nc.scale(nc.sum_all(nc.mul(diff_enc, diff_enc)), alpha),
        )
        total = term if total is None else nc.add(total, term)
    if total is None:
        raise ConfigError("vq_loss: no pairs")
    return total


def bundle_vq_loss(f: FusedEmbeddings, bundle: QuantizedBundle, alpha: float) -> nc.Node:
    """vq_loss over the four fused/quantized pairs of one forward pass."""
    groups = bundle.groups()
    return vq_loss(
        [(f.groups()[g], groups[g].e_hat_raw_node) for g in GROUP_ORDER],
        alpha,
    )
