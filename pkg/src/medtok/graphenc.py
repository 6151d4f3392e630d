"""Node-centered subgraph extraction and the trainable graph encoder.

The encoder is a 2-layer mean-aggregation message-passing network over
the code's ego subgraph: node features start from a learned
type-embedding table, each layer applies
ReLU(W_self h_v + W_nbr * mean of neighbor states), and the graph
embedding is the mean over final node states. Nodes are processed in
canonical (sorted node id) order, which makes the result exactly
invariant to the order the subgraph presents its nodes in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .corpus import NULL_NODE_TYPE, KnowledgeGraph, MedicalCode
from .errors import ConfigError

DEFAULT_HOPS = 2
DEFAULT_CAP = 128


@dataclass
class CodeSubgraph:
    """Ego graph around a code's mapped nodes, local-index adjacency."""

    center_ids: list[str]
    node_ids: list[str]
    node_types: list[str]
    edges: list[tuple[int, int]]
    hop_limit: int

    def __len__(self) -> int:
        return len(self.node_ids)


@dataclass
class GraphEncoderParams:
    """Type-embedding table plus per-layer self/neighbor weights."""

    type_vocab: list[str]
    type_embed: np.ndarray  # (len(type_vocab), d_g)
    w_self: list[np.ndarray]  # each (d_g, d_g)
    w_nbr: list[np.ndarray]  # each (d_g, d_g)

    @property
    def d_g(self) -> int:
        return self.type_embed.shape[1]

    @property
    def layers(self) -> int:
        return len(self.w_self)

    def type_index(self, label: str) -> int:
        try:
            return self.type_vocab.index(label)
        except ValueError:
            raise ConfigError(f"unknown node type {label!r}; known: {self.type_vocab}") from None


def init_graph_params(
    type_labels: list[str], d_g: int, layers: int, rng: np.random.Generator
) -> GraphEncoderParams:
    """Fresh parameters over the observed type vocabulary plus the null type."""
    if layers < 1:
        raise ConfigError("graph encoder needs at least 1 layer")
    vocab = sorted(set(type_labels) | {NULL_NODE_TYPE})
    scale = 1.0 / np.sqrt(d_g)
    type_embed = rng.normal(0.0, scale, size=(len(vocab), d_g))
    w_self = [rng.normal(0.0, scale, size=(d_g, d_g)) for _ in range(layers)]
    w_nbr = [rng.normal(0.0, scale, size=(d_g, d_g)) for _ in range(layers)]
    return GraphEncoderParams(vocab, type_embed, w_self, w_nbr)


def extract_subgraph(
    code: MedicalCode, kg: KnowledgeGraph, hops: int = DEFAULT_HOPS, cap: int = DEFAULT_CAP
) -> CodeSubgraph:
    """Union of breadth-first ego graphs around the code's mapped nodes.

    Truncates to at most ``cap`` nodes in BFS order, ties within a hop
    broken by lower node id. A code with no mapping gets a single
    virtual null node.
    """
    if hops < 0:
        raise ConfigError("hops must be >= 0")
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    centers = sorted(set(code.kg_nodes))
    if not centers:
        return CodeSubgraph(
            center_ids=[],
            node_ids=["<null>"],
            node_types=[NULL_NODE_TYPE],
            edges=[],
            hop_limit=hops,
        )

    chosen: list[str] = []
    seen: set[str] = set()
    frontier = centers
    for node in frontier:
        if len(chosen) >= cap:
            break
        seen.add(node)
        chosen.append(node)
    for _ in range(hops):
        if len(chosen) >= cap:
            break
        nxt: set[str] = set()
        for node in frontier:
            for nbr in kg.neighbors(node):
                if nbr not in seen:
                    nxt.add(nbr)
        frontier = sorted(nxt)
        for node in frontier:
            if len(chosen) >= cap:
                break
            seen.add(node)
            chosen.append(node)

    # Canonical order: sorted node ids; edges are the induced undirected pairs.
    node_ids = sorted(chosen)
    local = {n: i for i, n in enumerate(node_ids)}
    edge_set: set[tuple[int, int]] = set()
    for node, i in local.items():
        for nbr in kg.neighbors(node):
            j = local.get(nbr)
            if j is not None and i < j:
                edge_set.add((i, j))
    return CodeSubgraph(
        center_ids=centers,
        node_ids=node_ids,
        node_types=[kg.nodes[n] for n in node_ids],
        edges=sorted(edge_set),
        hop_limit=hops,
    )


def neighbor_mean_matrix(g: CodeSubgraph) -> np.ndarray:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    n = len(g.node_ids)
    a = np.zeros((n, n))
    for i, j in g.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    np.divide(a, deg, out=a, where=deg > 0)
    return a


def _canonicalize(g: CodeSubgraph) -> CodeSubgraph:
    order = sorted(range(len(g.node_ids)), key=lambda i: g.node_ids[i])
    if order == list(range(len(g.node_ids))):
        return g
    remap = {old: new for new, old in enumerate(order)}
    return CodeSubgraph(
        center_ids=g.center_ids,
        node_ids=[g.node_ids[i] for i in order],
        node_types=[g.node_types[i] for i in order],
        edges=sorted((min(remap[i], remap[j]), max(remap[i], remap[j])) for i, j in g.edges),
        hop_limit=g.hop_limit,
    )


def encode_graph(g: CodeSubgraph, p: GraphEncoderParams):
    """Encode a subgraph to (pooled embedding 1 x d_g, node states n x d_g).

    ``p`` fields may be raw arrays (inference) or graph nodes shared
    across a batch (training); kernels lift raw arrays to constants.
    """
    if len(g.node_ids) == 0:
        raise ConfigError("encode_graph: empty subgraph")
    g = _canonicalize(g)
    type_idx = np.array([p.type_index(t) for t in g.node_types], dtype=np.int64)
    h = nc.gather_rows(p.type_embed, type_idx)
    a = nc.constant(neighbor_mean_matrix(g)) if len(g.node_ids) > 1 else None
    for w_s, w_n in zip(p.w_self, p.w_nbr):
        self_term = nc.matmul(h, nc.transpose(w_s))
        if a is not None:
            nbr_term = nc.matmul(nc.matmul(a, h), nc.transpose(w_n))
            h = nc.relu(nc.add(self_term, nbr_term))
        else:
            # Empty neighborhood contributes a zero vector.
            h = nc.relu(self_term)
    x_g = nc.mean_rows(h)
    return x_g, h
