"""Code registry, knowledge graph, and mapping ingestion.

File formats (all UTF-8):
  codes    one JSON object per line: {"code_id", "system", "description"}
  nodes    tab-separated "node_id<TAB>type", no header
  edges    tab-separated "head<TAB>relation<TAB>tail", no header
  mapping  tab-separated "code_id<TAB>node_id"

Code ids are system-prefixed (e.g. "ICD9:250.0") because identical
numeric strings occur across coding systems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import IngestError

NULL_NODE_TYPE = "__null__"
MEMBER_NODE_TYPE = "concept"


class CodingSystem(str, Enum):
    ICD9 = "ICD9"
    ICD10CM = "ICD10CM"
    ICD10PCS = "ICD10PCS"
    SNOMEDCT = "SNOMEDCT"
    ATC = "ATC"
    NDC = "NDC"
    CPT = "CPT"
    RXNORM = "RXNORM"


@dataclass
class MedicalCode:
    code_id: str
    system: CodingSystem
    description: str
    kg_nodes: list[str] = field(default_factory=list)


@dataclass
class KnowledgeGraph:
    """Undirected view of typed triples; exact duplicate triples are dropped."""

    nodes: dict[str, str]
    edges: list[tuple[str, str, str]]
    _adjacency: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._adjacency:
            self._build_adjacency()

    def _build_adjacency(self) -> None:
        adj: dict[str, set[str]] = {n: set() for n in self.nodes}
        for h, _, t in self.edges:
            if h != t:
                adj[h].add(t)
                adj[t].add(h)
        self._adjacency = {n: sorted(nbrs) for n, nbrs in adj.items()}

    def neighbors(self, node_id: str) -> list[str]:
        return self._adjacency[node_id]

    def degree(self, node_id: str) -> int:
        return len(self._adjacency[node_id])

    def __eq__(self, other):
        return (
            isinstance(other, KnowledgeGraph)
            and self.nodes == other.nodes
            and self.edges == other.edges
        )


@dataclass
class CodeRegistry:
    codes: dict[str, MedicalCode]

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code_id: str) -> bool:
        return code_id in self.codes

    def __getitem__(self, code_id: str) -> MedicalCode:
        return self.codes[code_id]

    def code_ids(self) -> list[str]:
        return list(self.codes)

    def per_system_counts(self) -> dict[str, int]:
        counts = {s.value: 0 for s in CodingSystem}
        for code in self.codes.values():
            counts[code.system.value] += 1
        return counts

    def unmapped_code_ids(self) -> list[str]:
        return [c.code_id for c in self.codes.values() if not c.kg_nodes]


def load_codes(path: str | Path) -> CodeRegistry:
    """Parse and validate a line-delimited codes file."""
    path = Path(path)
    codes: dict[str, MedicalCode] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            for key in ("code_id", "system", "description"):
                if key not in rec:
                    raise IngestError(f"{path}:{lineno}: missing field {key!r}")
            code_id = rec["code_id"]
            if code_id in codes:
                raise IngestError(f"{path}:{lineno}: duplicate code_id {code_id!r}")
            try:
                system = CodingSystem(rec["system"])
            except ValueError:
                raise IngestError(
                    f"{path}:{lineno}: unknown coding system {rec['system']!r}"
                ) from None
            # ids are system-prefixed so numerically identical codes from
            # different systems cannot collide
            if not code_id.startswith(system.value + ":"):
                raise IngestError(
                    f"{path}:{lineno}: code_id {code_id!r} must be prefixed "
                    f"with {system.value + ':'!r}"
                )
            description = rec["description"]
            if not isinstance(description, str) or not description.strip():
                raise IngestError(f"{path}:{lineno}: empty description for {code_id!r}")
            codes[code_id] = MedicalCode(code_id, system, description)
    return CodeRegistry(codes)


def load_kg(nodes_path: str | Path, edges_path: str | Path) -> KnowledgeGraph:
    """Parse node and edge files into a validated graph."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    nodes: dict[str, str] = {}
    with nodes_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestError(f"{nodes_path}:{lineno}: expected 'node_id<TAB>type'")
            node_id, node_type = parts
            if node_id in nodes:
                raise IngestError(f"{nodes_path}:{lineno}: duplicate node_id {node_id!r}")
            nodes[node_id] = node_type

    edges: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    with edges_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestError(f"{edges_path}:{lineno}: expected 'head<TAB>relation<TAB>tail'")
            triple = (parts[0], parts[1], parts[2])
            for endpoint in (triple[0], triple[2]):
                if endpoint not in nodes:
                    raise IngestError(
                        f"{edges_path}:{lineno}: edge {triple!r} references unknown node {endpoint!r}"
                    )
            if triple in seen:
                continue
            seen.add(triple)
            edges.append(triple)
    return KnowledgeGraph(nodes, edges)


def load_mapping(
    path: str | Path, registry: CodeRegistry, kg: KnowledgeGraph
) -> tuple[CodeRegistry, list[str]]:
    """Attach code-to-node mappings; returns (registry, unmapped report)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestError(f"{path}:{lineno}: expected 'code_id<TAB>node_id'")
            code_id, node_id = parts
            if code_id not in registry:
                raise IngestError(f"{path}:{lineno}: mapping references unknown code {code_id!r}")
            if node_id not in kg.nodes:
                raise IngestError(f"{path}:{lineno}: mapping references unknown node {node_id!r}")
            nodes = registry[code_id].kg_nodes
            if node_id not in nodes:
                nodes.append(node_id)
    return registry, registry.unmapped_code_ids()


def gen_synthetic(
    families: int, codes_per_family: int, seed: int, d_t: int = 32
) -> tuple[CodeRegistry, KnowledgeGraph, "TextEmbeddingSet"]:
    """Desk-scale synthetic corpus with a planted family structure.

    Each family has a hub node with a family-specific type; every code
    gets its own concept node attached to the hub, and its text
    embedding is drawn from a family-specific Gaussian whose centers sit
    far apart relative to the in-family spread. Deterministic under
    ``seed``.
    """
    from .textenc import TextEmbeddingSet

    if families < 2:
        raise IngestError("gen_synthetic: need at least 2 families")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 900]))
    systems = list(CodingSystem)

    nodes: dict[str, str] = {}
    edges: list[tuple[str, str, str]] = []
    codes: dict[str, MedicalCode] = {}
    pooled: dict[str, np.ndarray] = {}
    states: dict[str, np.ndarray] = {}

    centers = rng.normal(0.0, 1.0, size=(families, d_t))
    for f in range(families):
        hub = f"hub_{f}"
        nodes[hub] = f"family_{f}"
        for i in range(codes_per_family):
            system = systems[(f * codes_per_family + i) % len(systems)]
            code_id = f"{system.value}:F{f}-{i:04d}"
            node_id = f"n_{f}_{i:04d}"
            nodes[node_id] = MEMBER_NODE_TYPE
            edges.append((node_id, "member_of", hub))
            codes[code_id] = MedicalCode(
                code_id, system, f"synthetic family {f} concept {i}", [node_id]
            )
            pooled[code_id] = centers[f] + rng.normal(0.0, 0.25, size=d_t)
            n_states = int(rng.integers(2, 7))
            states[code_id] = pooled[code_id] + rng.normal(0.0, 0.1, size=(n_states, d_t))

    registry = CodeRegistry(codes)
    kg = KnowledgeGraph(nodes, edges)
    emb = TextEmbeddingSet(pooled=pooled, states=states, d_t=d_t)
    return registry, kg, emb
