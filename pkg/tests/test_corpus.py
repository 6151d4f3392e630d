import json
import os
import pickle
from pathlib import Path

import numpy as np
import pytest

from medtok import corpus
from medtok.errors import IngestError

TABLE1_COUNTS = {
    "SNOMEDCT": 303_325,
    "ICD10CM": 81_184,
    "RXNORM": 81_151,
    "ICD10PCS": 61_644,
    "NDC": 54_560,
    "ICD9": 18_365,
    "CPT": 10_602,
    "ATC": 6_659,
}
TABLE1_TOTAL = 617_490


def write_codes(path: Path, records):
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def write_lines(path: Path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@pytest.fixture()
def tiny_corpus(tmp_path):
    codes = tmp_path / "codes.jsonl"
    nodes = tmp_path / "nodes.tsv"
    edges = tmp_path / "edges.tsv"
    mapping = tmp_path / "map.tsv"
    write_codes(
        codes,
        [
            {"code_id": "ICD9:250.0", "system": "ICD9", "description": "diabetes mellitus"},
            {"code_id": "ATC:A10", "system": "ATC", "description": "drugs used in diabetes"},
            {"code_id": "CPT:99213", "system": "CPT", "description": "office visit"},
        ],
    )
    write_lines(nodes, ["d1\tdisease", "m1\tdrug", "m2\tdrug"])
    write_lines(edges, ["m1\ttreats\td1", "m2\ttreats\td1"])
    write_lines(mapping, ["ICD9:250.0\td1", "ATC:A10\tm1", "ATC:A10\tm2"])
    return codes, nodes, edges, mapping


class TestLoadCodes:
    def test_three_distinct_codes(self, tiny_corpus):
        registry = corpus.load_codes(tiny_corpus[0])
        assert len(registry) == 3

    def test_duplicate_code_id_names_id_and_line(self, tmp_path):
        path = tmp_path / "codes.jsonl"
        write_codes(
            path,
            [
                {"code_id": "ICD9:1", "system": "ICD9", "description": "a"},
                {"code_id": "ICD9:1", "system": "ICD9", "description": "b"},
            ],
        )
        with pytest.raises(IngestError, match=r"2.*ICD9:1|ICD9:1.*2"):
            corpus.load_codes(path)

    def test_unknown_system(self, tmp_path):
        path = tmp_path / "codes.jsonl"
        write_codes(path, [{"code_id": "X:1", "system": "LOINC", "description": "a"}])
        with pytest.raises(IngestError, match="LOINC"):
            corpus.load_codes(path)

    def test_empty_description(self, tmp_path):
        path = tmp_path / "codes.jsonl"
        write_codes(path, [{"code_id": "ICD9:1", "system": "ICD9", "description": "  "}])
        with pytest.raises(IngestError, match="description"):
            corpus.load_codes(path)

    def test_unprefixed_code_id_rejected(self, tmp_path):
        path = tmp_path / "codes.jsonl"
        write_codes(path, [{"code_id": "250.0", "system": "ICD9", "description": "d"}])
        with pytest.raises(IngestError, match="prefixed"):
            corpus.load_codes(path)

    def test_cross_system_prefix_mismatch_rejected(self, tmp_path):
        path = tmp_path / "codes.jsonl"
        write_codes(path, [{"code_id": "ATC:X", "system": "ICD9", "description": "d"}])
        with pytest.raises(IngestError, match="prefixed"):
            corpus.load_codes(path)

    def test_per_system_counts_sum_to_total(self, tiny_corpus):
        registry = corpus.load_codes(tiny_corpus[0])
        counts = registry.per_system_counts()
        assert sum(counts.values()) == len(registry)
        assert counts["ICD9"] == 1

    def test_idempotent(self, tiny_corpus):
        a = corpus.load_codes(tiny_corpus[0])
        b = corpus.load_codes(tiny_corpus[0])
        assert a == b

    @pytest.mark.skipif(
        "MEDTOK_FULL_CORPUS" not in os.environ,
        reason="full corpus files not available (set MEDTOK_FULL_CORPUS to their directory)",
    )
    def test_released_corpus_counts(self):
        registry = corpus.load_codes(Path(os.environ["MEDTOK_FULL_CORPUS"]) / "codes.jsonl")
        counts = registry.per_system_counts()
        for system, expected in TABLE1_COUNTS.items():
            assert counts[system] == expected
        assert len(registry) == TABLE1_TOTAL


class TestLoadKg:
    def test_two_nodes_one_edge(self, tmp_path):
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        write_lines(nodes, ["a\tx", "b\ty"])
        write_lines(edges, ["a\tr\tb"])
        kg = corpus.load_kg(nodes, edges)
        assert sorted(kg.degree(n) for n in kg.nodes) == [1, 1]

    def test_edge_to_missing_node_echoes_triple(self, tmp_path):
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        write_lines(nodes, ["a\tx"])
        write_lines(edges, ["a\tr\tzz"])
        with pytest.raises(IngestError, match="zz"):
            corpus.load_kg(nodes, edges)

    def test_triangle_degrees(self, tmp_path):
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        write_lines(nodes, ["a\tx", "b\tx", "c\tx"])
        write_lines(edges, ["a\tr\tb", "b\tr\tc", "c\tr\ta"])
        kg = corpus.load_kg(nodes, edges)
        assert [kg.degree(n) for n in ("a", "b", "c")] == [2, 2, 2]

    def test_duplicate_triples_dropped(self, tmp_path):
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        write_lines(nodes, ["a\tx", "b\tx"])
        write_lines(edges, ["a\tr\tb", "a\tr\tb"])
        kg = corpus.load_kg(nodes, edges)
        assert len(kg.edges) == 1

    def test_idempotent(self, tiny_corpus):
        _, nodes, edges, _ = tiny_corpus
        assert corpus.load_kg(nodes, edges) == corpus.load_kg(nodes, edges)


class TestLoadMapping:
    def test_code_mapped_to_two_nodes(self, tiny_corpus):
        codes, nodes, edges, mapping = tiny_corpus
        registry = corpus.load_codes(codes)
        kg = corpus.load_kg(nodes, edges)
        registry, unmapped = corpus.load_mapping(mapping, registry, kg)
        assert registry["ATC:A10"].kg_nodes == ["m1", "m2"]

    def test_unmapped_code_reported_not_rejected(self, tiny_corpus):
        codes, nodes, edges, mapping = tiny_corpus
        registry = corpus.load_codes(codes)
        kg = corpus.load_kg(nodes, edges)
        registry, unmapped = corpus.load_mapping(mapping, registry, kg)
        assert unmapped == ["CPT:99213"]

    def test_unknown_node_rejected(self, tiny_corpus, tmp_path):
        codes, nodes, edges, _ = tiny_corpus
        registry = corpus.load_codes(codes)
        kg = corpus.load_kg(nodes, edges)
        bad = tmp_path / "bad.tsv"
        write_lines(bad, ["ICD9:250.0\tnope"])
        with pytest.raises(IngestError, match="nope"):
            corpus.load_mapping(bad, registry, kg)

    def test_unknown_code_rejected(self, tiny_corpus, tmp_path):
        codes, nodes, edges, _ = tiny_corpus
        registry = corpus.load_codes(codes)
        kg = corpus.load_kg(nodes, edges)
        bad = tmp_path / "bad.tsv"
        write_lines(bad, ["ICD9:999\td1"])
        with pytest.raises(IngestError, match="ICD9:999"):
            corpus.load_mapping(bad, registry, kg)

    def test_every_mapping_resolves(self, tiny_corpus):
        codes, nodes, edges, mapping = tiny_corpus
        registry = corpus.load_codes(codes)
        kg = corpus.load_kg(nodes, edges)
        registry, _ = corpus.load_mapping(mapping, registry, kg)
        for code in registry.codes.values():
            assert all(n in kg.nodes for n in code.kg_nodes)


class TestGenSynthetic:
    def test_counts(self):
        registry, kg, emb = corpus.gen_synthetic(4, 50, seed=7)
        assert len(registry) == 200
        hubs = [n for n, t in kg.nodes.items() if t.startswith("family_")]
        assert len(hubs) == 4
        assert len(emb) == 200

    def test_deterministic_under_seed(self):
        a = corpus.gen_synthetic(3, 10, seed=13)
        b = corpus.gen_synthetic(3, 10, seed=13)
        assert pickle.dumps(a[0]) == pickle.dumps(b[0])
        assert pickle.dumps(a[1]) == pickle.dumps(b[1])
        assert pickle.dumps(a[2]) == pickle.dumps(b[2])

    def test_seed_changes_output(self):
        a = corpus.gen_synthetic(3, 10, seed=13)
        b = corpus.gen_synthetic(3, 10, seed=14)
        assert pickle.dumps(a[2]) != pickle.dumps(b[2])

    def test_family_means_separated_beyond_infamily_std(self):
        registry, _, emb = corpus.gen_synthetic(4, 50, seed=7)
        by_family = {}
        for code_id in registry.code_ids():
            fam = code_id.split(":F")[1].split("-")[0]
            by_family.setdefault(fam, []).append(emb.pooled[code_id])
        means = {f: np.mean(v, axis=0) for f, v in by_family.items()}
        stds = {f: float(np.mean(np.linalg.norm(v - means[f], axis=1))) for f, v in by_family.items()}
        fams = sorted(means)
        for i, fi in enumerate(fams):
            for fj in fams[i + 1 :]:
                gap = float(np.linalg.norm(means[fi] - means[fj]))
                assert gap > max(stds[fi], stds[fj])

    def test_codes_share_family_hub(self):
        registry, kg, _ = corpus.gen_synthetic(2, 5, seed=3)
        for code in registry.codes.values():
            (node,) = code.kg_nodes
            assert any(nbr.startswith("hub_") for nbr in kg.neighbors(node))

    def test_needs_two_families(self):
        with pytest.raises(IngestError):
            corpus.gen_synthetic(1, 5, seed=1)
