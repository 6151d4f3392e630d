import json

import numpy as np
import pytest

from medtok import textenc, tokenizer as tok, trainer
from medtok.errors import CorruptionError, FormatError, UnknownCodeError


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One small trained tokenizer shared by this module."""
    from medtok import corpus

    registry, kg, emb = corpus.gen_synthetic(3, 24, seed=11, d_t=12)
    cfg = trainer.TrainConfig(
        codebook_size=48,
        dim=12,
        graph_dim=12,
        topk=3,
        steps=30,
        batch=24,
        seed=11,
        cap=16,
        checkpoint_every=0,
    )
    out = tmp_path_factory.mktemp("trained")
    tk = trainer.train(registry, kg, emb, cfg, out_dir=out)
    return registry, tk, out / "artifact"


class TestTokenize:
    def test_deterministic(self, trained):
        registry, tk, _ = trained
        code = registry.code_ids()[5]
        a = tok.tokenize(code, tk)
        b = tok.tokenize(code, tk)
        np.testing.assert_array_equal(a.token_ids, b.token_ids)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_sequence_length_is_4k(self, trained):
        registry, tk, _ = trained
        seq = tok.tokenize(registry.code_ids()[0], tk)
        assert len(seq.token_ids) == 4 * tk.k == 12
        assert len(seq.weights) == 4 * tk.k
        assert seq.group_offsets == (0, 3, 6, 9)

    def test_group_containment(self, trained):
        registry, tk, _ = trained
        layout = tk.codebook.layout
        for code in registry.code_ids()[:20]:
            seq = tok.tokenize(code, tk)
            assert all(t in layout.text_specific for t in seq.group("ts"))
            assert all(t in layout.graph_specific for t in seq.group("gs"))
            assert all(t in layout.shared for t in seq.group("tc"))
            assert all(t in layout.shared for t in seq.group("gc"))

    def test_unknown_code(self, trained):
        _, tk, _ = trained
        with pytest.raises(UnknownCodeError):
            tok.tokenize("ICD9:nope", tk)

    def test_every_registry_code_tokenizable(self, trained):
        registry, tk, _ = trained
        for code in registry.code_ids():
            seq = tok.tokenize(code, tk)
            assert (seq.token_ids < tk.codebook.n).all()

    def test_json_schema(self, trained):
        registry, tk, _ = trained
        doc = tok.tokenize(registry.code_ids()[0], tk).to_json_dict()
        assert set(doc) == {"code_id", "tokens", "weights"}
        assert set(doc["tokens"]) == {
            "text_specific",
            "graph_specific",
            "text_cross",
            "graph_cross",
        }
        assert all(len(v) == tk.k for v in doc["tokens"].values())
        json.dumps(doc)  # serializable


class TestSaveLoad:
    def test_load_matches_frozen(self, trained):
        registry, tk, artifact_dir = trained
        loaded = tok.load_artifact(artifact_dir)
        np.testing.assert_array_equal(loaded.codebook.c, tk.codebook.c)
        for code in registry.code_ids()[:10]:
            a = tok.tokenize(code, tk)
            b = tok.tokenize(code, loaded)
            np.testing.assert_array_equal(a.token_ids, b.token_ids)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_save_load_save_fixed_point(self, trained, tmp_path):
        _, tk, artifact_dir = trained
        loaded = tok.load_artifact(artifact_dir)
        second = tmp_path / "again"
        tok.save_artifact(loaded, second)
        for name in sorted(p.name for p in artifact_dir.iterdir()):
            assert (artifact_dir / name).read_bytes() == (second / name).read_bytes(), name

    def test_tampered_byte_detected(self, trained, tmp_path):
        import shutil

        _, tk, artifact_dir = trained
        rng = np.random.default_rng(3)
        for trial in range(20):
            copy_dir = tmp_path / f"flip{trial}"
            shutil.copytree(artifact_dir, copy_dir)
            victims = sorted(p for p in copy_dir.iterdir())
            victim = victims[int(rng.integers(len(victims)))]
            data = bytearray(victim.read_bytes())
            pos = int(rng.integers(len(data)))
            data[pos] ^= 1 << int(rng.integers(8))
            victim.write_bytes(bytes(data))
            with pytest.raises((CorruptionError, FormatError)):
                tok.load_artifact(copy_dir)

    def test_missing_file_detected(self, trained, tmp_path):
        import shutil

        _, _, artifact_dir = trained
        copy_dir = tmp_path / "missing"
        shutil.copytree(artifact_dir, copy_dir)
        (copy_dir / tok.PARAMS_FILE).unlink()
        with pytest.raises(CorruptionError, match="params.bin"):
            tok.load_artifact(copy_dir)

    def test_newer_version_rejected(self, trained, tmp_path):
        import shutil

        _, _, artifact_dir = trained
        copy_dir = tmp_path / "newer"
        shutil.copytree(artifact_dir, copy_dir)
        manifest = json.loads((copy_dir / tok.MANIFEST_FILE).read_text())
        manifest["version"] = tok.ARTIFACT_VERSION + 1
        (copy_dir / tok.MANIFEST_FILE).write_text(json.dumps(manifest, sort_keys=True))
        with pytest.raises(FormatError, match="newer"):
            tok.load_artifact(copy_dir)

    def test_hash_mismatch_names_file(self, trained, tmp_path):
        import shutil

        _, _, artifact_dir = trained
        copy_dir = tmp_path / "named"
        shutil.copytree(artifact_dir, copy_dir)
        data = bytearray((copy_dir / tok.FUSED_FILE).read_bytes())
        data[-1] ^= 0xFF
        (copy_dir / tok.FUSED_FILE).write_bytes(bytes(data))
        with pytest.raises(CorruptionError, match="fused.mtes"):
            tok.load_artifact(copy_dir)


class TestExportEmbeddings:
    def test_header_and_roundtrip(self, trained, tmp_path):
        _, tk, _ = trained
        path = tmp_path / "tokens.mteb"
        tok.export_token_embeddings(tk, path)
        ids, vectors = textenc.load_pooled(path)
        assert len(ids) == tk.codebook.n
        assert vectors.shape == (tk.codebook.n, tk.codebook.d)
        assert ids[:3] == ["0", "1", "2"]

    def test_rows_equal_codebook_f32(self, trained, tmp_path):
        _, tk, _ = trained
        path = tmp_path / "tokens.mteb"
        tok.export_token_embeddings(tk, path)
        _, vectors = textenc.load_pooled(path)
        np.testing.assert_array_equal(vectors, tk.codebook.c.astype(np.float32))

    def test_export_load_export_bitwise(self, trained, tmp_path):
        _, tk, _ = trained
        p1, p2 = tmp_path / "a.mteb", tmp_path / "b.mteb"
        tok.export_token_embeddings(tk, p1)
        ids, vectors = textenc.load_pooled(p1)
        textenc.save_pooled(p2, ids, vectors)
        assert p1.read_bytes() == p2.read_bytes()


class TestCodebookFormat:
    def test_roundtrip_layout_and_k(self, trained, tmp_path):
        _, tk, artifact_dir = trained
        cb, k = tok.read_codebook(artifact_dir / tok.CODEBOOK_FILE)
        assert k == tk.k
        assert cb.layout == tk.codebook.layout
        np.testing.assert_array_equal(cb.c, tk.codebook.c)

    def test_payload_hash_checked(self, trained, tmp_path):
        import shutil

        _, _, artifact_dir = trained
        target = tmp_path / "cb.mtcb"
        shutil.copy(artifact_dir / tok.CODEBOOK_FILE, target)
        data = bytearray(target.read_bytes())
        data[40] ^= 0x10  # inside the payload
        target.write_bytes(bytes(data))
        with pytest.raises(CorruptionError, match="hash"):
            tok.read_codebook(target)
