"""Command-line interface.

Subcommands: validate, subgraph, gen-synthetic, fetch-embeddings,
train, tokenize, tokenize-batch, export-embeddings, inspect, report.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus, textenc, tokenizer as tok, trainer
from .errors import MedtokError
from .graphenc import extract_subgraph

UNMAPPED_PREVIEW = 20


def _load_corpus(args):
    registry = corpus.load_codes(args.codes)
    kg = corpus.load_kg(args.kg_nodes, args.kg_edges)
    registry, unmapped = corpus.load_mapping(args.map, registry, kg)
    return registry, kg, unmapped


def cmd_validate(args) -> int:
    registry, kg, unmapped = _load_corpus(args)
    counts = registry.per_system_counts()
    print(f"codes: {len(registry)}")
    for system in sorted(counts):
        print(f"  {system}: {counts[system]}")
    print(f"kg nodes: {len(kg.nodes)}")
    print(f"kg edges: {len(kg.edges)}")
    print(f"mapped codes: {len(registry) - len(unmapped)}")
    print(f"unmapped codes: {len(unmapped)}")
    for code_id in unmapped[:UNMAPPED_PREVIEW]:
        print(f"  unmapped: {code_id}")
    if len(unmapped) > UNMAPPED_PREVIEW:
        print(f"  ... and {len(unmapped) - UNMAPPED_PREVIEW} more")
    return 0


def cmd_subgraph(args) -> int:
    registry, kg, _ = _load_corpus(args)
    if args.code not in registry:
        print(f"error: unknown code {args.code!r}", file=sys.stderr)
        return 2
    g = extract_subgraph(registry[args.code], kg, hops=args.hops, cap=args.cap)
    print(f"code: {args.code}")
    print(f"centers: {' '.join(g.center_ids) if g.center_ids else '(none; null subgraph)'}")
    print(f"nodes ({len(g.node_ids)}):")
    for node_id, node_type in zip(g.node_ids, g.node_types):
        print(f"  {node_id}\t{node_type}")
    print(f"edges ({len(g.edges)}):")
    for i, j in g.edges:
        print(f"  {g.node_ids[i]}\t{g.node_ids[j]}")
    return 0


def cmd_gen_synthetic(args) -> int:
    registry, kg, emb = corpus.gen_synthetic(
        args.families, args.codes_per_family, args.seed, d_t=args.text_dim
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "codes.jsonl").open("w", encoding="utf-8") as fh:
        for code in registry.codes.values():
            fh.write(
                json.dumps(
                    {
                        "code_id": code.code_id,
                        "system": code.system.value,
                        "description": code.description,
                    }
                )
                + "\n"
            )
    with (out / "kg_nodes.tsv").open("w", encoding="utf-8") as fh:
        for node_id, node_type in kg.nodes.items():
            fh.write(f"{node_id}\t{node_type}\n")
    with (out / "kg_edges.tsv").open("w", encoding="utf-8") as fh:
        for h, r, t in kg.edges:
            fh.write(f"{h}\t{r}\t{t}\n")
    with (out / "mapping.tsv").open("w", encoding="utf-8") as fh:
        for code in registry.codes.values():
            for node in code.kg_nodes:
                fh.write(f"{code.code_id}\t{node}\n")
    textenc.save_text_embeddings(emb, out / "text_pooled.mteb", out / "text_states.mtes")
    print(f"wrote synthetic corpus ({len(registry)} codes) to {out}")
    return 0


def cmd_fetch_embeddings(args) -> int:
    registry = corpus.load_codes(args.codes)
    client = textenc.RemoteEmbeddingClient(args.endpoint, timeout=args.timeout)
    ids = registry.code_ids()
    pooled_rows = []
    states: dict[str, np.ndarray] = {}
    for lo in range(0, len(ids), args.batch):
        chunk = ids[lo : lo + args.batch]
        vectors, chunk_states = client.fetch([registry[c].description for c in chunk])
        pooled_rows.append(vectors)
        if chunk_states is not None:
            for code_id, s in zip(chunk, chunk_states):
                states[code_id] = s
    pooled = np.vstack(pooled_rows) if pooled_rows else np.zeros((0, 0))
    textenc.save_pooled(args.out, ids, pooled.astype(np.float32))
    print(f"wrote {len(ids)} pooled embeddings (dim {pooled.shape[1]}) to {args.out}")
    if args.states_out and states:
        textenc.save_states(args.states_out, states, pooled.shape[1])
        print(f"wrote per-token states for {len(states)} codes to {args.states_out}")
    return 0


def cmd_train(args) -> int:
    registry, kg, unmapped = _load_corpus(args)
    emb = textenc.load_text_embeddings(args.text_emb, args.text_states)
    overrides = {}
    for flag, name in [
        ("codebook_size", "codebook_size"),
        ("dim", "dim"),
        ("graph_dim", "graph_dim"),
        ("topk", "topk"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("lambda_", "lam"),
        ("tau", "tau"),
        ("steps", "steps"),
        ("batch", "batch"),
        ("lr", "lr"),
        ("seed", "seed"),
        ("hops", "hops"),
        ("cap", "cap"),
        ("checkpoint_every", "checkpoint_every"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            overrides[name] = value
    if args.region_split is not None:
        overrides["region_split"] = tuple(float(x) for x in args.region_split.split(","))
    cfg = trainer.preset(args.preset, **overrides)
    if unmapped:
        print(f"note: {len(unmapped)} codes have no KG mapping (null subgraph)")
    trainer.train(
        registry, kg, emb, cfg, out_dir=args.out, resume=args.resume, log_every=args.log_every
    )
    print(f"artifact written to {Path(args.out) / 'artifact'}")
    print(f"loss trace written to {Path(args.out) / 'loss_trace.csv'}")
    return 0


def cmd_tokenize(args) -> int:
    tk = tok.load_artifact(args.artifact)
    seq = tok.tokenize(args.code, tk)
    if args.json:
        print(json.dumps(seq.to_json_dict(), sort_keys=True))
    else:
        print(f"code: {seq.code_id}")
        for group in tok.GROUP_ORDER:
            name = tok.GROUP_JSON_NAMES[group]
            ids = " ".join(str(t) for t in seq.group(group))
            weights = " ".join(f"{w:.4f}" for w in seq.group_weights(group))
            print(f"  {name}: ids [{ids}] weights [{weights}]")
    return 0


def cmd_tokenize_batch(args) -> int:
    tk = tok.load_artifact(args.artifact)
    codes = [
        line.strip()
        for line in Path(args.codes_file).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for code_id in codes:
            seq = tok.tokenize(code_id, tk)
            fh.write(json.dumps(seq.to_json_dict(), sort_keys=True) + "\n")
    print(f"tokenized {len(codes)} codes to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    tk = tok.load_artifact(args.artifact)
    tok.export_token_embeddings(tk, args.out)
    print(f"wrote {tk.codebook.n} x {tk.codebook.d} token embedding table to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    tk = tok.load_artifact(args.artifact)
    layout = tk.codebook.layout
    print(f"codebook size: {tk.codebook.n}")
    print(f"dimension: {tk.codebook.d}")
    print(f"top-K: {tk.k}")
    print(
        "regions: "
        f"text_specific [{layout.text_specific.start}, {layout.text_specific.stop}) "
        f"graph_specific [{layout.graph_specific.start}, {layout.graph_specific.stop}) "
        f"text_shared [{layout.text_shared.start}, {layout.text_shared.stop}) "
        f"graph_shared [{layout.graph_shared.start}, {layout.graph_shared.stop})"
    )
    print(f"corpus size: {len(tk.fused_cache)}")
    print(f"token sequence length: {4 * tk.k}")
    return 0


def cmd_report(args) -> int:
    from . import report  # matplotlib import deferred off the hot CLI paths

    written = report.render_loss_figures(args.trace, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--codes", required=True, help="line-delimited codes file")
    p.add_argument("--kg-nodes", required=True, help="tab-separated node file")
    p.add_argument("--kg-edges", required=True, help="tab-separated edge file")
    p.add_argument("--map", required=True, help="tab-separated code-to-node mapping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medtok", description="Multimodal medical code tokenizer"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate corpus files and print counts")
    _add_corpus_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("subgraph", help="print the extracted subgraph for a code")
    _add_corpus_args(p)
    p.add_argument("--code", required=True)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--cap", type=int, default=128)
    p.set_defaults(func=cmd_subgraph)

    p = sub.add_parser("gen-synthetic", help="write a synthetic desk-scale corpus")
    p.add_argument("--families", type=int, default=4)
    p.add_argument("--codes-per-family", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--text-dim", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("fetch-embeddings", help="fetch frozen text embeddings over HTTP")
    p.add_argument("--codes", required=True)
    p.add_argument("--endpoint", default=None, help=f"default: ${textenc.ENDPOINT_ENV_VAR}")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--states-out", default=None)
    p.set_defaults(func=cmd_fetch_embeddings)

    p = sub.add_parser("train", help="train a tokenizer and freeze the artifact")
    _add_corpus_args(p)
    p.add_argument("--text-emb", required=True, help="pooled text embedding file")
    p.add_argument("--text-states", default=None, help="per-token text state file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--codebook-size", type=int, dest="codebook_size", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--graph-dim", type=int, dest="graph_dim", default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lambda", type=float, dest="lambda_", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hops", type=int, default=None)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every", default=None)
    p.add_argument("--region-split", default=None, help="four comma-separated fractions")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tokenize", help="tokenize one code against a frozen artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("tokenize-batch", help="tokenize a file of code ids to JSONL")
    p.add_argument("--artifact", required=True)
    p.add_argument("--codes-file", required=True, help="one code id per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize_batch)

    p = sub.add_parser("export-embeddings", help="export the codeword table")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("inspect", help="print artifact summary")
    p.add_argument("--artifact", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render loss figures from a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MedtokError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
