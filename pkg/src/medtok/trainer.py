"""End-to-end optimization of graph encoder, fusion, and codebook.

The total objective is the quantization loss plus the cross-modal KL
alignment plus the token packing loss. One Adam step per batch updates
every trainable tensor; text embeddings are inputs and never change.

Determinism: parameter init, per-epoch shuffles, and dead-codeword
reseeds all derive from the run seed through fixed-purpose seed
sequences, so a full run is a pure function of (inputs, config) and a
resumed run replays exactly as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .corpus import CodeRegistry, KnowledgeGraph
from .errors import ConfigError, CorruptionError, NumericError
from .fusion import FusedEmbeddings, FusionParams, fuse, init_fusion_params
from .graphenc import (
    GraphEncoderParams,
    extract_subgraph,
    init_graph_params,
    neighbor_mean_matrix,
)
from .packing import PackingConfig, kl_alignment_loss, token_packing_loss
from .quantizer import (
    GROUP_ORDER,
    Codebook,
    RegionLayout,
    init_codebook,
    quantize_all,
    vq_loss,
)
from .textenc import TextEmbeddingSet

# Seed-sequence domains, so the independent random streams never collide.
_SEED_INIT = 0
_SEED_SHUFFLE = 1
_SEED_RESEED = 2

DEAD_CODEWORD_PATIENCE = 200
TRACE_COLUMNS = ("step", "L_vq", "L_KL", "L_token_c", "L_token_s", "total")


@dataclass
class TrainConfig:
    """All hyperparameters of a run. ``lam`` defaults to ``beta``."""

    codebook_size: int = 512
    dim: int = 32
    graph_dim: int = 32
    topk: int = 4
    alpha: float = 0.25
    beta: float = 0.1
    lam: float | None = None
    tau: float = 0.07
    region_split: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    steps: int = 500
    batch: int = 64
    lr: float = 1e-3
    seed: int = 7
    hops: int = 2
    cap: int = 128
    layers: int = 2
    checkpoint_every: int = 500
    cross_whole_shared: bool = True
    dead_code_patience: int = DEAD_CODEWORD_PATIENCE

    def __post_init__(self):
        if self.lam is None:
            self.lam = self.beta
        for name in ("codebook_size", "dim", "graph_dim", "topk", "steps", "batch", "layers"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0 or self.lr < 0:
            raise ConfigError("alpha and lr must be >= 0")
        self.region_split = tuple(float(f) for f in self.region_split)
        RegionLayout.from_fractions(self.codebook_size, self.region_split)

    def packing(self) -> PackingConfig:
        return PackingConfig(beta=self.beta, lam=self.lam, tau=self.tau)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["region_split"] = list(self.region_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["region_split"] = tuple(d["region_split"])
        return cls(**d)


def preset(name: str, **overrides) -> TrainConfig:
    """Named hyperparameter presets: 'desk' (CPU scale) and 'paper'."""
    if name == "desk":
        base = {}
    elif name == "paper":
        base = dict(
            codebook_size=12_000,
            dim=64,
            graph_dim=64,
            steps=3_000,
            batch=1_024,
        )
    else:
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PreparedCode:
    """Per-code constants cached before the step loop."""

    code_id: str
    type_idx: np.ndarray
    nbr_mean: np.ndarray | None
    x_t: np.ndarray  # (1, d_t)
    text_states: np.ndarray  # (L_t, d_t)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def update(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> dict[str, np.ndarray]:
        """Standard Adam rule (b1=0.9, b2=0.999, eps=1e-8); returns new arrays."""
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        out = {}
        for name in sorted(params):
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            out[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        return out


@dataclass
class TrainState:
    step: int
    codebook: Codebook
    graph_params: GraphEncoderParams
    fusion_params: FusionParams
    adam: AdamState
    unused_steps: np.ndarray  # (codebook_size,) consecutive steps unselected
    trace: list[tuple] = field(default_factory=list)


def _rng(seed: int, domain: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), domain, *map(int, key)]))


def named_params(state: TrainState) -> dict[str, np.ndarray]:
    out = {"codebook.c": state.codebook.c, "graph.type_embed": state.graph_params.type_embed}
    for i, (ws, wn) in enumerate(zip(state.graph_params.w_self, state.graph_params.w_nbr)):
        out[f"graph.w_self.{i}"] = ws
        out[f"graph.w_nbr.{i}"] = wn
    for name in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g"):
        out[f"fusion.{name}"] = getattr(state.fusion_params, name)
    return out


def _apply_params(state: TrainState, params: dict[str, np.ndarray]) -> None:
    state.codebook.c = params["codebook.c"]
    state.graph_params.type_embed = params["graph.type_embed"]
    for i in range(len(state.graph_params.w_self)):
        state.graph_params.w_self[i] = params[f"graph.w_self.{i}"]
        state.graph_params.w_nbr[i] = params[f"graph.w_nbr.{i}"]
    for name in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g"):
        setattr(state.fusion_params, name, params[f"fusion.{name}"])


def prepare_codes(
    registry: CodeRegistry,
    kg: KnowledgeGraph,
    emb: TextEmbeddingSet,
    graph_params: GraphEncoderParams,
    cfg: TrainConfig,
) -> dict[str, PreparedCode]:
    """Extract and cache the fixed per-code inputs."""
    missing = [c for c in registry.code_ids() if c not in emb.pooled]
    if missing:
        raise ConfigError(
            f"{len(missing)} codes lack text embeddings (first: {missing[0]!r})"
        )
    prepared = {}
    for code_id in registry.code_ids():
        code = registry[code_id]
        g = extract_subgraph(code, kg, cfg.hops, cfg.cap)
        type_idx = np.array(
            [graph_params.type_index(t) for t in g.node_types], dtype=np.int64
        )
        nbr = neighbor_mean_matrix(g) if len(g) > 1 else None
        prepared[code_id] = PreparedCode(
            code_id=code_id,
            type_idx=type_idx,
            nbr_mean=nbr,
            x_t=emb.pooled[code_id].reshape(1, -1),
            text_states=emb.states_or_pooled(code_id),
        )
    return prepared


def init_state(
    registry: CodeRegistry, kg: KnowledgeGraph, emb: TextEmbeddingSet, cfg: TrainConfig
) -> TrainState:
    rng = _rng(cfg.seed, _SEED_INIT)
    codebook = init_codebook(cfg.codebook_size, cfg.dim, rng, cfg.region_split)
    graph_params = init_graph_params(
        sorted(set(kg.nodes.values())), cfg.graph_dim, cfg.layers, rng
    )
    fusion_params = init_fusion_params(cfg.dim, emb.d_t, cfg.graph_dim, rng)
    state = TrainState(
        step=0,
        codebook=codebook,
        graph_params=graph_params,
        fusion_params=fusion_params,
        adam=None,  # type: ignore[arg-type]
        unused_steps=np.zeros(cfg.codebook_size, dtype=np.int64),
    )
    state.adam = AdamState.fresh(named_params(state))
    return state


def _node_views(state: TrainState) -> tuple[dict, GraphEncoderParams, FusionParams, Codebook]:
    """Wrap every parameter tensor in a leaf node shared across the batch."""
    leaves = {name: nc.leaf(arr) for name, arr in named_params(state).items()}
    gp = state.graph_params
    graph_view = GraphEncoderParams(
        gp.type_vocab,
        leaves["graph.type_embed"],
        [leaves[f"graph.w_self.{i}"] for i in range(gp.layers)],
        [leaves[f"graph.w_nbr.{i}"] for i in range(gp.layers)],
    )
    fusion_view = FusionParams(
        **{k: leaves[f"fusion.{k}"] for k in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g")},
        d=state.fusion_params.d,
    )
    cb_view = Codebook(leaves["codebook.c"], state.codebook.layout)
    return leaves, graph_view, fusion_view, cb_view


def _encode_prepared(pc: PreparedCode, graph_view: GraphEncoderParams):
    """Forward pass of the graph encoder with cached structure."""
    h = nc.gather_rows(graph_view.type_embed, pc.type_idx)
    for ws, wn in zip(graph_view.w_self, graph_view.w_nbr):
        self_term = nc.matmul(h, nc.transpose(ws))
        if pc.nbr_mean is not None:
            nbr_term = nc.matmul(nc.matmul(nc.constant(pc.nbr_mean), h), nc.transpose(wn))
            h = nc.relu(nc.add(self_term, nbr_term))
        else:
            h = nc.relu(self_term)
    return nc.mean_rows(h), h


def code_forward(
    pc: PreparedCode, graph_view: GraphEncoderParams, fusion_view: FusionParams
) -> FusedEmbeddings:
    """Encode and fuse one code under the given parameter views."""
    x_g, node_states = _encode_prepared(pc, graph_view)
    return fuse(
        nc.constant(pc.text_states), node_states, nc.constant(pc.x_t), x_g, fusion_view
    )


def _named_stage(name: str, step: int, thunk):
    """Attribute any numeric failure to the stage that produced it."""
    try:
        return thunk()
    except NumericError as exc:
        raise NumericError(f"{name} failed at step {step}: {exc}") from exc


def train_step(
    batch_codes: list[PreparedCode], state: TrainState, cfg: TrainConfig
) -> tuple[TrainState, dict[str, float]]:
    """One forward/backward/update over a batch; returns loss components."""
    if not batch_codes:
        raise ConfigError("train_step: empty batch")
    leaves, graph_view, fusion_view, cb_view = _node_views(state)

    per_group_fused = {g: [] for g in GROUP_ORDER}
    per_group_hat = {g: [] for g in GROUP_ORDER}
    per_group_raw = {g: [] for g in GROUP_ORDER}
    used_ids: list[np.ndarray] = []

    def forward_all():
        for pc in batch_codes:
            fused = code_forward(pc, graph_view, fusion_view)
            bundle = quantize_all(fused, cb_view, cfg.topk, cfg.cross_whole_shared)
            for g, e_node in fused.groups().items():
                per_group_fused[g].append(e_node)
            for g, group in bundle.groups().items():
                per_group_hat[g].append(group.e_hat_node)
                per_group_raw[g].append(group.e_hat_raw_node)
                used_ids.append(group.token_ids)

    _named_stage("forward pass (encode/fuse/quantize)", state.step, forward_all)

    b = len(batch_codes)
    fused_stack = FusedEmbeddings(
        **{
            {"ts": "e_t_s", "gs": "e_g_s", "tc": "e_t_c", "gc": "e_g_c"}[g]: nc.vstack(
                per_group_fused[g]
            )
            for g in GROUP_ORDER
        }
    )
    hat_stack = {g: nc.vstack(per_group_hat[g]) for g in GROUP_ORDER}
    raw_stack = {g: nc.vstack(per_group_raw[g]) for g in GROUP_ORDER}

    l_vq = _named_stage(
        "L_vq",
        state.step,
        lambda: nc.scale(
            vq_loss(
                [(fused_stack.groups()[g], raw_stack[g]) for g in GROUP_ORDER],
                cfg.alpha,
            ),
            1.0 / b,
        ),
    )
    l_kl = _named_stage(
        "L_KL",
        state.step,
        lambda: kl_alignment_loss(fused_stack.e_t_c, fused_stack.e_g_c, cb_view),
    )
    l_token_c, l_token_s, l_token = _named_stage(
        "L_token",
        state.step,
        lambda: token_packing_loss(fused_stack, hat_stack, cfg.packing()),
    )
    total = nc.add(nc.add(l_vq, l_kl), l_token)

    losses = {
        "L_vq": nc.scalar(l_vq),
        "L_KL": nc.scalar(l_kl),
        "L_token_c": nc.scalar(l_token_c),
        "L_token_s": nc.scalar(l_token_s),
        "total": nc.scalar(total),
    }
    for name, value in losses.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite {name} at step {state.step}")

    total.backward()

    params = named_params(state)
    grads = {}
    for name, leaf_node in leaves.items():
        g = leaf_node.grad
        if g is None:
            g = np.zeros_like(params[name])
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
        grads[name] = g
    _apply_params(state, state.adam.update(params, grads, cfg.lr))

    _refresh_dead_codewords(state, cfg, fused_stack, used_ids)
    state.trace.append(
        (state.step, losses["L_vq"], losses["L_KL"], losses["L_token_c"], losses["L_token_s"], losses["total"])
    )
    state.step += 1
    return state, losses


def _refresh_dead_codewords(
    state: TrainState, cfg: TrainConfig, fused_stack: FusedEmbeddings, used_ids: list[np.ndarray]
) -> None:
    """Re-seed codewords unselected for cfg.dead_code_patience steps."""
    state.unused_steps += 1
    if used_ids:
        used = np.unique(np.concatenate(used_ids))
        state.unused_steps[used] = 0
    if cfg.dead_code_patience <= 0:
        return
    dead = np.flatnonzero(state.unused_steps >= cfg.dead_code_patience)
    if dead.size == 0:
        return
    rng = _rng(cfg.seed, _SEED_RESEED, state.step)
    layout = state.codebook.layout
    sources = {
        "ts": fused_stack.e_t_s.value,
        "gs": fused_stack.e_g_s.value,
        "tc": fused_stack.e_t_c.value,
        "gc": fused_stack.e_g_c.value,
    }
    region_source = [
        (layout.text_specific, sources["ts"]),
        (layout.graph_specific, sources["gs"]),
        (layout.text_shared, sources["tc"]),
        (layout.graph_shared, sources["gc"]),
    ]
    for row in dead:
        for region, src in region_source:
            if row in region:
                pick = int(rng.integers(0, src.shape[0]))
                state.codebook.c[row] = src[pick]
                break
        state.unused_steps[row] = 0


def _batch_starts(n: int, batch: int) -> list[tuple[int, int]]:
    """Consecutive chunks; a trailing single element folds into the previous."""
    spans = [(lo, min(lo + batch, n)) for lo in range(0, n, batch)]
    if len(spans) > 1 and spans[-1][1] - spans[-1][0] < 2:
        lo, _ = spans.pop()
        spans[-1] = (spans[-1][0], n)
    return spans


def batch_for_step(
    step: int, code_ids: list[str], cfg: TrainConfig
) -> list[str]:
    """The deterministic batch for a global step index."""
    n = len(code_ids)
    spans = _batch_starts(n, cfg.batch)
    epoch, idx = divmod(step, len(spans))
    perm = _rng(cfg.seed, _SEED_SHUFFLE, epoch).permutation(n)
    lo, hi = spans[idx]
    return [code_ids[i] for i in perm[lo:hi]]


def train(
    registry: CodeRegistry,
    kg: KnowledgeGraph,
    emb: TextEmbeddingSet,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    log_every: int = 0,
):
    """Run the configured number of steps and freeze the artifact.

    Writes checkpoints every ``cfg.checkpoint_every`` steps and, when
    ``out_dir`` is given, the final artifact plus the loss trace (CSV
    and rendered figures). Returns the frozen TrainedTokenizer.
    """
    from . import report
    from .tokenizer import freeze_tokenizer, save_artifact

    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        state = load_checkpoint(resume, cfg)
    else:
        state = init_state(registry, kg, emb, cfg)
    prepared = prepare_codes(registry, kg, emb, state.graph_params, cfg)
    code_ids = registry.code_ids()

    while state.step < cfg.steps:
        batch_ids = batch_for_step(state.step, code_ids, cfg)
        state, losses = train_step([prepared[c] for c in batch_ids], state, cfg)
        if log_every and state.step % log_every == 0:
            print(
                f"step {state.step}/{cfg.steps} "
                + " ".join(f"{k}={v:.4f}" for k, v in losses.items())
            )
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / "checkpoints" / f"step_{state.step:06d}", state, cfg)

    tokenizer = freeze_tokenizer(state, registry, prepared, cfg)
    if out_dir is not None:
        save_artifact(tokenizer, out_dir / "artifact")
        trace_path = write_trace(out_dir / "loss_trace.csv", state.trace)
        report.render_loss_figures(trace_path, out_dir)
    return tokenizer


def write_trace(path: Path, trace: list[tuple]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
    return path


def _array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_checkpoint(ckpt_dir: str | Path, state: TrainState, cfg: TrainConfig) -> Path:
    """Full training state: parameters, optimizer, counters, trace."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = named_params(state)
    arrays = dict(params)
    for name, m in state.adam.m.items():
        arrays[f"adam.m.{name}"] = m
    for name, v in state.adam.v.items():
        arrays[f"adam.v.{name}"] = v
    arrays["unused_steps"] = state.unused_steps
    arrays["trace"] = np.array(state.trace, dtype=np.float64).reshape(len(state.trace), 6)
    np.savez(ckpt_dir / "state.npz", **arrays)
    manifest = {
        "step": state.step,
        "adam_t": state.adam.t,
        "config": cfg.to_dict(),
        "type_vocab": state.graph_params.type_vocab,
        "digests": {name: _array_digest(a) for name, a in sorted(arrays.items())},
    }
    (ckpt_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path, cfg: TrainConfig) -> TrainState:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text(encoding="utf-8"))
    # steps and checkpoint cadence are stop conditions, not dynamics:
    # resuming to a later step count is the intended use.
    def dynamics(d: dict) -> dict:
        return {k: v for k, v in d.items() if k not in ("steps", "checkpoint_every")}

    if dynamics(manifest["config"]) != dynamics(cfg.to_dict()):
        raise ConfigError("checkpoint was written under a different configuration")
    with np.load(ckpt_dir / "state.npz") as data:
        arrays = {name: data[name] for name in data.files}
    for name, digest in manifest["digests"].items():
        if _array_digest(arrays[name]) != digest:
            raise CorruptionError(f"checkpoint digest mismatch for {name!r}")

    layout = RegionLayout.from_fractions(cfg.codebook_size, cfg.region_split)
    vocab = list(manifest["type_vocab"])
    graph_params = GraphEncoderParams(
        vocab,
        arrays["graph.type_embed"],
        [arrays[f"graph.w_self.{i}"] for i in range(cfg.layers)],
        [arrays[f"graph.w_nbr.{i}"] for i in range(cfg.layers)],
    )
    fusion_params = FusionParams(
        **{k: arrays[f"fusion.{k}"] for k in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g")},
        d=cfg.dim,
    )
    codebook = Codebook(arrays["codebook.c"], layout)
    state = TrainState(
        step=manifest["step"],
        codebook=codebook,
        graph_params=graph_params,
        fusion_params=fusion_params,
        adam=None,  # type: ignore[arg-type]
        unused_steps=arrays["unused_steps"],
        trace=[tuple(row) for row in arrays["trace"]],
    )
    names = named_params(state)
    state.adam = AdamState(
        m={name: arrays[f"adam.m.{name}"] for name in names},
        v={name: arrays[f"adam.v.{name}"] for name in names},
        t=manifest["adam_t"],
    )
    return state
