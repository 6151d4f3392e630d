import copy

import numpy as np
import pytest

from medtok import corpus, trainer


@pytest.fixture(scope="session")
def tiny_setup():
    """Small synthetic corpus plus config for fast trainer tests."""
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
        checkpoint_every=10,
    )
    return registry, kg, emb, cfg


@pytest.fixture()
def tiny_state(tiny_setup):
    registry, kg, emb, cfg = tiny_setup
    state = trainer.init_state(registry, kg, emb, cfg)
    prepared = trainer.prepare_codes(registry, kg, emb, state.graph_params, cfg)
    return registry, kg, emb, cfg, state, prepared


def clone_state(state: trainer.TrainState) -> trainer.TrainState:
    return copy.deepcopy(state)


def state_arrays(state: trainer.TrainState) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in trainer.named_params(state).items()}
