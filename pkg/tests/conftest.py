from __future__ import annotations

import numpy as np
import pytest

from multilora.linalg import LoraLayerDelta
from multilora.model import ModelConfig, build_model
from multilora.registry import LoraAdapter

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def assert_bitwise(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    assert a.shape == b.shape, (a.shape, b.shape)
    assert a.dtype == b.dtype == np.float32, (a.dtype, b.dtype)
    assert np.array_equal(a.view(np.uint32), b.view(np.uint32))


def bitwise_equal(a, b) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and np.array_equal(
        a.astype(np.float32).view(np.uint32), b.astype(np.float32).view(np.uint32)
    )


def random_delta(rng, d_out, d_in, rank, *, zero_b=False, amp=1.0, alpha=None):
    a = rng.uniform(-amp, amp, (rank, d_in))
    b = np.zeros((d_out, rank)) if zero_b else rng.uniform(-amp, amp, (d_out, rank))
    if alpha is None:
        alpha = float(rng.uniform(0.25, 2.0 * rank))
    return LoraLayerDelta(a, b, alpha, rank)


def random_adapter(
    rng,
    layer_shapes,
    adapter_id,
    *,
    max_rank=4,
    layers=None,
    zero_b=False,
    amp=1.0,
) -> LoraAdapter:
    """Random heterogeneous-rank adapter over a random non-empty subset of layers."""
    ids = list(layer_shapes)
    if layers is None:
        k = int(rng.integers(1, len(ids) + 1))
        layers = list(rng.choice(ids, size=k, replace=False))
    entries = {}
    for layer_id in layers:
        d_out, d_in = layer_shapes[layer_id]
        top = min(max_rank, d_out, d_in)
        rank = int(rng.integers(1, top + 1))
        entries[layer_id] = random_delta(rng, d_out, d_in, rank, zero_b=zero_b, amp=amp)
    return LoraAdapter(adapter_id, entries)


def random_model_config(rng, max_d=32, max_vocab=24, max_layers=2) -> ModelConfig:
    return ModelConfig(
        vocab=int(rng.integers(2, max_vocab + 1)),
        d_model=int(rng.integers(1, max_d + 1)),
        n_layers=int(rng.integers(1, max_layers + 1)),
        d_ff=int(rng.integers(1, max_d + 1)),
        seed=int(rng.integers(0, 2**63)),
    )


def random_tokens(rng, vocab, max_len=6):
    return [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, max_len + 1)))]


@pytest.fixture
def small_config():
    return ModelConfig(vocab=17, d_model=8, n_layers=2, d_ff=12, seed=42)


@pytest.fixture
def small_model(small_config):
    return build_model(small_config)
