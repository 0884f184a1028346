"""A tiny deterministic transformer with named LoRA attach points.

Single-head causal attention, ReLU MLP, no norms, no biases, untied
embedding and unembedding. Every weight is stored as a ``d_out x d_in``
matrix keyed by layer id:

* ``L{i}.wq``, ``L{i}.wk``, ``L{i}.wv``, ``L{i}.wo``  (d_model x d_model)
* ``L{i}.wup`` (d_ff x d_model), ``L{i}.wdown`` (d_model x d_ff)
* ``emb`` (d_model x vocab): the embedding table viewed as a map from
  one-hot token vectors, so ``model.embedding`` is its transpose
* ``unemb`` (vocab x d_model)

The forward pass is written against a ``project(layer_id, rows)`` callback
so the serving engine can swap in merged weights, a single installed
adapter, or a routed batch without touching the model code.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import DomainError, RankOverflowError, TokenOutOfVocabError, ValidationError
from .linalg import F32, F64, LoraLayerDelta, accumulate, as_matrix, lora_forward_rows
from .registry import LoraAdapter

SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)

Project = Callable[[str, np.ndarray], np.ndarray]


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 seeded with ``seed`` (uint64)."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + SPLITMIX_GAMMA * np.arange(
            1, n + 1, dtype=np.uint64
        )
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def uniform_weights(seed: int, n: int) -> np.ndarray:
    """``u * 0.2 - 0.1`` with ``u`` the 53-bit uniform of each splitmix64 output."""
    u = (splitmix64(seed, n) >> np.uint64(11)).astype(F64) * (1.0 / (1 << 53))
    return (u * 0.2 - 0.1).astype(F32)


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    d_model: int
    n_layers: int
    d_ff: int
    seed: int = 0

    KEYS = ("vocab", "d_model", "n_layers", "d_ff", "seed")

    def __post_init__(self):
        for name in ("vocab", "d_model", "n_layers", "d_ff"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise DomainError(f"{name} must be an integer >= 1, got {value!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not (
            0 <= self.seed < 1 << 64
        ):
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ModelConfig":
        unknown = set(data) - set(cls.KEYS)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"vocab", "d_model", "n_layers", "d_ff"} - set(data)
        if missing:
            raise ValidationError(f"missing model config keys: {sorted(missing)}")
        return cls(**{k: data[k] for k in cls.KEYS if k in data})

    @classmethod
    def load(cls, path) -> "ModelConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: expected key-value pairs")
        return cls.from_mapping(data)

    def dump(self) -> str:
        return "".join(f"{k}: {getattr(self, k)}\n" for k in self.KEYS)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Canonical layer ids, bytewise sorted, to ``(d_out, d_in)``."""
        d, f, v = self.d_model, self.d_ff, self.vocab
        shapes = {"emb": (d, v), "unemb": (v, d)}
        for i in range(self.n_layers):
            shapes[f"L{i}.wq"] = (d, d)
            shapes[f"L{i}.wk"] = (d, d)
            shapes[f"L{i}.wv"] = (d, d)
            shapes[f"L{i}.wo"] = (d, d)
            shapes[f"L{i}.wup"] = (f, d)
            shapes[f"L{i}.wdown"] = (d, f)
        return dict(sorted(shapes.items(), key=lambda kv: kv[0].encode()))


class ToyModel:
    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        shapes = config.layer_shapes()
        if set(weights) != set(shapes):
            raise ValidationError("weights do not cover exactly the canonical layer ids")
        self.config = config
        self.weights: dict[str, np.ndarray] = {}
        for layer_id, shape in shapes.items():
            w = as_matrix(weights[layer_id], layer_id)
            if w.shape != shape:
                raise ValidationError(f"{layer_id}: expected shape {shape}, got {w.shape}")
            self.weights[layer_id] = w

    @property
    def layer_ids(self) -> list[str]:
        return list(self.weights)

    @property
    def embedding(self) -> np.ndarray:
        """The ``vocab x d_model`` lookup table."""
        return self.weights["emb"].T

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {k: w.shape for k, w in self.weights.items()}


def build_model(config: ModelConfig) -> ToyModel:
    """Initialise every matrix from one splitmix64 stream.

    Matrices are visited in canonical (bytewise sorted) layer-id order and
    filled row-major; the embedding is filled as its ``vocab x d_model``
    table.
    """
    shapes = config.layer_shapes()
    stored = {k: (s[1], s[0]) if k == "emb" else s for k, s in shapes.items()}
    total = sum(r * c for r, c in stored.values())
    values = uniform_weights(config.seed, total)
    weights, pos = {}, 0
    for layer_id, (rows, cols) in stored.items():
        block = values[pos : pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        weights[layer_id] = block.T if layer_id == "emb" else block
    return ToyModel(config, weights)


# -- forward ----------------------------------------------------------------------


def check_tokens(tokens: Sequence[int], vocab: int) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim != 1 or toks.size == 0:
        raise ValidationError("tokens must be a non-empty list of token ids")
    if not np.issubdtype(toks.dtype, np.integer):
        raise ValidationError("token ids must be integers")
    bad = (toks < 0) | (toks >= vocab)
    if bad.any():
        raise TokenOutOfVocabError(f"token {int(toks[bad][0])} outside vocab of size {vocab}")
    return toks.astype(np.int64)


def one_hot(tokens: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros((len(tokens), vocab), dtype=F32)
    out[np.arange(len(tokens)), tokens] = 1.0
    return out


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    s = scores.astype(F64)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)).astype(F32)


def _causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, d_model: int) -> np.ndarray:
    n = q.shape[0]
    scores = accumulate(q, k.T) / math.sqrt(d_model)
    scores[np.triu_indices(n, 1)] = -np.inf
    probs = _softmax_rows(scores)
    return accumulate(probs, v).astype(F32)


def forward_rows(
    model: ToyModel, sequences: Sequence[Sequence[int]], project: Project
) -> list[np.ndarray]:
    """Run several token sequences together; returns logits per sequence.

    All positions of all sequences are stacked into one row block so each
    weight is applied once per layer. Attention stays within a sequence.
    """
    cfg = model.config
    toks = [check_tokens(s, cfg.vocab) for s in sequences]
    if not toks:
        return []
    bounds = np.cumsum([0] + [len(t) for t in toks])
    h = project("emb", one_hot(np.concatenate(toks), cfg.vocab))
    for i in range(cfg.n_layers):
        q = project(f"L{i}.wq", h)
        k = project(f"L{i}.wk", h)
        v = project(f"L{i}.wv", h)
        attn = np.concatenate(
            [
                _causal_attention(q[lo:hi], k[lo:hi], v[lo:hi], cfg.d_model)
                for lo, hi in zip(bounds[:-1], bounds[1:])
            ]
        )
        h = (h + project(f"L{i}.wo", attn)).astype(F32)
        up = np.maximum(project(f"L{i}.wup", h), F32(0))
        h = (h + project(f"L{i}.wdown", up)).astype(F32)
    logits = project("unemb", h)
    return [logits[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def delta_projector(model: ToyModel, deltas: Mapping[str, LoraLayerDelta]) -> Project:
    """Base weights with an explicit LoRA pathway on the given layers."""

    def project(layer_id: str, rows: np.ndarray) -> np.ndarray:
        return lora_forward_rows(rows, model.weights[layer_id], deltas.get(layer_id))

    return project


def model_forward(
    model: ToyModel,
    tokens: Sequence[int],
    adapters: Mapping[str, LoraAdapter] | None = None,
    choice: str | None = None,
) -> np.ndarray:
    """Logits (``len(tokens) x vocab``) with adapter ``choice`` on its layers.

    ``adapters`` is the attached set; only the chosen one takes effect.
    """
    deltas: Mapping[str, LoraLayerDelta] = {}
    if choice is not None:
        if not adapters or choice not in adapters:
            raise ValidationError(f"adapter {choice!r} is not attached")
        adapter = adapters[choice]
        unknown = set(adapter.entries) - set(model.weights)
        if unknown:
            raise ValidationError(f"adapter {choice!r} targets unknown layers {sorted(unknown)}")
        deltas = adapter.entries
    return forward_rows(model, [tokens], delta_projector(model, deltas))[0]


# -- placement ---------------------------------------------------------------------


class Target(enum.Enum):
    ATTENTION_QKV = "qkv"
    ATTENTION_OUT = "attn_out"
    EMBEDDING = "embedding"
    UNEMBEDDING = "unembedding"
    MLP = "mlp"


_ALIASES = {
    "attention": {Target.ATTENTION_QKV, Target.ATTENTION_OUT},
    "attn": {Target.ATTENTION_QKV, Target.ATTENTION_OUT},
    "all": set(Target),
    **{t.value: {t} for t in Target},
}


@dataclass(frozen=True)
class Placement:
    targets: frozenset[Target]
    shared_b: bool = False

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))
        if not self.targets:
            raise ValidationError("placement must name at least one target")
        if self.shared_b and Target.ATTENTION_QKV not in self.targets:
            raise ValidationError("shared_b requires the qkv target")

    @classmethod
    def parse(cls, text: str, shared_b: bool = False) -> "Placement":
        """Comma-separated targets: attention, qkv, attn_out, embedding, unembedding, mlp, all."""
        targets: set[Target] = set()
        for word in text.split(","):
            word = word.strip().lower()
            if word not in _ALIASES:
                raise ValidationError(f"unknown placement target {word!r}")
            targets |= _ALIASES[word]
        return cls(frozenset(targets), shared_b)

    def layer_ids(self, n_layers: int) -> list[str]:
        ids = []
        if Target.EMBEDDING in self.targets:
            ids.append("emb")
        if Target.UNEMBEDDING in self.targets:
            ids.append("unemb")
        for i in range(n_layers):
            if Target.ATTENTION_QKV in self.targets:
                ids += [f"L{i}.wq", f"L{i}.wk", f"L{i}.wv"]
            if Target.ATTENTION_OUT in self.targets:
                ids.append(f"L{i}.wo")
            if Target.MLP in self.targets:
                ids += [f"L{i}.wup", f"L{i}.wdown"]
        return sorted(ids, key=str.encode)


def memory_footprint(placement: Placement, rank: int, config: ModelConfig) -> int:
    """Adapter parameter count; shared-B counts the q/k/v B factor once per layer."""
    if isinstance(rank, bool) or not isinstance(rank, int) or rank < 1:
        raise DomainError(f"rank must be >= 1, got {rank!r}")
    shapes = config.layer_shapes()
    total = 0
    for layer_id in placement.layer_ids(config.n_layers):
        d_out, d_in = shapes[layer_id]
        total += rank * d_in
        shared = placement.shared_b and layer_id.endswith((".wk", ".wv"))
        if not shared:
            total += rank * d_out
    return total


def attach_placement(
    model: ToyModel,
    placement: Placement,
    rank: int,
    alpha: float,
    *,
    adapter_id: str = "adapter",
    seed: int = 0,
    zero_b: bool = False,
) -> LoraAdapter:
    """Build an adapter covering exactly the placement's layers.

    A and B are drawn from the splitmix64 stream of ``seed`` (same value
    mapping as the base weights). With ``shared_b`` the q/k/v deltas of a
    layer hold the same B array object.
    """
    shapes = model.layer_shapes()
    layer_ids = placement.layer_ids(model.config.n_layers)
    if isinstance(rank, bool) or not isinstance(rank, int) or rank < 1:
        raise DomainError(f"rank must be >= 1, got {rank!r}")
    for layer_id in layer_ids:
        d_out, d_in = shapes[layer_id]
        if rank > min(d_out, d_in):
            raise RankOverflowError(
                f"rank {rank} exceeds min dims of {layer_id} ({d_out}x{d_in})"
            )

    sizes = []
    for layer_id in layer_ids:
        d_out, d_in = shapes[layer_id]
        shared = placement.shared_b and layer_id.endswith((".wk", ".wv"))
        sizes.append((rank * d_in, 0 if shared else d_out * rank))
    stream = uniform_weights(seed, sum(a + b for a, b in sizes))

    # wq is drawn before wk/wv of its layer and owns the shared B factor.
    order = sorted(range(len(layer_ids)), key=lambda j: _draw_key(layer_ids[j]))
    entries: dict[str, LoraLayerDelta] = {}
    shared_bs: dict[str, np.ndarray] = {}
    pos = 0
    for j in order:
        layer_id = layer_ids[j]
        d_out, d_in = shapes[layer_id]
        n_a, n_b = sizes[j]
        a = stream[pos : pos + n_a].reshape(rank, d_in)
        pos += n_a
        if n_b:
            b = stream[pos : pos + n_b].reshape(d_out, rank)
            pos += n_b
            b = as_matrix(np.zeros_like(b) if zero_b else b, "B")
            if placement.shared_b and layer_id.endswith(".wq"):
                shared_bs[layer_id.rpartition(".")[0]] = b
        else:
            b = shared_bs[layer_id.rpartition(".")[0]]
        entries[layer_id] = LoraLayerDelta(a, b, alpha, rank)
    return LoraAdapter(adapter_id, entries)


def _draw_key(layer_id: str) -> tuple:
    prefix, _, name = layer_id.rpartition(".")
    return (prefix.encode(), 0 if name == "wq" else 1, layer_id.encode())

