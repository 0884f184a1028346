"""Multi-adapter serving over one base model.

The bank keeps, for every base layer, one stacked A tensor
``(n_slots, r_max, d_in)`` and one stacked B tensor ``(n_slots, d_out, r_max)``.
Adapters of lower rank are zero-padded to ``r_max``. A request batch is
routed with a one-hot mask of shape ``(batch, n_slots)``; an all-zero row
means the base model alone.

Three ways of serving the same adapters are provided and are expected to
agree numerically:

* ``MERGED``  - fold ``scale * B @ A`` into a cached copy of each weight
* ``SWAP``    - one adapter at a time on an explicit delta pathway
* ``BATCHED`` - mixed adapters in one pass through the stacked bank
"""

from __future__ import annotations

import enum
import heapq
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityExhaustedError,
    DomainError,
    DuplicateIdError,
    InvalidMaskError,
    LayerMismatchError,
    MixedBatchError,
    RankOverflowError,
    ShapeError,
    UnknownAdapterError,
)
from .linalg import (
    F32,
    F64,
    LoraLayerDelta,
    accumulate,
    base_rows64,
    delta_rows64,
    lora_forward_rows,
)
from .model import ToyModel, delta_projector, forward_rows
from .registry import LoraAdapter, payload_bytes
from .rwlock import RWLock


class ServingMode(str, enum.Enum):
    MERGED = "merged"
    SWAP = "swap"
    BATCHED = "batched"

    @classmethod
    def parse(cls, text: str) -> "ServingMode":
        text = text.strip().lower()
        aliases = {"batchedmulti": "batched", "batched_multi": "batched", "multi": "batched"}
        try:
            return cls(aliases.get(text, text))
        except ValueError:
            raise DomainError(f"unknown serving mode {text!r}; use merged, swap or batched") from None


@dataclass
class BankLayer:
    stacked_a: np.ndarray  # (n_slots, r_max, d_in)
    stacked_b: np.ndarray  # (n_slots, d_out, r_max)
    scale: np.ndarray  # (n_slots,) float64, alpha/rank of the occupant, 0 if empty

    @property
    def d_out(self) -> int:
        return self.stacked_b.shape[1]

    @property
    def d_in(self) -> int:
        return self.stacked_a.shape[2]


@dataclass
class AdapterBank:
    layer_shapes: Mapping[str, tuple[int, int]]
    n_slots: int
    r_max: int
    layers: dict[str, BankLayer] = field(init=False)
    slot_map: dict[str, int] = field(init=False, default_factory=dict)
    _free: list[int] = field(init=False)

    def __post_init__(self):
        if self.n_slots < 1 or self.r_max < 1:
            raise DomainError("n_slots and r_max must be >= 1")
        self.layer_shapes = dict(self.layer_shapes)
        self.layers = {
            layer_id: BankLayer(
                np.zeros((self.n_slots, self.r_max, d_in), dtype=F32),
                np.zeros((self.n_slots, d_out, self.r_max), dtype=F32),
                np.zeros(self.n_slots, dtype=F64),
            )
            for layer_id, (d_out, d_in) in self.layer_shapes.items()
        }
        self._free = list(range(self.n_slots))

    @property
    def free_slots(self) -> list[int]:
        return sorted(self._free)

    @property
    def nbytes(self) -> int:
        return sum(l.stacked_a.nbytes + l.stacked_b.nbytes for l in self.layers.values())

    def check_adapter(self, adapter: LoraAdapter) -> None:
        for layer_id, delta in adapter.entries.items():
            shape = self.layer_shapes.get(layer_id)
            if shape is None:
                raise LayerMismatchError(
                    f"adapter {adapter.adapter_id!r} targets layer {layer_id!r} not in the bank"
                )
            if shape != (delta.d_out, delta.d_in):
                raise LayerMismatchError(
                    f"adapter {adapter.adapter_id!r} layer {layer_id!r} is "
                    f"{delta.d_out}x{delta.d_in}, bank expects {shape[0]}x{shape[1]}"
                )
            if delta.rank > self.r_max:
                raise RankOverflowError(
                    f"adapter {adapter.adapter_id!r} layer {layer_id!r} has rank "
                    f"{delta.rank} > r_max {self.r_max}"
                )

    def register(self, adapter: LoraAdapter) -> int:
        """Place ``adapter`` in the lowest free slot and return that slot."""
        if adapter.adapter_id in self.slot_map:
            raise DuplicateIdError(f"adapter {adapter.adapter_id!r} already registered")
        self.check_adapter(adapter)
        if not self._free:
            raise CapacityExhaustedError(f"all {self.n_slots} slots are occupied")
        slot = heapq.heappop(self._free)
        for layer_id, delta in adapter.entries.items():
            layer = self.layers[layer_id]
            layer.stacked_a[slot, : delta.rank, :] = delta.a
            layer.stacked_b[slot, :, : delta.rank] = delta.b
            layer.scale[slot] = delta.scale
        self.slot_map[adapter.adapter_id] = slot
        return slot

    def evict(self, adapter_id: str) -> int:
        slot = self.slot_map.pop(adapter_id, None)
        if slot is None:
            raise UnknownAdapterError(adapter_id)
        for layer in self.layers.values():
            layer.stacked_a[slot] = 0
            layer.stacked_b[slot] = 0
            layer.scale[slot] = 0
        heapq.heappush(self._free, slot)
        return slot

    def build_routing_mask(self, ids: Sequence[str | None]) -> np.ndarray:
        """One-hot ``(len(ids), n_slots)`` mask; ``None`` gives an all-zero row."""
        mask = np.zeros((len(ids), self.n_slots), dtype=F32)
        for i, adapter_id in enumerate(ids):
            if adapter_id is None:
                continue
            slot = self.slot_map.get(adapter_id)
            if slot is None:
                raise UnknownAdapterError(adapter_id, index=i)
            mask[i, slot] = 1
        return mask


def mask_slots(mask: np.ndarray) -> np.ndarray:
    """Selected slot per row, -1 for base-only rows; rejects non-one-hot rows."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidMaskError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise InvalidMaskError("mask entries must be 0 or 1")
    sums = mask.sum(axis=1)
    if (sums > 1).any():
        row = int(np.argmax(sums > 1))
        raise InvalidMaskError(f"mask row {row} selects {int(sums[row])} adapters")
    return np.where(sums == 1, mask.argmax(axis=1), -1)


def batched_masked_forward(
    x_rows, w, layer: BankLayer, mask, method: str = "gather"
) -> np.ndarray:
    """Row ``i``: ``w @ x_i + scale_s * B_s @ (A_s @ x_i)`` for its routed slot ``s``.

    ``method="gather"`` indexes the stacked tensors by slot and only touches
    routed rows. ``method="mask"`` multiplies the mask into the stacked
    tensors first; with one-hot rows it selects the same planes.
    """
    x_rows = np.asarray(x_rows, dtype=F32)
    mask = np.asarray(mask)
    if x_rows.ndim != 2 or x_rows.shape[1] != layer.d_in or np.shape(w) != (layer.d_out, layer.d_in):
        raise ShapeError(
            f"rows {x_rows.shape}, weight {np.shape(w)} and bank layer "
            f"({layer.d_out}, {layer.d_in}) disagree"
        )
    if mask.ndim != 2 or mask.shape != (x_rows.shape[0], layer.scale.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} does not match {x_rows.shape[0]} rows")
    slots = mask_slots(mask)
    out = base_rows64(x_rows, w)
    if method == "gather":
        active = np.flatnonzero(slots >= 0)
        if active.size:
            s = slots[active]
            out[active] += delta_rows64(
                x_rows[active], layer.stacked_a[s], layer.stacked_b[s], layer.scale[s]
            )
    elif method == "mask":
        m = mask.astype(F64)
        a = np.einsum("bs,srd->brd", m, layer.stacked_a.astype(F64))
        b = np.einsum("bs,sor->bor", m, layer.stacked_b.astype(F64))
        out += delta_rows64(x_rows, a, b, m @ layer.scale)
    else:
        raise ValueError(f"unknown method {method!r}")
    return out.astype(F32)


def merge_weights(w, delta: LoraLayerDelta) -> np.ndarray:
    """``W + scale * B @ A`` in float64, stored as float32."""
    w = np.asarray(w, dtype=F32)
    if w.shape != (delta.d_out, delta.d_in):
        raise ShapeError(f"weight {w.shape} does not match delta ({delta.d_out}, {delta.d_in})")
    return (w.astype(F64) + delta.scale * accumulate(delta.b, delta.a)).astype(F32)


def unmerge_weights(w_merged, delta: LoraLayerDelta) -> np.ndarray:
    w = np.asarray(w_merged, dtype=F32)
    if w.shape != (delta.d_out, delta.d_in):
        raise ShapeError(f"weight {w.shape} does not match delta ({delta.d_out}, {delta.d_in})")
    return (w.astype(F64) - delta.scale * accumulate(delta.b, delta.a)).astype(F32)


def _requests(requests) -> list[tuple[str | None, Sequence[int]]]:
    out = []
    for r in requests:
        if isinstance(r, tuple):
            out.append((r[0], r[1]))
        else:
            out.append((r.adapter_id, r.tokens))
    return out


class LoraEngine:
    """One base model, a bank of adapters, and the three serving modes.

    Requests are anything with ``adapter_id`` and ``tokens`` attributes, or
    ``(adapter_id, tokens)`` tuples; ``adapter_id=None`` is the base model.
    """

    def __init__(self, model: ToyModel, n_slots: int, r_max: int):
        self.model = model
        self.bank = AdapterBank(model.layer_shapes(), n_slots, r_max)
        self.adapters: dict[str, LoraAdapter] = {}
        self.lock = RWLock()
        self.swap_count = 0
        self._installed: str | None = None
        self._merged: dict[str, dict[str, np.ndarray]] = {}
        self._merge_lock = threading.Lock()

    # -- management (exclusive) --

    def register(self, adapter: LoraAdapter) -> int:
        with self.lock.write():
            slot = self.bank.register(adapter)
            self.adapters[adapter.adapter_id] = adapter
            return slot

    def evict(self, adapter_id: str) -> None:
        with self.lock.write():
            self.bank.evict(adapter_id)
            del self.adapters[adapter_id]
            with self._merge_lock:
                self._merged.pop(adapter_id, None)
            if self._installed == adapter_id:
                self._installed = None

    def swap_adapter(self, adapter_id: str | None) -> None:
        with self.lock.write():
            self._swap(adapter_id)

    def _swap(self, adapter_id: str | None) -> None:
        if adapter_id is not None and adapter_id not in self.adapters:
            raise UnknownAdapterError(adapter_id)
        self._installed = adapter_id
        self.swap_count += 1

    @property
    def installed(self) -> str | None:
        return self._installed

    # -- queries --

    def slot_of(self, adapter_id: str) -> int:
        try:
            return self.bank.slot_map[adapter_id]
        except KeyError:
            raise UnknownAdapterError(adapter_id) from None

    def is_registered(self, adapter_id: str | None) -> bool:
        return adapter_id is None or adapter_id in self.adapters

    def list_adapters(self) -> list[dict]:
        with self.lock.read():
            return [
                {
                    "adapter_id": adapter_id,
                    "slot": self.bank.slot_map[adapter_id],
                    "ranks": adapter.ranks,
                    "payload_bytes": payload_bytes(adapter),
                    "merged_cached": adapter_id in self._merged,
                }
                for adapter_id, adapter in sorted(self.adapters.items())
            ]

    def merged_cache_bytes(self) -> int:
        with self._merge_lock:
            return sum(
                self.model.weights[layer_id].nbytes
                for merged in self._merged.values()
                for layer_id in merged
            )

    def metrics(self) -> dict:
        return {
            "registered": len(self.adapters),
            "n_slots": self.bank.n_slots,
            "r_max": self.bank.r_max,
            "free_slots": len(self.bank.free_slots),
            "bank_bytes": self.bank.nbytes,
            "merged_cache_bytes": self.merged_cache_bytes(),
            "merged_cache_adapters": len(self._merged),
            "swap_count": self.swap_count,
            "installed": self._installed,
        }

    # -- forwards --

    def merged_weights(self, adapter_id: str) -> dict[str, np.ndarray]:
        """Only the layers the adapter touches; built on first use."""
        with self._merge_lock:
            cached = self._merged.get(adapter_id)
            if cached is None:
                adapter = self.adapters.get(adapter_id)
                if adapter is None:
                    raise UnknownAdapterError(adapter_id)
                cached = {
                    layer_id: merge_weights(self.model.weights[layer_id], delta)
                    for layer_id, delta in adapter.entries.items()
                }
                self._merged[adapter_id] = cached
            return cached

    def _forward_merged(self, adapter_id, sequences):
        weights = self.model.weights
        if adapter_id is not None:
            weights = {**weights, **self.merged_weights(adapter_id)}

        def project(layer_id, rows):
            return lora_forward_rows(rows, weights[layer_id], None)

        return forward_rows(self.model, sequences, project)

    def _forward_installed(self, sequences):
        deltas = {} if self._installed is None else self.adapters[self._installed].entries
        return forward_rows(self.model, sequences, delta_projector(self.model, deltas))

    def _forward_batched(self, ids, sequences, method="gather"):
        mask = self.bank.build_routing_mask(ids)
        lengths = [len(s) for s in sequences]
        row_mask = np.repeat(mask, lengths, axis=0)

        def project(layer_id, rows):
            return batched_masked_forward(
                rows, self.model.weights[layer_id], self.bank.layers[layer_id], row_mask, method
            )

        return forward_rows(self.model, sequences, project)

    def serve_batch(self, mode: ServingMode | str, requests, method: str = "gather") -> list[np.ndarray]:
        """Logits for each request, in request order."""
        mode = ServingMode.parse(mode) if isinstance(mode, str) else mode
        reqs = _requests(requests)
        if not reqs:
            return []
        ids = [r[0] for r in reqs]
        sequences = [r[1] for r in reqs]

        if mode is ServingMode.SWAP:
            targets = set(ids)
            if len(targets) > 1:
                raise MixedBatchError(
                    f"swap mode needs one target per batch, got {sorted(map(str, targets))}"
                )
            (target,) = targets
            with self.lock.write():
                if target != self._installed:
                    self._swap(target)
                return self._forward_installed(sequences)

        with self.lock.read():
            for i, adapter_id in enumerate(ids):
                if not self.is_registered(adapter_id):
                    raise UnknownAdapterError(adapter_id, index=i)
            if mode is ServingMode.BATCHED:
                return self._forward_batched(ids, sequences, method)
            # merged: one pass per distinct target, results scattered back
            out: list[np.ndarray | None] = [None] * len(reqs)
            for target in dict.fromkeys(ids):
                idx = [i for i, t in enumerate(ids) if t == target]
                for i, logits in zip(idx, self._forward_merged(target, [sequences[i] for i in idx])):
                    out[i] = logits
            return out  # type: ignore[return-value]
