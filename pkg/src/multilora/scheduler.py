"""Request buffering, batch formation and a discrete-event workload simulator.

Time is always a number of milliseconds supplied by the caller, so the
same policy runs under the simulator and under the server's wall clock.
"""

from __future__ import annotations

import json
import math
import threading
from collections import Counter, deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .engine import ServingMode
from .errors import DomainError, DuplicateIdError, UnsortedTraceError, ValidationError
from .registry import validate_adapter_id


@dataclass(frozen=True)
class InferenceRequest:
    request_id: str
    adapter_id: str | None
    tokens: tuple[int, ...]
    arrival_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.request_id:
            raise ValidationError("request_id must be non-empty")
        if not self.tokens:
            raise ValidationError(f"request {self.request_id!r} has no tokens")
        if any(t < 0 for t in self.tokens):
            raise ValidationError(f"request {self.request_id!r} has negative token ids")
        if not (self.arrival_time >= 0 and math.isfinite(self.arrival_time)):
            raise ValidationError(f"request {self.request_id!r} has bad arrival time")
        if self.adapter_id is not None:
            validate_adapter_id(self.adapter_id)


@dataclass(frozen=True)
class SchedulerConfig:
    max_batch: int = 8
    window_ms: float = 0.0

    def __post_init__(self):
        if isinstance(self.max_batch, bool) or not isinstance(self.max_batch, int) or self.max_batch < 1:
            raise DomainError(f"max_batch must be >= 1, got {self.max_batch!r}")
        if not (self.window_ms >= 0 and math.isfinite(self.window_ms)):
            raise DomainError(f"window_ms must be >= 0, got {self.window_ms!r}")


@dataclass(frozen=True)
class Batch:
    requests: tuple[InferenceRequest, ...]
    formed_at: float

    def __len__(self) -> int:
        return len(self.requests)

    @property
    def adapter_ids(self) -> list[str | None]:
        return [r.adapter_id for r in self.requests]

    def split_by_adapter(self) -> list[tuple[str | None, list[InferenceRequest]]]:
        """Per-adapter groups in order of first appearance (swap-mode execution)."""
        groups: dict[str | None, list[InferenceRequest]] = {}
        for r in self.requests:
            groups.setdefault(r.adapter_id, []).append(r)
        return list(groups.items())


class RequestQueue:
    """FIFO buffer; safe for several producers and one consumer."""

    def __init__(self):
        self._items: deque[InferenceRequest] = deque()
        self._ids: set[str] = set()
        self._lock = threading.Lock()

    def enqueue(self, request: InferenceRequest) -> None:
        with self._lock:
            if request.request_id in self._ids:
                raise DuplicateIdError(f"request {request.request_id!r} already enqueued")
            self._ids.add(request.request_id)
            self._items.append(request)

    def __len__(self) -> int:
        return len(self._items)

    def snapshot(self) -> list[InferenceRequest]:
        with self._lock:
            return list(self._items)

    def oldest_arrival(self) -> float | None:
        with self._lock:
            return self._items[0].arrival_time if self._items else None

    def form_batch(self, now: float, config: SchedulerConfig) -> Batch | None:
        """Emit the oldest requests when the batch is full or the oldest has waited out the window."""
        with self._lock:
            if not self._items:
                return None
            full = len(self._items) >= config.max_batch
            # same expression the simulator uses for its wake-up time
            expired = now >= self._items[0].arrival_time + config.window_ms
            if not (full or expired):
                return None
            n = min(len(self._items), config.max_batch)
            taken = tuple(self._items.popleft() for _ in range(n))
            return Batch(taken, now)


# -- workload simulation ------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Service time of a batch is ``base_ms + per_row_ms * rows``; a swap costs ``swap_ms``."""

    base_ms: float = 1.0
    per_row_ms: float = 1.0
    swap_ms: float = 0.0

    def __post_init__(self):
        for name in ("base_ms", "per_row_ms", "swap_ms"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be >= 0, got {v!r}")

    def batch_ms(self, rows: int) -> float:
        return self.base_ms + self.per_row_ms * rows


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    if not sorted_values:
        return 0.0
    k = max(1, math.ceil(pct / 100 * len(sorted_values)))
    return sorted_values[k - 1]


@dataclass
class WorkloadMetrics:
    mode: str
    latencies: dict[str, float] = field(default_factory=dict)
    batch_sizes: list[int] = field(default_factory=list)
    swap_count: int = 0
    makespan_ms: float = 0.0

    @property
    def completed(self) -> int:
        return len(self.latencies)

    @property
    def histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.batch_sizes).items()))

    @property
    def mean_ms(self) -> float:
        vals = list(self.latencies.values())
        return math.fsum(vals) / len(vals) if vals else 0.0

    @property
    def p50_ms(self) -> float:
        return nearest_rank(sorted(self.latencies.values()), 50)

    @property
    def p99_ms(self) -> float:
        return nearest_rank(sorted(self.latencies.values()), 99)

    @property
    def throughput_rps(self) -> float:
        """Completed requests per simulated second, over first arrival to last completion."""
        if not self.completed or self.makespan_ms <= 0:
            return 0.0
        return self.completed / (self.makespan_ms / 1000.0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "completed": self.completed,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p99_ms": self.p99_ms,
            "throughput_rps": self.throughput_rps,
            "swap_count": self.swap_count,
            "batches": len(self.batch_sizes),
            "batch_size_histogram": {str(k): v for k, v in self.histogram.items()},
            "latencies_ms": self.latencies,
        }

    def to_text(self) -> str:
        d = self.to_dict()
        hist = " ".join(f"{k}:{v}" for k, v in self.histogram.items())
        lines = [
            f"mode: {d['mode']}",
            f"completed: {d['completed']}",
            f"mean_ms: {d['mean_ms']:.6g}",
            f"p50_ms: {d['p50_ms']:.6g}",
            f"p99_ms: {d['p99_ms']:.6g}",
            f"throughput_rps: {d['throughput_rps']:.6g}",
            f"swap_count: {d['swap_count']}",
            f"batches: {d['batches']}",
            f"batch_size_histogram: {hist}",
        ]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SimulationLog:
    """Every emitted batch with its start and completion time."""

    batches: list[tuple[Batch, float, float]] = field(default_factory=list)


def simulate_workload(
    trace: Sequence[InferenceRequest],
    mode: ServingMode | str,
    config: SchedulerConfig,
    cost: CostModel,
    log: SimulationLog | None = None,
) -> WorkloadMetrics:
    """Single-executor discrete-event run of ``trace`` under ``mode``.

    Whenever the executor is idle it admits all arrivals up to the current
    time and asks :meth:`RequestQueue.form_batch` for work; if none is ready
    it sleeps until the next arrival or window expiry. Swap mode splits a
    batch into per-adapter sub-batches, each paying the batch cost plus
    ``swap_ms`` when its adapter differs from the one installed. Requests
    complete when their whole batch does.
    """
    mode = ServingMode.parse(mode) if isinstance(mode, str) else mode
    for prev, cur in zip(trace, trace[1:]):
        if cur.arrival_time < prev.arrival_time:
            raise UnsortedTraceError(
                f"trace not sorted: {cur.request_id!r} at {cur.arrival_time} "
                f"after {prev.request_id!r} at {prev.arrival_time}"
            )
    metrics = WorkloadMetrics(mode.value)
    if not trace:
        return metrics

    queue = RequestQueue()
    installed: str | None = None
    now = trace[0].arrival_time
    i = 0
    while i < len(trace) or len(queue):
        while i < len(trace) and trace[i].arrival_time <= now:
            queue.enqueue(trace[i])
            i += 1
        batch = queue.form_batch(now, config)
        if batch is None:
            wake = []
            if i < len(trace):
                wake.append(trace[i].arrival_time)
            oldest = queue.oldest_arrival()
            if oldest is not None:
                wake.append(oldest + config.window_ms)
            now = max(now, min(wake))
            continue

        if mode is ServingMode.SWAP:
            duration = 0.0
            for target, group in batch.split_by_adapter():
                if target != installed:
                    duration += cost.swap_ms
                    metrics.swap_count += 1
                    installed = target
                duration += cost.batch_ms(len(group))
        else:
            duration = cost.batch_ms(len(batch))
        done = now + duration
        for r in batch.requests:
            metrics.latencies[r.request_id] = done - r.arrival_time
        metrics.batch_sizes.append(len(batch))
        if log is not None:
            log.batches.append((batch, now, done))
        now = done
    metrics.makespan_ms = now - trace[0].arrival_time
    return metrics


# -- trace files -----------------------------------------------------------------


def parse_trace(text: str) -> list[InferenceRequest]:
    """``arrival_ms adapter_id|- tok,tok,...`` per line; ids are ``r<line index>``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValidationError(f"trace line {lineno}: expected 3 fields")
        arrival, adapter, toks = fields
        try:
            tokens = tuple(int(t) for t in toks.split(","))
            arrival_ms = float(arrival)
        except ValueError as exc:
            raise ValidationError(f"trace line {lineno}: {exc}") from exc
        out.append(
            InferenceRequest(
                f"r{len(out)}", None if adapter == "-" else adapter, tokens, arrival_ms
            )
        )
    return out


def load_trace(path) -> list[InferenceRequest]:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


def format_trace(requests: Iterable[InferenceRequest]) -> str:
    def ms(t: float) -> str:
        return str(int(t)) if float(t).is_integer() else repr(float(t))

    return "".join(
        f"{ms(r.arrival_time)} {r.adapter_id or '-'} {','.join(map(str, r.tokens))}\n"
        for r in requests
    )
