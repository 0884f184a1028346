"""HTTP endpoint for inference and adapter management over one shared bank.

Routes::

    POST   /v1/infer            {"adapter_id": str|null, "tokens": [int, ...]}
    PUT    /v1/adapters/{id}    body: adapter file bytes
    DELETE /v1/adapters/{id}
    GET    /v1/adapters
    GET    /v1/metrics
    POST   /v1/mode             body: merged | swap | batched

Inference handlers enqueue into the scheduler queue and block until the
single executor thread has run their batch. Management calls and batch
execution are mutually exclusive.

Logits go over the wire as JSON numbers holding the exact float32 values
(widened to float64, printed shortest-round-trip), so ``np.float32`` of the
parsed numbers reproduces the engine's output bit for bit.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import unquote

import numpy as np
import yaml

from . import errors
from .engine import LoraEngine, ServingMode
from .errors import LoraError, UnknownAdapterError, ValidationError
from .model import ModelConfig, build_model
from .registry import AdapterRegistry, deserialize_adapter, validate_adapter_id
from .scheduler import (
    Batch,
    InferenceRequest,
    RequestQueue,
    SchedulerConfig,
    nearest_rank,
)

log = logging.getLogger(__name__)

# Every error kind raised by the registry, engine, model or scheduler.
STATUS_BY_KIND = {
    "error": 500,
    "shape": 400,
    "domain": 400,
    "validation": 400,
    "registry": 400,
    "format": 400,
    "unsupported-version": 400,
    "truncation": 400,
    "corruption": 400,
    "unknown-id": 404,
    "duplicate-id": 409,
    "capacity-exhausted": 507,
    "rank-overflow": 422,
    "layer-mismatch": 422,
    "out-of-vocab": 422,
    "unsorted-trace": 400,
    # never reach a client: the executor splits batches and builds masks itself
    "invalid-mask": 500,
    "mixed-batch": 500,
}


def status_for(exc: LoraError) -> int:
    return STATUS_BY_KIND[exc.kind]


def error_body(exc: LoraError) -> dict:
    body = {"error": exc.kind, "message": str(exc)}
    if isinstance(exc, UnknownAdapterError):
        body["adapter_id"] = exc.adapter_id
    if isinstance(exc, errors.TruncationError):
        body["offset"] = exc.offset
    return body


@dataclass(frozen=True)
class ServerConfig:
    listen: str = "127.0.0.1:8080"
    model: str = "model.yaml"
    registry: str = "registry"
    n_slots: int = 8
    r_max: int = 8
    mode: str = "batched"
    max_batch: int = 8
    window_ms: float = 2.0

    KEYS = ("listen", "model", "registry", "n_slots", "r_max", "mode", "max_batch", "window_ms")

    def __post_init__(self):
        if self.n_slots < 1 or self.r_max < 1:
            raise errors.DomainError("n_slots and r_max must be >= 1")
        ServingMode.parse(self.mode)
        self.host_port()

    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.listen.rpartition(":")
        if not sep or not port.isdigit():
            raise ValidationError(f"listen must be host:port, got {self.listen!r}")
        return host or "127.0.0.1", int(port)

    @classmethod
    def load(cls, path) -> "ServerConfig":
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: expected key-value pairs")
        unknown = set(data) - set(cls.KEYS)
        if unknown:
            raise ValidationError(f"unknown server config keys: {sorted(unknown)}")
        cfg = cls(**{k: data[k] for k in cls.KEYS if k in data})
        # relative paths are relative to the config file
        base = path.parent
        return cls(
            **{
                **{k: getattr(cfg, k) for k in cls.KEYS},
                "model": str(base / cfg.model),
                "registry": str(base / cfg.registry),
            }
        )


class _Pending:
    __slots__ = ("request", "event", "status", "body", "enqueued")

    def __init__(self, request: InferenceRequest):
        self.request = request
        self.event = threading.Event()
        self.status = 500
        self.body: dict = {}
        self.enqueued = time.monotonic()


class LoraService:
    """Everything behind the HTTP routes; usable without a socket."""

    def __init__(
        self,
        engine: LoraEngine,
        registry: AdapterRegistry | None = None,
        mode: ServingMode | str = ServingMode.BATCHED,
        scheduler: SchedulerConfig = SchedulerConfig(),
        infer_timeout_s: float = 60.0,
    ):
        self.engine = engine
        self.registry = registry
        self.mode = ServingMode.parse(mode) if isinstance(mode, str) else mode
        self.scheduler = scheduler
        self.infer_timeout_s = infer_timeout_s
        self.queue = RequestQueue()
        self._pending: dict[str, _Pending] = {}
        self._ids = itertools.count()
        self._exec_lock = threading.Lock()
        self._wakeup = threading.Condition()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._t0 = time.monotonic()
        self._batch_sizes: list[int] = []
        self._latencies: list[float] = []
        self._served = 0

    @classmethod
    def from_config(cls, config: ServerConfig) -> "LoraService":
        model = build_model(ModelConfig.load(config.model))
        engine = LoraEngine(model, config.n_slots, config.r_max)
        registry = AdapterRegistry(config.registry)
        for adapter_id in registry.ids():
            try:
                engine.register(registry.get(adapter_id))
            except LoraError as exc:
                log.warning("not loading %s from registry: %s", adapter_id, exc)
        return cls(
            engine,
            registry,
            config.mode,
            SchedulerConfig(config.max_batch, float(config.window_ms)),
        )

    # -- executor ---------------------------------------------------------

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def start(self) -> None:
        if self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._run, name="batch-executor", daemon=True)
            self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        with self._wakeup:
            self._wakeup.notify_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            batch = self.queue.form_batch(self.now_ms(), self.scheduler)
            if batch is None:
                oldest = self.queue.oldest_arrival()
                with self._wakeup:
                    if oldest is None:
                        timeout = 0.05
                    else:
                        timeout = max(0.0, (oldest + self.scheduler.window_ms - self.now_ms()) / 1000)
                    self._wakeup.wait(timeout)
                continue
            self.run_batch(batch)

    def run_batch(self, batch: Batch) -> None:
        with self._exec_lock:
            mode = self.mode
            runnable = []
            for r in batch.requests:
                if self.engine.is_registered(r.adapter_id):
                    runnable.append(r)
                else:
                    self._finish(r.request_id, 404, error_body(UnknownAdapterError(r.adapter_id)))
            try:
                if mode is ServingMode.SWAP:
                    groups = Batch(tuple(runnable), batch.formed_at).split_by_adapter()
                    for _, group in groups:
                        for r, logits in zip(group, self.engine.serve_batch(mode, group)):
                            self._complete(r, logits, mode)
                else:
                    for r, logits in zip(runnable, self.engine.serve_batch(mode, runnable)):
                        self._complete(r, logits, mode)
            except LoraError as exc:
                log.exception("batch failed")
                for r in runnable:
                    self._finish(r.request_id, status_for(exc), error_body(exc))
            self._batch_sizes.append(len(batch))

    def _complete(self, request: InferenceRequest, logits: np.ndarray, mode: ServingMode) -> None:
        pending = self._pending.get(request.request_id)
        latency = (time.monotonic() - pending.enqueued) * 1000 if pending else 0.0
        self._latencies.append(latency)
        self._served += 1
        self._finish(
            request.request_id,
            200,
            {
                "request_id": request.request_id,
                "adapter_id": request.adapter_id,
                "mode": mode.value,
                "latency_ms": latency,
                "logits": logits.tolist(),
            },
        )

    def _finish(self, request_id: str, status: int, body: dict) -> None:
        pending = self._pending.pop(request_id, None)
        if pending is not None:
            pending.status, pending.body = status, body
            pending.event.set()

    # -- handlers ---------------------------------------------------------

    def handle_infer(self, body) -> tuple[int, dict]:
        try:
            payload = json.loads(body) if isinstance(body, (bytes, str)) else body
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return 400, {"error": "malformed", "message": f"invalid JSON: {exc}"}
        if not isinstance(payload, dict) or set(payload) - {"adapter_id", "tokens"}:
            return 400, {"error": "malformed", "message": "expected {adapter_id?, tokens}"}
        adapter_id = payload.get("adapter_id")
        tokens = payload.get("tokens")
        if adapter_id is not None and not isinstance(adapter_id, str):
            return 400, {"error": "malformed", "message": "adapter_id must be a string or null"}
        if (
            not isinstance(tokens, list)
            or not tokens
            or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens)
        ):
            return 400, {"error": "malformed", "message": "tokens must be a non-empty list of integers"}
        vocab = self.engine.model.config.vocab
        bad = [t for t in tokens if not 0 <= t < vocab]
        if bad:
            return 422, {"error": "out-of-vocab", "message": f"token {bad[0]} not in [0, {vocab})"}
        if not self.engine.is_registered(adapter_id):
            return 404, error_body(UnknownAdapterError(adapter_id))

        request = InferenceRequest(f"req-{next(self._ids)}", adapter_id, tuple(tokens), self.now_ms())
        pending = _Pending(request)
        self._pending[request.request_id] = pending
        self.queue.enqueue(request)
        with self._wakeup:
            self._wakeup.notify_all()
        if self._thread is None:
            # no executor thread: drain synchronously (tests, embedded use)
            while not pending.event.is_set():
                batch = self.queue.form_batch(float("inf"), self.scheduler)
                if batch is None:
                    break
                self.run_batch(batch)
        if not pending.event.wait(self.infer_timeout_s):
            self._pending.pop(request.request_id, None)
            return 503, {"error": "timeout", "message": "request was not served in time"}
        return pending.status, pending.body

    def handle_put_adapter(self, adapter_id: str, body: bytes) -> tuple[int, dict]:
        try:
            validate_adapter_id(adapter_id)
            adapter = deserialize_adapter(body, adapter_id)
        except LoraError as exc:
            return status_for(exc), error_body(exc)
        with self._exec_lock:
            try:
                if adapter_id in self.engine.adapters:
                    raise errors.DuplicateIdError(f"adapter {adapter_id!r} already registered")
                self.engine.bank.check_adapter(adapter)
                if not self.engine.bank.free_slots:
                    raise errors.CapacityExhaustedError(
                        f"all {self.engine.bank.n_slots} slots are occupied"
                    )
                if self.registry is not None:
                    self.registry.put_bytes(adapter_id, body)
                slot = self.engine.register(adapter)
            except LoraError as exc:
                return status_for(exc), error_body(exc)
        return 201, {"adapter_id": adapter_id, "slot": slot}

    def handle_delete_adapter(self, adapter_id: str) -> tuple[int, dict | None]:
        with self._exec_lock:
            found = False
            if adapter_id in self.engine.adapters:
                self.engine.evict(adapter_id)
                found = True
            if self.registry is not None and adapter_id in self.registry:
                self.registry.remove(adapter_id)
                found = True
        if not found:
            return 404, error_body(UnknownAdapterError(adapter_id))
        return 204, None

    def handle_list_adapters(self) -> tuple[int, list]:
        return 200, self.engine.list_adapters()

    def handle_metrics(self) -> tuple[int, dict]:
        lat = sorted(self._latencies)
        hist: dict[str, int] = {}
        for size in self._batch_sizes:
            hist[str(size)] = hist.get(str(size), 0) + 1
        return 200, {
            "mode": self.mode.value,
            "served": self._served,
            "queued": len(self.queue),
            "batches": len(self._batch_sizes),
            "batch_size_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
            "p50_ms": nearest_rank(lat, 50),
            "p99_ms": nearest_rank(lat, 99),
            "max_batch": self.scheduler.max_batch,
            "window_ms": self.scheduler.window_ms,
            **self.engine.metrics(),
        }

    def handle_set_mode(self, body: bytes) -> tuple[int, dict]:
        text = body.decode("utf-8", "replace").strip()
        try:
            parsed = json.loads(text)
            if isinstance(parsed, dict):
                text = str(parsed.get("mode", ""))
            elif isinstance(parsed, str):
                text = parsed
        except json.JSONDecodeError:
            pass
        try:
            mode = ServingMode.parse(text)
        except LoraError as exc:
            return status_for(exc), error_body(exc)
        with self._exec_lock:
            self.mode = mode
        return 200, {"mode": mode.value}


# -- HTTP plumbing -------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    server: "LoraHTTPServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, payload=None) -> None:
        data = b"" if payload is None else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        if payload is not None:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def _adapter_id(self) -> str | None:
        prefix = "/v1/adapters/"
        if self.path.startswith(prefix) and len(self.path) > len(prefix):
            return unquote(self.path[len(prefix) :])
        return None

    def do_GET(self):
        svc = self.server.service
        if self.path == "/v1/adapters":
            self._send(*svc.handle_list_adapters())
        elif self.path == "/v1/metrics":
            self._send(*svc.handle_metrics())
        else:
            self._send(404, {"error": "not-found", "message": self.path})

    def do_POST(self):
        svc = self.server.service
        body = self._body()
        if self.path == "/v1/infer":
            self._send(*svc.handle_infer(body))
        elif self.path == "/v1/mode":
            self._send(*svc.handle_set_mode(body))
        else:
            self._send(404, {"error": "not-found", "message": self.path})

    def do_PUT(self):
        body = self._body()
        adapter_id = self._adapter_id()
        if adapter_id is None:
            self._send(404, {"error": "not-found", "message": self.path})
            return
        self._send(*self.server.service.handle_put_adapter(adapter_id, body))

    def do_DELETE(self):
        adapter_id = self._adapter_id()
        if adapter_id is None:
            self._send(404, {"error": "not-found", "message": self.path})
            return
        self._send(*self.server.service.handle_delete_adapter(adapter_id))


class LoraHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: LoraService):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def serve(config: ServerConfig) -> None:
    service = LoraService.from_config(config)
    httpd = LoraHTTPServer(config.host_port(), service)
    service.start()
    log.info("serving %s mode on %s", service.mode.value, httpd.url)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
        service.stop()
