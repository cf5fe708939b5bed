"""Server-side micro-batch scheduler and stability metrics.

Envelopes arriving in the outbound drop are assigned to fixed-length windows
by arrival time, dispatched to a bounded worker pool, and the results are
deposited into per-client inbox drops.  Overload queues rather than drops,
so processing time grows observably when input outpaces the engine.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import psutil
except ImportError:  # pragma: no cover - psutil is a declared dependency
    psutil = None

from . import secure
from .enclave import (
    BoundaryChannel,
    BoundaryDown,
    ParseFailure,
    plain_process_batch,
)
from .gateway import DropBox
from .hrv import DEFAULT_BANDS, DEFAULT_GRID, FrequencyBands, SpectralGrid

log = logging.getLogger(__name__)

METRICS_HEADER = "interval_index,record_count,input_bytes,processing_ms"


class NoData(Exception):
    """No metrics remain after the warmup exclusion."""


class EngineFatal(Exception):
    """Unrecoverable engine failure, e.g. boundary death in secure mode."""


@dataclass
class BatchMetrics:
    interval_index: int
    record_count: int
    input_bytes: int
    processing_ms: float
    queue_depth: int
    rss_bytes: Optional[int] = None

    def line(self) -> str:
        return (f"{self.interval_index},{self.record_count},{self.input_bytes},"
                f"{self.processing_ms:.3f}")


@dataclass
class StabilityReport:
    """Per-run verdict: unstable iff mean processing time exceeds the interval."""

    mode: str
    interval_s: float
    warmup_intervals: int
    metrics: list[BatchMetrics]
    mean_processing_ms: float
    unstable: bool
    records_total: int = 0
    rejected_total: int = 0
    max_rss_bytes: Optional[int] = None


def is_unstable(metrics: list[BatchMetrics], interval_s: float,
                warmup_intervals: int = 2) -> bool:
    """True iff mean processing time past warmup exceeds interval_s seconds."""
    measured = [m for m in metrics if m.interval_index >= warmup_intervals]
    if not measured:
        raise NoData(f"no metrics past the {warmup_intervals}-interval warmup")
    mean_ms = sum(m.processing_ms for m in measured) / len(measured)
    return mean_ms > interval_s * 1000.0


@dataclass
class EngineConfig:
    drop_root: Path
    mode: str = "secure"  # secure | plain
    interval_s: float = 10.0
    worker_count: int = 1
    warmup_intervals: int = 2
    batch_work_ms: float = 0.0  # synthetic per-record cost, both modes
    bands: FrequencyBands = DEFAULT_BANDS
    grid: SpectralGrid = DEFAULT_GRID
    metrics_path: Optional[Path] = None
    echo_metrics: bool = False

    def __post_init__(self):
        if self.mode not in ("secure", "plain"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.interval_s <= 0 or self.worker_count < 1:
            raise ValueError("interval_s must be > 0 and worker_count >= 1")


@dataclass
class _Window:
    index: int
    items: list[tuple[str, Path, int]]  # (client_id, path, size)
    closed_at: float = 0.0
    queue_depth: int = 0


class Engine:
    """One scheduler owning window assignment plus a bounded worker pool."""

    def __init__(self, config: EngineConfig,
                 boundary: Optional[BoundaryChannel] = None):
        if config.mode == "secure" and boundary is None:
            raise ValueError("secure mode requires a boundary channel")
        self.config = config
        self.drop = DropBox(config.drop_root)
        self.boundary = boundary
        self.metrics: list[BatchMetrics] = []
        self.records_total = 0
        self.rejected_total = 0
        self.fatal: Optional[str] = None
        self._seen: set[tuple[str, str]] = set()
        self._queue: "queue.Queue[Optional[_Window]]" = queue.Queue()
        self._inflight = 0
        self._inflight_lock = threading.Lock()
        self._metrics_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._metrics_fh = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        if self.config.metrics_path is not None:
            self.config.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            self._metrics_fh = open(self.config.metrics_path, "w")
            self._metrics_fh.write(METRICS_HEADER + "\n")
        for i in range(self.config.worker_count):
            t = threading.Thread(target=self._worker, name=f"engine-worker-{i}",
                                 daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._scheduler, name="engine-scheduler",
                             daemon=True)
        t.start()
        self._threads.append(t)
        log.info("engine started mode=%s interval=%.3gs workers=%d",
                 self.config.mode, self.config.interval_s, self.config.worker_count)

    def stop(self, drain: bool = True) -> None:
        """Safe shutdown: stop scheduling, then drain in-flight windows."""
        self._stop.set()
        if drain:
            self._queue.join()
        for _ in range(self.config.worker_count):
            self._queue.put(None)
        for t in self._threads:
            t.join(timeout=10.0)
        if self._metrics_fh is not None:
            self._metrics_fh.close()
            self._metrics_fh = None

    def run_for(self, duration_s: float, poll_s: float = 0.1) -> None:
        self.start()
        deadline = time.monotonic() + duration_s
        while time.monotonic() < deadline:
            if self.fatal is not None:
                self.stop(drain=False)
                raise EngineFatal(self.fatal)
            time.sleep(poll_s)
        self.stop()
        if self.fatal is not None:
            raise EngineFatal(self.fatal)

    def stability(self) -> StabilityReport:
        with self._metrics_lock:
            metrics = list(self.metrics)
        try:
            unstable = is_unstable(metrics, self.config.interval_s,
                                   self.config.warmup_intervals)
        except NoData:
            unstable = False
        measured = [m for m in metrics
                    if m.interval_index >= self.config.warmup_intervals]
        mean_ms = (sum(m.processing_ms for m in measured) / len(measured)
                   if measured else 0.0)
        rss = [m.rss_bytes for m in metrics if m.rss_bytes]
        return StabilityReport(
            mode=self.config.mode,
            interval_s=self.config.interval_s,
            warmup_intervals=self.config.warmup_intervals,
            metrics=metrics,
            mean_processing_ms=mean_ms,
            unstable=unstable,
            records_total=self.records_total,
            rejected_total=self.rejected_total,
            max_rss_bytes=max(rss) if rss else None,
        )

    # -- scheduling --------------------------------------------------------

    def _scheduler(self) -> None:
        t0 = time.monotonic()
        index = 0
        while not self._stop.is_set():
            deadline = t0 + (index + 1) * self.config.interval_s
            while True:
                now = time.monotonic()
                if now >= deadline or self._stop.is_set():
                    break
                time.sleep(min(0.05, deadline - now))
            if self._stop.is_set():
                break
            window = _Window(index=index, items=self._scan(), closed_at=time.monotonic())
            with self._inflight_lock:
                window.queue_depth = self._inflight
                self._inflight += 1
            self._queue.put(window)
            index += 1

    def _scan(self) -> list[tuple[str, Path, int]]:
        suffix = ".env" if self.config.mode == "secure" else ".csv"
        items: list[tuple[str, Path, int]] = []
        outbox_root = self.drop.root / "outbox"
        if not outbox_root.is_dir():
            return items
        for client_dir in sorted(outbox_root.iterdir()):
            if not client_dir.is_dir():
                continue
            for path in DropBox.visible(client_dir, suffix):
                key = (client_dir.name, path.name)
                if key in self._seen:
                    continue
                self._seen.add(key)
                try:
                    size = path.stat().st_size
                except OSError:
                    continue
                items.append((client_dir.name, path, size))
        return items

    # -- processing --------------------------------------------------------

    def _worker(self) -> None:
        while True:
            window = self._queue.get()
            if window is None:
                self._queue.task_done()
                return
            try:
                self._process_window(window)
            finally:
                with self._inflight_lock:
                    self._inflight -= 1
                self._queue.task_done()

    def _process_window(self, window: _Window) -> None:
        for client_id, path, _size in window.items:
            if self.fatal is not None:
                break
            if self.config.batch_work_ms > 0:
                time.sleep(self.config.batch_work_ms / 1000.0)
            try:
                raw = path.read_bytes()
            except OSError:
                self.rejected_total += 1
                continue
            try:
                if self.config.mode == "secure":
                    self._dispatch_secure(client_id, raw)
                else:
                    self._dispatch_plain(client_id, path, raw)
            except BoundaryDown as exc:
                self.fatal = f"boundary channel lost: {exc}"
                log.error("engine halting: %s", self.fatal)
                break
            self._archive(client_id, path)

        processing_ms = (time.monotonic() - window.closed_at) * 1000.0
        rss = None
        if psutil is not None:
            try:
                rss = psutil.Process().memory_info().rss
            except Exception:  # noqa: BLE001 - best-effort sample only
                rss = None
        metrics = BatchMetrics(
            interval_index=window.index,
            record_count=len(window.items),
            input_bytes=sum(size for _, _, size in window.items),
            processing_ms=processing_ms,
            queue_depth=getattr(window, "queue_depth", 0),
            rss_bytes=rss,
        )
        self.records_total += metrics.record_count
        with self._metrics_lock:
            self.metrics.append(metrics)
            if self._metrics_fh is not None:
                self._metrics_fh.write(metrics.line() + "\n")
                self._metrics_fh.flush()
        if self.config.echo_metrics:
            print(metrics.line(), flush=True)

    def _dispatch_secure(self, client_id: str, raw: bytes) -> None:
        assert self.boundary is not None
        status, reply = self.boundary.process(raw)
        if status != 0:
            self.rejected_total += 1
            # Log by envelope key id only; ids stay out of the untrusted logs.
            log.warning("boundary rejected envelope key=%s", raw[1:9].hex())
            return
        env = secure.SealedEnvelope.decode(reply)
        self.drop.deposit(self.drop.inbox(client_id), env.sequence, ".env", reply)

    def _dispatch_plain(self, client_id: str, path: Path, raw: bytes) -> None:
        try:
            doc = plain_process_batch(raw, self.config.bands, self.config.grid)
        except ParseFailure:
            self.rejected_total += 1
            return
        doc["request_sequence"] = int(path.stem)
        data = json.dumps(doc, sort_keys=True).encode("utf-8")
        self.drop.deposit(self.drop.inbox(client_id), int(path.stem), ".json", data)

    def _archive(self, client_id: str, path: Path) -> None:
        dest_dir = self.drop.processed(client_id)
        try:
            dest_dir.mkdir(parents=True, exist_ok=True)
            path.rename(dest_dir / path.name)
        except OSError:
            pass


def verify_boundary(channel: BoundaryChannel, expected_measurement: bytes,
                    root_public: bytes) -> None:
    """Operational gate: refuse to serve against an unexpected boundary."""
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    priv = X25519PrivateKey.generate()
    pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    nonce = secure.new_challenge()
    quote = channel.attest(nonce, pub)
    secure.verify_quote(quote, expected_measurement, nonce, root_public, priv)
