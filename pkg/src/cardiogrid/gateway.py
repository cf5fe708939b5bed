"""Client-side gateway: sample aggregation, sealed file-drop exchange.

The gateway aggregates MQTT-delivered samples into batch records, seals them
(or writes them plain in baseline mode), and deposits them in the outbound
drop directory.  The consumer polls the inbound drop for processed reports.
Files become visible to readers only by atomic rename from a .tmp name.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from . import hrv, secure
from .secure import (
    DIR_TO_CLIENT,
    DIR_TO_ENCLAVE,
    EnvelopeOpener,
    SealedEnvelope,
    SealingContext,
    SessionKey,
)

log = logging.getLogger(__name__)

DEFAULT_FLUSH_INTERVAL_S = 5.0
DEFAULT_MAX_LINES = 64


class ChannelDown(Exception):
    """Outbound drop not writable; producer retries with backoff."""


@dataclass(frozen=True)
class BatchRecord:
    """Ordered (timestamp, interval) lines for one client plus creation time."""

    client_id: str
    lines: tuple[tuple[int, int], ...]
    created_at_ms: int

    def __post_init__(self):
        stamps = [t for t, _ in self.lines]
        if stamps != sorted(stamps):
            raise ValueError("batch lines must be ordered by timestamp")

    def to_csv(self) -> str:
        """Two-column ASCII decimal CSV, no header: `<t_ms>,<rr_ms>\\n` per line."""
        return "".join(f"{t},{rr}\n" for t, rr in self.lines)

    def serialize(self) -> bytes:
        """Wire form: one id/created-at header line, then the CSV body."""
        head = f"{self.client_id},{self.created_at_ms}\n"
        return (head + self.to_csv()).encode("utf-8")

    @classmethod
    def parse(cls, raw: bytes) -> tuple["BatchRecord", int]:
        """Parse the wire form; returns (record, skipped_line_count).

        Malformed CSV lines are skipped and counted, not fatal.  Raises
        ValueError only when the header line itself is unusable.
        """
        text = raw.decode("utf-8", errors="strict")
        lines = text.split("\n")
        if not lines or "," not in lines[0]:
            raise ValueError("missing batch header line")
        cid, _, created = lines[0].rpartition(",")
        if not cid:
            raise ValueError("empty client id in batch header")
        created_at = int(created)
        parsed: list[tuple[int, int]] = []
        skipped = 0
        for line in lines[1:]:
            if not line:
                continue
            try:
                t_str, rr_str = line.split(",")
                parsed.append((int(t_str), int(rr_str)))
            except ValueError:
                skipped += 1
        return cls(client_id=cid, lines=tuple(parsed), created_at_ms=created_at), skipped


def atomic_write(path: Path, data: bytes) -> None:
    """Write then rename, so readers never observe a partial file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.rename(tmp, path)


class DropBox:
    """Outbox/inbox directory layout under one root.

    `<root>/outbox/<client_id>/<seq>.env` client -> server,
    `<root>/inbox/<client_id>/<seq>.env` server -> client.  Plain mode uses
    .csv / .json extensions for the unsealed baseline.
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    def outbox(self, client_id: str) -> Path:
        return self.root / "outbox" / client_id

    def inbox(self, client_id: str) -> Path:
        return self.root / "inbox" / client_id

    def processed(self, client_id: str) -> Path:
        return self.root / "processed" / client_id

    def quarantine(self, client_id: str) -> Path:
        return self.root / "quarantine" / client_id

    def deposit(self, directory: Path, seq: int, suffix: str, data: bytes) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{seq:012d}{suffix}"
        atomic_write(path, data)
        return path

    @staticmethod
    def visible(directory: Path, suffix: str) -> list[Path]:
        if not directory.is_dir():
            return []
        return sorted(p for p in directory.iterdir()
                      if p.suffix == suffix and not p.name.endswith(".tmp"))


class Aggregator:
    """Collects samples into batch records; flushes on time or size.

    Flushes whichever comes first: `flush_interval_s` since the batch was
    opened, or `max_lines` collected.  Empty batches are never emitted.
    Malformed payloads are counted and skipped.
    """

    def __init__(self, client_id: str, on_batch: Callable[[BatchRecord], None],
                 flush_interval_s: float = DEFAULT_FLUSH_INTERVAL_S,
                 max_lines: int = DEFAULT_MAX_LINES,
                 clock: Callable[[], float] = time.monotonic):
        self.client_id = client_id
        self.on_batch = on_batch
        self.flush_interval_s = flush_interval_s
        self.max_lines = max_lines
        self.malformed = 0
        self.accepted = 0
        self._clock = clock
        self._lines: list[tuple[int, int]] = []
        self._opened_at: Optional[float] = None
        self._lock = threading.Lock()

    def add_payload(self, payload: bytes) -> None:
        """Parse one `<t>,<rr>` sample payload and append it to the batch."""
        try:
            t_str, rr_str = payload.decode("ascii").strip().split(",")
            line = (int(t_str), int(rr_str))
        except (UnicodeDecodeError, ValueError):
            self.malformed += 1
            return
        flush_now: Optional[BatchRecord] = None
        with self._lock:
            if not self._lines:
                self._opened_at = self._clock()
            self._lines.append(line)
            self.accepted += 1
            if len(self._lines) >= self.max_lines:
                flush_now = self._take_locked()
        if flush_now is not None:
            self.on_batch(flush_now)

    def poll(self) -> None:
        """Time-based flush check; call periodically (e.g. every 100 ms)."""
        flush_now: Optional[BatchRecord] = None
        with self._lock:
            if self._lines and self._opened_at is not None \
                    and self._clock() - self._opened_at >= self.flush_interval_s:
                flush_now = self._take_locked()
        if flush_now is not None:
            self.on_batch(flush_now)

    def flush(self) -> None:
        """Force out any buffered lines (shutdown path)."""
        with self._lock:
            record = self._take_locked() if self._lines else None
        if record is not None:
            self.on_batch(record)

    def _take_locked(self) -> BatchRecord:
        record = BatchRecord(client_id=self.client_id, lines=tuple(self._lines),
                             created_at_ms=int(time.time() * 1000))
        self._lines.clear()
        self._opened_at = None
        return record


class Producer:
    """Seals batch records and deposits them in the outbound drop.

    On drop failures the batch stays queued and delivery retries with
    exponential backoff (base 1 s, cap 30 s by default).  The queue holds
    enough for an extended outage without losing batches.
    """

    def __init__(self, drop: DropBox, client_id: str, mode: str = "secure",
                 sealer: Optional[SealingContext] = None,
                 backoff_base_s: float = 1.0, backoff_cap_s: float = 30.0,
                 queue_capacity: int = 1000):
        if mode == "secure" and sealer is None:
            raise ValueError("secure mode requires a sealing context")
        self.drop = drop
        self.client_id = client_id
        self.mode = mode
        self.sealer = sealer
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self._queue: queue.Queue[BatchRecord] = queue.Queue(maxsize=queue_capacity)
        self._plain_seq = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.deposited = 0
        self.bytes_out = 0
        self._first_deposit: Optional[float] = None
        self._last_deposit: Optional[float] = None

    def submit(self, record: BatchRecord) -> None:
        self._queue.put(record)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"producer-{self.client_id[:8]}")
        self._thread.start()

    def stop(self, drain_timeout: float = 5.0) -> None:
        deadline = time.monotonic() + drain_timeout
        while not self._queue.empty() and time.monotonic() < deadline:
            time.sleep(0.05)
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _run(self) -> None:
        backoff = self.backoff_base_s
        pending: Optional[BatchRecord] = None
        while not self._stop.is_set():
            if pending is None:
                try:
                    pending = self._queue.get(timeout=0.2)
                except queue.Empty:
                    continue
            try:
                self._deposit(pending)
            except ChannelDown as exc:
                log.warning("producer channel down, retrying in %.3gs: %s", backoff, exc)
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2, self.backoff_cap_s)
                continue
            pending = None
            backoff = self.backoff_base_s

    def _deposit(self, record: BatchRecord) -> None:
        payload = record.serialize()
        try:
            if self.mode == "secure":
                env = self.sealer.seal(payload)
                data = env.encode()
                path = self.drop.deposit(self.drop.outbox(self.client_id),
                                         env.sequence, ".env", data)
            else:
                self._plain_seq += 1
                data = payload
                path = self.drop.deposit(self.drop.outbox(self.client_id),
                                         self._plain_seq, ".csv", data)
        except OSError as exc:
            raise ChannelDown(str(exc)) from exc
        now = time.monotonic()
        if self._first_deposit is None:
            self._first_deposit = now
        self._last_deposit = now
        self.deposited += 1
        self.bytes_out += len(data)
        log.debug("deposited %d bytes to %s", len(data), path.name)

    def outbound_rate_bps(self) -> Optional[float]:
        """Measured outbound bytes/s, None until two deposits have happened."""
        if self._first_deposit is None or self._last_deposit is None:
            return None
        span = self._last_deposit - self._first_deposit
        if span <= 0:
            return None
        return self.bytes_out / span


@dataclass
class ReportDelivery:
    """One decrypted reply surfaced to the client."""

    client_id: str
    request_sequence: Optional[int]
    reports: list[hrv.HrvReport] = field(default_factory=list)
    error: Optional[str] = None
    received_at: float = 0.0


class Consumer:
    """Polls the inbound drop, opens envelopes, surfaces reports.

    Envelopes that fail to open are quarantined and polling continues.
    """

    def __init__(self, drop: DropBox, client_id: str, mode: str = "secure",
                 opener: Optional[EnvelopeOpener] = None,
                 on_delivery: Optional[Callable[[ReportDelivery], None]] = None,
                 poll_interval_s: float = 0.25):
        if mode == "secure" and opener is None:
            raise ValueError("secure mode requires an envelope opener")
        self.drop = drop
        self.client_id = client_id
        self.mode = mode
        self.opener = opener
        self.on_delivery = on_delivery
        self.poll_interval_s = poll_interval_s
        self.deliveries: "queue.Queue[ReportDelivery]" = queue.Queue()
        self.quarantined = 0
        self._seen: set[str] = set()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"consumer-{self.client_id[:8]}")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def poll_once(self) -> int:
        """Process any new inbox files; returns the number surfaced."""
        suffix = ".env" if self.mode == "secure" else ".json"
        surfaced = 0
        for path in DropBox.visible(self.drop.inbox(self.client_id), suffix):
            if path.name in self._seen:
                continue
            self._seen.add(path.name)
            try:
                raw = path.read_bytes()
            except OSError:
                continue
            try:
                delivery = self._open(raw)
            except secure.SecureChannelError as exc:
                log.warning("quarantining %s: %s", path.name, type(exc).__name__)
                self._quarantine(path, raw)
                continue
            except (ValueError, KeyError, json.JSONDecodeError):
                self._quarantine(path, raw)
                continue
            delivery.received_at = time.time()
            self.deliveries.put(delivery)
            if self.on_delivery is not None:
                self.on_delivery(delivery)
            surfaced += 1
        return surfaced

    def _open(self, raw: bytes) -> ReportDelivery:
        if self.mode == "secure":
            env = SealedEnvelope.decode(raw)
            payload = self.opener.open(env, DIR_TO_CLIENT)
        else:
            payload = raw
        doc = json.loads(payload.decode("utf-8"))
        reports = [hrv.HrvReport.from_dict(d) for d in doc.get("reports", [])]
        return ReportDelivery(client_id=self.client_id,
                              request_sequence=doc.get("request_sequence"),
                              reports=reports, error=doc.get("error"))

    def _quarantine(self, path: Path, raw: bytes) -> None:
        self.quarantined += 1
        qdir = self.drop.quarantine(self.client_id)
        try:
            qdir.mkdir(parents=True, exist_ok=True)
            os.rename(path, qdir / path.name)
        except OSError:
            pass

    def _run(self) -> None:
        while not self._stop.is_set():
            self.poll_once()
            self._stop.wait(self.poll_interval_s)

    def drain(self) -> Iterator[ReportDelivery]:
        while True:
            try:
                yield self.deliveries.get_nowait()
            except queue.Empty:
                return
