"""Process-isolated trusted boundary: sealed batches in, sealed reports out.

The boundary runs as a separate OS process reachable only through a local
byte-stream of length-prefixed messages (ATTEST / PROCESS / SHUTDOWN).
Plaintext RR data exists solely inside this process.  An overhead model
emulates transition and memory-encryption costs so secure-vs-plain
benchmarking is meaningful on hardware without a real TEE.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import queue
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import hrv, secure
from .gateway import BatchRecord
from .hrv import DEFAULT_BANDS, DEFAULT_GRID, FrequencyBands, HrvReport, SpectralGrid
from .secure import (
    DIR_TO_CLIENT,
    DIR_TO_ENCLAVE,
    EnvelopeOpener,
    SealedEnvelope,
    SealingContext,
)

log = logging.getLogger(__name__)

OP_ATTEST = 0x01
OP_PROCESS = 0x02
OP_SHUTDOWN = 0x03
OP_ATTEST_REPLY = 0x81
OP_PROCESS_REPLY = 0x82

STATUS_OK = 0x00
STATUS_FAILED = 0x01

ANALYTIC_LIST = "identity,sdnn,mean_hr,band_powers"


class ParseFailure(Exception):
    """Batch payload could not be parsed as a batch record."""


class SpawnFailure(Exception):
    """Boundary process could not be started."""


class BoundaryDown(Exception):
    """The channel to the boundary process broke."""


@dataclass(frozen=True)
class PipelineConfig:
    """Identity-bearing analytics configuration of the boundary."""

    version: str = "1"
    bands: FrequencyBands = DEFAULT_BANDS
    grid: SpectralGrid = DEFAULT_GRID

    def measurement(self) -> bytes:
        """32-byte hash over version, band/grid config and the analytic list.

        Any change to the pipeline configuration changes this value.
        """
        canon = (f"cardiogrid-pipeline|v={self.version}|{self.bands.canonical()}|"
                 f"{self.grid.canonical()}|analytics={ANALYTIC_LIST}")
        return hashlib.sha256(canon.encode("ascii")).digest()


@dataclass(frozen=True)
class OverheadModel:
    """Emulated boundary-crossing cost: fixed per call plus per KiB moved."""

    per_call_ms: float = 0.0
    per_kb_ms: float = 0.0

    def __post_init__(self):
        if self.per_call_ms < 0 or self.per_kb_ms < 0:
            raise ValueError("overhead components must be >= 0")

    def crossing_s(self, n_bytes: int) -> float:
        return (self.per_call_ms + self.per_kb_ms * n_bytes / 1024.0) / 1000.0


def analyze_batch(record: BatchRecord, bands: FrequencyBands,
                  grid: SpectralGrid) -> tuple[list[HrvReport], int]:
    """Window a batch and run the analytics pipeline over it.

    Analysis granularity is the gateway flush: one window per client per
    batch.  Lines failing sample validation are skipped and counted.
    Returns ([], skipped) for batches with no valid samples.
    """
    valid: list[tuple[int, int]] = []
    skipped = 0
    last_t: Optional[int] = None
    for t, rr in record.lines:
        try:
            hrv.validate_sample(record.client_id, t, rr, last_t)
        except hrv.HrvError:
            skipped += 1
            continue
        valid.append((t, rr))
        last_t = t
    if not valid:
        return [], skipped
    window = hrv.identity(hrv.window_from_pairs(record.client_id, valid))
    return [hrv.analyze(window, bands, grid)], skipped


def plain_process_batch(raw: bytes, bands: FrequencyBands = DEFAULT_BANDS,
                        grid: SpectralGrid = DEFAULT_GRID) -> dict:
    """Baseline path: identical analytics, no sealing, no boundary crossing.

    Raises ParseFailure when the payload is not a batch record.
    """
    try:
        record, malformed = BatchRecord.parse(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseFailure(str(exc)) from exc
    reports, invalid = analyze_batch(record, bands, grid)
    return {
        "reports": [r.to_dict() for r in reports],
        "skipped_lines": malformed + invalid,
    }


# ---------------------------------------------------------------------------
# Length-prefixed framing: 4-byte big-endian length | 1-byte opcode | body.


def pack_frame(opcode: int, body: bytes) -> bytes:
    return struct.pack(">I", 1 + len(body)) + bytes([opcode]) + body


def read_frame(sock: socket.socket) -> Optional[tuple[int, bytes]]:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (n,) = struct.unpack(">I", header)
    if n < 1:
        return None
    frame = _recv_exact(sock, n)
    if frame is None:
        return None
    return frame[0], frame[1:]


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


# ---------------------------------------------------------------------------
# Boundary process internals (run inside the child).


class _KeySlot:
    def __init__(self, session: secure.SessionKey):
        self.session = session
        self.reply_sealer: Optional[SealingContext] = None

    def sealer_for(self, cid_hash: bytes) -> SealingContext:
        if self.reply_sealer is None:
            self.reply_sealer = SealingContext(self.session, cid_hash, DIR_TO_CLIENT)
        return self.reply_sealer


class BoundaryCore:
    """Message handlers for the trusted side; serial by construction."""

    def __init__(self, pipeline: PipelineConfig, root_private: bytes,
                 overhead: OverheadModel):
        self.pipeline = pipeline
        self.measurement = pipeline.measurement()
        self.root_private = root_private
        self.overhead = overhead
        self.opener = EnvelopeOpener()
        self._slots: dict[bytes, _KeySlot] = {}
        self.processed = 0
        self.failed = 0

    def handle_attest(self, body: bytes) -> bytes:
        if len(body) != 48:
            raise ValueError(f"ATTEST body must be nonce(16)+pubkey(32), got {len(body)}")
        nonce, verifier_pub = body[:16], body[16:48]
        quote, session = secure.attest(self.root_private, self.measurement,
                                       nonce, verifier_pub)
        self.opener.add_key(session)
        self._slots[session.key_id] = _KeySlot(session)
        return quote.encode()

    def handle_process(self, body: bytes) -> bytes:
        self._cross(len(body))
        reply = self._process(body)
        self._cross(len(reply))
        return reply

    def _cross(self, n_bytes: int) -> None:
        delay = self.overhead.crossing_s(n_bytes)
        if delay > 0:
            time.sleep(delay)

    def _process(self, body: bytes) -> bytes:
        try:
            env = SealedEnvelope.decode(body)
        except secure.MalformedEnvelope:
            self.failed += 1
            return bytes([STATUS_FAILED])
        slot = self._slots.get(env.key_id)
        if slot is None:
            # No session for this key: nothing to seal a readable error under.
            self.failed += 1
            return bytes([STATUS_FAILED])
        sealer = slot.sealer_for(env.client_id_hash)
        try:
            payload = self.opener.open(env, DIR_TO_ENCLAVE)
        except secure.SecureChannelError as exc:
            return self._sealed_error(sealer, env.sequence, type(exc).__name__)
        try:
            doc = self._analyze(payload, env)
        except ParseFailure:
            return self._sealed_error(sealer, env.sequence, "ParseFailure")
        doc["request_sequence"] = env.sequence
        reply_env = sealer.seal(json.dumps(doc, sort_keys=True).encode("utf-8"))
        self.processed += 1
        return bytes([STATUS_OK]) + reply_env.encode()

    def _analyze(self, payload: bytes, env: SealedEnvelope) -> dict:
        try:
            record, malformed = BatchRecord.parse(payload)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ParseFailure(str(exc)) from exc
        if secure.client_id_hash(record.client_id) != env.client_id_hash:
            raise ParseFailure("client id does not match envelope binding")
        reports, invalid = analyze_batch(record, self.pipeline.bands, self.pipeline.grid)
        return {
            "reports": [r.to_dict() for r in reports],
            "skipped_lines": malformed + invalid,
        }

    def _sealed_error(self, sealer: SealingContext, request_seq: int,
                      detail: str) -> bytes:
        # The host sees only an opaque sealed blob; the client sees the detail.
        self.failed += 1
        doc = {"request_sequence": request_seq, "error": "processing-failed",
               "detail": detail, "reports": []}
        env = sealer.seal(json.dumps(doc, sort_keys=True).encode("utf-8"))
        return bytes([STATUS_OK]) + env.encode()


@dataclass
class EnclaveConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    overhead: OverheadModel = field(default_factory=OverheadModel)
    root_key_path: str = ""
    host: str = "127.0.0.1"
    port: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "version": self.pipeline.version,
            "vlf": list(self.pipeline.bands.vlf),
            "lf": list(self.pipeline.bands.lf),
            "hf": list(self.pipeline.bands.hf),
            "grid": [self.pipeline.grid.f_min, self.pipeline.grid.f_max,
                     self.pipeline.grid.step],
            "per_call_ms": self.overhead.per_call_ms,
            "per_kb_ms": self.overhead.per_kb_ms,
            "root_key_path": self.root_key_path,
            "host": self.host,
            "port": self.port,
        })

    @classmethod
    def from_json(cls, text: str) -> "EnclaveConfig":
        d = json.loads(text)
        pipeline = PipelineConfig(
            version=d["version"],
            bands=FrequencyBands(vlf=tuple(d["vlf"]), lf=tuple(d["lf"]),
                                 hf=tuple(d["hf"])),
            grid=SpectralGrid(*d["grid"]),
        )
        overhead = OverheadModel(per_call_ms=d["per_call_ms"], per_kb_ms=d["per_kb_ms"])
        return cls(pipeline=pipeline, overhead=overhead,
                   root_key_path=d["root_key_path"], host=d["host"], port=d["port"])


def serve(config: EnclaveConfig, ready: Optional[Callable[[int, bytes], None]] = None) -> int:
    """Run the boundary listener until a SHUTDOWN message arrives.

    Connections are accepted concurrently but requests are processed by a
    single worker in arrival order, so replies are FIFO per the request
    stream.  Returns the process exit code.
    """
    root_private = bytes.fromhex(Path(config.root_key_path).read_text().strip())
    core = BoundaryCore(config.pipeline, root_private, config.overhead)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((config.host, config.port))
    listener.listen(16)
    port = listener.getsockname()[1]
    if ready is not None:
        ready(port, core.measurement)

    requests: "queue.Queue[tuple[socket.socket, int, bytes]]" = queue.Queue()
    shutdown = threading.Event()

    def reader(conn: socket.socket) -> None:
        while not shutdown.is_set():
            frame = read_frame(conn)
            if frame is None:
                break
            requests.put((conn, frame[0], frame[1]))

    def acceptor() -> None:
        while not shutdown.is_set():
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            threading.Thread(target=reader, args=(conn,), daemon=True).start()

    threading.Thread(target=acceptor, daemon=True).start()

    while True:
        try:
            conn, opcode, body = requests.get(timeout=0.25)
        except queue.Empty:
            continue
        if opcode == OP_SHUTDOWN:
            shutdown.set()
            listener.close()
            try:
                conn.close()
            except OSError:
                pass
            log.info("boundary shutting down (processed=%d failed=%d)",
                     core.processed, core.failed)
            return 0
        try:
            if opcode == OP_ATTEST:
                reply = pack_frame(OP_ATTEST_REPLY, core.handle_attest(body))
            elif opcode == OP_PROCESS:
                reply = pack_frame(OP_PROCESS_REPLY, core.handle_process(body))
            else:
                log.warning("unknown opcode 0x%02x", opcode)
                continue
        except Exception as exc:  # noqa: BLE001 -- boundary must not die per request
            log.warning("request failed: %s", type(exc).__name__)
            reply = pack_frame(OP_PROCESS_REPLY, bytes([STATUS_FAILED]))
        try:
            conn.sendall(reply)
        except OSError:
            pass


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cardiogrid-enclave")
    parser.add_argument("--config-json", required=True,
                        help="path to the boundary JSON config")
    args = parser.parse_args(argv)
    config = EnclaveConfig.from_json(Path(args.config_json).read_text())

    def announce(port: int, measurement: bytes) -> None:
        print(f"ENCLAVE-READY port={port} measurement={measurement.hex()}", flush=True)

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s enclave %(levelname)s %(message)s")
    return serve(config, ready=announce)


# ---------------------------------------------------------------------------
# Host-side handle.


class BoundaryChannel:
    """One byte-stream to the boundary; request/reply, thread-safe."""

    def __init__(self, host: str, port: int, timeout: Optional[float] = None,
                 tap: Optional[Callable[[str, bytes], None]] = None):
        self._sock = socket.create_connection((host, port), timeout=5.0)
        self._sock.settimeout(timeout)
        self._lock = threading.Lock()
        self._tap = tap

    def request(self, opcode: int, body: bytes) -> tuple[int, bytes]:
        frame = pack_frame(opcode, body)
        with self._lock:
            if self._tap is not None:
                self._tap("out", frame)
            try:
                self._sock.sendall(frame)
                reply = read_frame(self._sock)
            except OSError as exc:
                raise BoundaryDown(str(exc)) from exc
            if reply is None:
                raise BoundaryDown("boundary closed the channel")
            if self._tap is not None:
                self._tap("in", pack_frame(reply[0], reply[1]))
            return reply

    def attest(self, challenge_nonce: bytes, verifier_pub: bytes) -> secure.AttestationQuote:
        op, body = self.request(OP_ATTEST, challenge_nonce + verifier_pub)
        if op != OP_ATTEST_REPLY:
            raise BoundaryDown(f"unexpected reply opcode 0x{op:02x}")
        return secure.AttestationQuote.decode(body)

    def process(self, envelope_bytes: bytes) -> tuple[int, bytes]:
        """Returns (status, reply envelope bytes); reply is empty on failure."""
        op, body = self.request(OP_PROCESS, envelope_bytes)
        if op != OP_PROCESS_REPLY or not body:
            raise BoundaryDown(f"malformed PROCESS reply (op=0x{op:02x})")
        return body[0], body[1:]

    def send_shutdown(self) -> None:
        try:
            with self._lock:
                self._sock.sendall(pack_frame(OP_SHUTDOWN, b""))
        except OSError:
            pass

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class BoundaryProcess:
    """Spawns and owns the boundary child process."""

    def __init__(self, config: EnclaveConfig, spawn_timeout: float = 10.0):
        self.config = config
        self.expected_measurement = config.pipeline.measurement()
        self._config_path: Optional[Path] = None
        self.port: Optional[int] = None
        self.proc: Optional[subprocess.Popen] = None
        self._spawn(spawn_timeout)

    def _spawn(self, timeout: float) -> None:
        import tempfile

        fd, path = tempfile.mkstemp(prefix="cardiogrid-enclave-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            fh.write(self.config.to_json())
        self._config_path = Path(path)
        cmd = [sys.executable, "-m", "cardiogrid.enclave", "--config-json", path]
        try:
            self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
        except OSError as exc:
            raise SpawnFailure(str(exc)) from exc
        deadline = time.monotonic() + timeout
        line = ""
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if line.startswith("ENCLAVE-READY"):
                break
            if self.proc.poll() is not None:
                raise SpawnFailure(f"boundary exited {self.proc.returncode} before ready")
        if not line.startswith("ENCLAVE-READY"):
            self.terminate()
            raise SpawnFailure("boundary did not announce readiness in time")
        fields = dict(part.split("=", 1) for part in line.split()[1:])
        self.port = int(fields["port"])
        announced = bytes.fromhex(fields["measurement"])
        if announced != self.expected_measurement:
            self.terminate()
            raise SpawnFailure("boundary announced an unexpected measurement")

    def connect(self, timeout: Optional[float] = None,
                tap: Optional[Callable[[str, bytes], None]] = None) -> BoundaryChannel:
        assert self.port is not None
        return BoundaryChannel(self.config.host, self.port, timeout=timeout, tap=tap)

    def shutdown(self, timeout: float = 5.0) -> Optional[int]:
        if self.proc is None:
            return None
        try:
            chan = self.connect(timeout=2.0)
            chan.send_shutdown()
            chan.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            self.terminate()
        self._cleanup()
        return self.proc.returncode

    def terminate(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=5.0)
        self._cleanup()

    def _cleanup(self) -> None:
        if self._config_path is not None and self._config_path.exists():
            try:
                self._config_path.unlink()
            except OSError:
                pass


def establish_session(channel: BoundaryChannel, client_id: str,
                      expected_measurement: bytes, root_public: bytes
                      ) -> tuple[secure.SessionKey, SealingContext, EnvelopeOpener]:
    """Client-side attestation: verify the boundary, derive the session key."""
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    verifier_priv = X25519PrivateKey.generate()
    verifier_pub = verifier_priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    nonce = secure.new_challenge()
    quote = channel.attest(nonce, verifier_pub)
    session = secure.verify_quote(quote, expected_measurement, nonce,
                                  root_public, verifier_priv)
    sealer = SealingContext(session, secure.client_id_hash(client_id), DIR_TO_ENCLAVE)
    opener = EnvelopeOpener()
    opener.add_key(session)
    return session, sealer, opener


if __name__ == "__main__":
    sys.exit(main())
