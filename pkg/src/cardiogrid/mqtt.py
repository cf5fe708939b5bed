"""Minimal MQTT 3.1.1 subset: genuine wire framing, QoS 0 only.

Implements just what the client package exercises: CONNECT/CONNACK,
single-filter SUBSCRIBE/SUBACK, PUBLISH, PINGREQ/PINGRESP, DISCONNECT.
No wildcards, retained messages, sessions, or auth.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

log = logging.getLogger(__name__)

MAX_REMAINING_LENGTH = 268_435_455  # 4-byte varint ceiling per MQTT 3.1.1


class MqttError(Exception):
    pass


class MalformedFrame(MqttError):
    """Bad remaining-length varint, truncated buffer, or field overrun."""


class UnsupportedFeature(MqttError):
    """QoS > 0, retained publish, or wildcard topic filter."""


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


@dataclass(frozen=True)
class MqttPacket:
    packet_type: PacketType
    flags: int = 0
    topic: Optional[str] = None      # PUBLISH topic / SUBSCRIBE filter
    payload: bytes = b""             # PUBLISH body
    packet_id: Optional[int] = None  # SUBSCRIBE / SUBACK
    client_id: Optional[str] = None  # CONNECT
    return_code: int = 0             # CONNACK / SUBACK


def encode_varint(n: int) -> bytes:
    if not (0 <= n <= MAX_REMAINING_LENGTH):
        raise MalformedFrame(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n > 0:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buf: bytes, offset: int) -> tuple[int, int]:
    """Returns (value, bytes consumed); raises on truncation or >4 bytes."""
    value = 0
    multiplier = 1
    for i in range(4):
        if offset + i >= len(buf):
            raise MalformedFrame("truncated remaining-length varint")
        byte = buf[offset + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    raise MalformedFrame("remaining-length varint longer than 4 bytes")


def _utf8_field(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedFrame("UTF-8 field too long")
    return struct.pack(">H", len(raw)) + raw


def _read_utf8(body: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(body):
        raise MalformedFrame("truncated UTF-8 length prefix")
    (n,) = struct.unpack(">H", body[offset:offset + 2])
    end = offset + 2 + n
    if end > len(body):
        raise MalformedFrame("truncated UTF-8 field")
    return body[offset + 2:end].decode("utf-8"), end


def _check_topic(topic: str, is_filter: bool) -> None:
    if not topic:
        raise MalformedFrame("empty topic")
    if "#" in topic or "+" in topic:
        kind = "filter" if is_filter else "topic"
        raise UnsupportedFeature(f"wildcards not supported in {kind} {topic!r}")


def encode_packet(p: MqttPacket) -> bytes:
    t = p.packet_type
    if t == PacketType.CONNECT:
        body = _utf8_field("MQTT") + bytes([4, 0x02]) + struct.pack(">H", 60)
        body += _utf8_field(p.client_id or "")
        flags = 0
    elif t == PacketType.CONNACK:
        body = bytes([0, p.return_code])
        flags = 0
    elif t == PacketType.PUBLISH:
        if p.flags & 0x06:
            raise UnsupportedFeature("QoS > 0 not supported")
        if p.flags & 0x09:
            raise UnsupportedFeature("DUP/RETAIN not supported")
        _check_topic(p.topic or "", is_filter=False)
        body = _utf8_field(p.topic) + p.payload
        flags = 0
    elif t == PacketType.SUBSCRIBE:
        _check_topic(p.topic or "", is_filter=True)
        body = struct.pack(">H", p.packet_id or 0) + _utf8_field(p.topic) + bytes([0])
        flags = 0x02
    elif t == PacketType.SUBACK:
        body = struct.pack(">H", p.packet_id or 0) + bytes([p.return_code])
        flags = 0
    elif t in (PacketType.PINGREQ, PacketType.PINGRESP, PacketType.DISCONNECT):
        body = b""
        flags = 0
    else:
        raise UnsupportedFeature(f"packet type {t} not supported")
    return bytes([(t << 4) | flags]) + encode_varint(len(body)) + body


def decode_packet(raw: bytes) -> MqttPacket:
    """Decode one complete frame; decode(encode(p)) == p for supported packets."""
    packet, consumed = decode_frame(raw)
    if packet is None:
        raise MalformedFrame("incomplete frame")
    if consumed != len(raw):
        raise MalformedFrame(f"{len(raw) - consumed} trailing bytes after frame")
    return packet


def decode_frame(buf: bytes) -> tuple[Optional[MqttPacket], int]:
    """Try to decode one frame from the head of buf.

    Returns (packet, bytes_consumed), or (None, 0) if the buffer does not yet
    hold a complete frame.  Raises MalformedFrame/UnsupportedFeature on bad
    input; callers close the connection on either.
    """
    if len(buf) < 2:
        return None, 0
    first = buf[0]
    type_code = first >> 4
    flags = first & 0x0F
    try:
        ptype = PacketType(type_code)
    except ValueError:
        raise MalformedFrame(f"unknown packet type {type_code}") from None
    try:
        remaining, varint_len = decode_varint(buf, 1)
    except MalformedFrame:
        if len(buf) < 5 and all(b & 0x80 for b in buf[1:]):
            return None, 0  # varint may still be arriving
        raise
    total = 1 + varint_len + remaining
    if len(buf) < total:
        return None, 0
    body = bytes(buf[1 + varint_len:total])

    if ptype == PacketType.CONNECT:
        proto, off = _read_utf8(body, 0)
        if proto != "MQTT":
            raise MalformedFrame(f"unexpected protocol name {proto!r}")
        if off + 4 > len(body):
            raise MalformedFrame("truncated CONNECT variable header")
        level = body[off]
        if level != 4:
            raise UnsupportedFeature(f"protocol level {level} not supported")
        connect_flags = body[off + 1]
        if connect_flags & 0xFC:
            raise UnsupportedFeature("will/auth connect flags not supported")
        client_id, off = _read_utf8(body, off + 4)
        return MqttPacket(ptype, client_id=client_id), total
    if ptype == PacketType.CONNACK:
        if len(body) != 2:
            raise MalformedFrame("CONNACK body must be 2 bytes")
        return MqttPacket(ptype, return_code=body[1]), total
    if ptype == PacketType.PUBLISH:
        if flags & 0x06:
            raise UnsupportedFeature("QoS > 0 not supported")
        if flags & 0x09:
            raise UnsupportedFeature("DUP/RETAIN not supported")
        topic, off = _read_utf8(body, 0)
        _check_topic(topic, is_filter=False)
        return MqttPacket(ptype, topic=topic, payload=body[off:]), total
    if ptype == PacketType.SUBSCRIBE:
        if flags != 0x02:
            raise MalformedFrame("SUBSCRIBE flags must be 0b0010")
        if len(body) < 2:
            raise MalformedFrame("truncated SUBSCRIBE")
        (packet_id,) = struct.unpack(">H", body[:2])
        topic, off = _read_utf8(body, 2)
        if off >= len(body):
            raise MalformedFrame("SUBSCRIBE missing requested QoS")
        if body[off] != 0:
            raise UnsupportedFeature("QoS > 0 not supported")
        if off + 1 != len(body):
            raise UnsupportedFeature("multiple filters per SUBSCRIBE not supported")
        return MqttPacket(ptype, flags=0x02, topic=topic, packet_id=packet_id), total
    if ptype == PacketType.SUBACK:
        if len(body) != 3:
            raise MalformedFrame("SUBACK body must be 3 bytes")
        (packet_id,) = struct.unpack(">H", body[:2])
        return MqttPacket(ptype, packet_id=packet_id, return_code=body[2]), total
    if ptype in (PacketType.PINGREQ, PacketType.PINGRESP, PacketType.DISCONNECT):
        if body:
            raise MalformedFrame(f"{ptype.name} carries no body")
        return MqttPacket(ptype), total
    raise UnsupportedFeature(f"packet type {ptype} not supported")


class _Subscriber:
    def __init__(self, conn: socket.socket, queue_depth: int):
        self.conn = conn
        self.queue: queue.Queue[bytes] = queue.Queue(maxsize=queue_depth)
        self.dropped = 0
        self.closed = threading.Event()

    def offer(self, frame: bytes) -> None:
        try:
            self.queue.put_nowait(frame)
        except queue.Full:
            self.dropped += 1


class Broker:
    """Exact-topic-match QoS 0 broker; per-connection isolation.

    Slow subscribers get a bounded queue; overflow drops the message for that
    subscriber instead of buffering without bound.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 1883,
                 queue_depth: int = 1000):
        self.host = host
        self.port = port
        self.queue_depth = queue_depth
        self._sock: Optional[socket.socket] = None
        self._subs: dict[str, list[_Subscriber]] = {}
        self._subs_lock = threading.Lock()
        self._running = threading.Event()
        self._threads: list[threading.Thread] = []
        self.published = 0
        self.delivered = 0
        self.dropped = 0

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(256)
        self.port = sock.getsockname()[1]
        self._sock = sock
        self._running.set()
        t = threading.Thread(target=self._accept_loop, name="mqtt-broker", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("broker listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        self._running.clear()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        with self._subs_lock:
            subs = [s for lst in self._subs.values() for s in lst]
            self._subs.clear()
        for s in subs:
            s.closed.set()
            try:
                s.conn.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while self._running.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_connection, args=(conn, addr),
                                 daemon=True)
            t.start()

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        buf = bytearray()
        subscriber: Optional[_Subscriber] = None
        writer: Optional[threading.Thread] = None
        try:
            while self._running.is_set():
                try:
                    packet, consumed = decode_frame(bytes(buf))
                except MqttError as exc:
                    log.warning("closing %s: %s", addr, exc)
                    return
                if packet is None:
                    chunk = conn.recv(65536)
                    if not chunk:
                        return
                    buf.extend(chunk)
                    continue
                del buf[:consumed]

                if packet.packet_type == PacketType.CONNECT:
                    conn.sendall(encode_packet(MqttPacket(PacketType.CONNACK)))
                elif packet.packet_type == PacketType.PINGREQ:
                    conn.sendall(encode_packet(MqttPacket(PacketType.PINGRESP)))
                elif packet.packet_type == PacketType.PUBLISH:
                    self.published += 1
                    self._route(packet)
                elif packet.packet_type == PacketType.SUBSCRIBE:
                    if subscriber is None:
                        subscriber = _Subscriber(conn, self.queue_depth)
                        writer = threading.Thread(target=self._drain,
                                                  args=(subscriber,), daemon=True)
                        writer.start()
                    with self._subs_lock:
                        self._subs.setdefault(packet.topic, []).append(subscriber)
                    conn.sendall(encode_packet(MqttPacket(
                        PacketType.SUBACK, packet_id=packet.packet_id)))
                elif packet.packet_type == PacketType.DISCONNECT:
                    return
        except OSError:
            return
        finally:
            if subscriber is not None:
                subscriber.closed.set()
                with self._subs_lock:
                    for lst in self._subs.values():
                        if subscriber in lst:
                            lst.remove(subscriber)
                self.dropped += subscriber.dropped
            try:
                conn.close()
            except OSError:
                pass

    def _route(self, packet: MqttPacket) -> None:
        frame = encode_packet(packet)
        with self._subs_lock:
            targets = list(self._subs.get(packet.topic, ()))
        for sub in targets:
            sub.offer(frame)

    def _drain(self, sub: _Subscriber) -> None:
        while not sub.closed.is_set():
            try:
                frame = sub.queue.get(timeout=0.25)
            except queue.Empty:
                continue
            try:
                sub.conn.sendall(frame)
                self.delivered += 1
            except OSError:
                sub.closed.set()
                return


class MqttClient:
    """Blocking QoS 0 client: connect, publish, subscribe with a callback."""

    def __init__(self, host: str, port: int, client_id: str):
        self.host = host
        self.port = port
        self.client_id = client_id
        self._sock: Optional[socket.socket] = None
        self._callbacks: dict[str, Callable[[str, bytes], None]] = {}
        self._packet_id = 0
        self._reader: Optional[threading.Thread] = None
        self._suback = queue.Queue()
        self._closed = threading.Event()
        self._send_lock = threading.Lock()

    def connect(self, timeout: float = 5.0) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=timeout)
        sock.settimeout(timeout)
        self._sock = sock
        self._send(MqttPacket(PacketType.CONNECT, client_id=self.client_id))
        buf = bytearray()
        while True:
            packet, consumed = decode_frame(bytes(buf))
            if packet is not None:
                break
            buf.extend(sock.recv(4096))
        if packet.packet_type != PacketType.CONNACK or packet.return_code != 0:
            raise MqttError(f"connect refused: {packet}")
        sock.settimeout(0.25)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _send(self, packet: MqttPacket) -> None:
        if self._sock is None:
            raise MqttError("not connected")
        with self._send_lock:
            self._sock.sendall(encode_packet(packet))

    def publish(self, topic: str, payload: bytes) -> None:
        self._send(MqttPacket(PacketType.PUBLISH, topic=topic, payload=payload))

    def subscribe(self, topic: str, callback: Callable[[str, bytes], None],
                  timeout: float = 5.0) -> None:
        self._callbacks[topic] = callback
        self._packet_id += 1
        self._send(MqttPacket(PacketType.SUBSCRIBE, flags=0x02, topic=topic,
                              packet_id=self._packet_id))
        try:
            self._suback.get(timeout=timeout)
        except queue.Empty:
            raise MqttError(f"no SUBACK for {topic!r}") from None

    def _read_loop(self) -> None:
        buf = bytearray()
        while not self._closed.is_set() and self._sock is not None:
            try:
                packet, consumed = decode_frame(bytes(buf))
            except MqttError:
                return
            if packet is None:
                try:
                    chunk = self._sock.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not chunk:
                    return
                buf.extend(chunk)
                continue
            del buf[:consumed]
            if packet.packet_type == PacketType.PUBLISH:
                cb = self._callbacks.get(packet.topic)
                if cb is not None:
                    cb(packet.topic, packet.payload)
            elif packet.packet_type == PacketType.SUBACK:
                self._suback.put(packet)

    def disconnect(self) -> None:
        self._closed.set()
        if self._sock is not None:
            try:
                self._send(MqttPacket(PacketType.DISCONNECT))
            except (OSError, MqttError):
                pass
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
