"""The full client package: sensor, broker link, aggregation, sealed exchange.

Wires one client's five services together: the sensor publishes samples to
the broker on `sensors/<client_id>/rr`, the subscriber aggregates them into
batch records, the producer attests the boundary and deposits sealed
envelopes, and the consumer polls the inbox for processed reports.
"""

from __future__ import annotations

import logging
import threading
import time
from pathlib import Path
from typing import Callable, Optional

from . import sensor as sensor_mod
from .enclave import BoundaryChannel, PipelineConfig, establish_session
from .gateway import (
    Aggregator,
    Consumer,
    DropBox,
    Producer,
    ReportDelivery,
)
from .mqtt import MqttClient
from .sensor import RRSample, SensorConfig, SinkClosed

log = logging.getLogger(__name__)

# Reference point from the architecture's deployment: expected per-client
# outbound rate over the gateway-server link, bytes/second.
WIRE_RATE_REFERENCE_BPS = (230.0, 690.0)


def topic_for(client_id: str) -> str:
    return f"sensors/{client_id}/rr"


def sample_payload(sample: RRSample) -> bytes:
    return f"{sample.r_timestamp_ms},{sample.rr_interval_ms}".encode("ascii")


class ClientPackage:
    """One client's gateway-side services, runnable in-process.

    In secure mode the producer refuses to start until the boundary has been
    attested against the expected pipeline measurement.
    """

    def __init__(self, sensor_config: SensorConfig, drop_root: Path,
                 broker_host: str, broker_port: int, mode: str = "secure",
                 enclave_addr: Optional[tuple[str, int]] = None,
                 root_public: Optional[bytes] = None,
                 pipeline: Optional[PipelineConfig] = None,
                 flush_interval_s: float = 5.0, max_lines: int = 64,
                 on_delivery: Optional[Callable[[ReportDelivery], None]] = None):
        if mode == "secure" and (enclave_addr is None or root_public is None):
            raise ValueError("secure mode needs the enclave address and root key")
        self.sensor_config = sensor_config
        self.client_id = sensor_config.client_id
        self.mode = mode
        self.drop = DropBox(drop_root)
        self.broker_host = broker_host
        self.broker_port = broker_port
        self.enclave_addr = enclave_addr
        self.root_public = root_public
        self.pipeline = pipeline or PipelineConfig()
        self.on_delivery = on_delivery
        self.flush_interval_s = flush_interval_s
        self.max_lines = max_lines

        self.session = None
        self.producer: Optional[Producer] = None
        self.consumer: Optional[Consumer] = None
        self.aggregator: Optional[Aggregator] = None
        self._pub: Optional[MqttClient] = None
        self._sub: Optional[MqttClient] = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self.sensor_delivered = 0

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        sealer = opener = None
        if self.mode == "secure":
            channel = BoundaryChannel(*self.enclave_addr, timeout=10.0)
            try:
                self.session, sealer, opener = establish_session(
                    channel, self.client_id, self.pipeline.measurement(),
                    self.root_public)
            finally:
                channel.close()
            log.info("client %s attested boundary, key %s", self.client_id,
                     self.session.key_id.hex()[:8])

        self.producer = Producer(self.drop, self.client_id, mode=self.mode,
                                 sealer=sealer)
        self.consumer = Consumer(self.drop, self.client_id, mode=self.mode,
                                 opener=opener, on_delivery=self.on_delivery)
        self.aggregator = Aggregator(self.client_id, self.producer.submit,
                                     flush_interval_s=self.flush_interval_s,
                                     max_lines=self.max_lines)

        self._sub = MqttClient(self.broker_host, self.broker_port,
                               client_id=f"{self.client_id}-sub")
        self._sub.connect()
        self._sub.subscribe(topic_for(self.client_id),
                            lambda _topic, payload: self.aggregator.add_payload(payload))

        self._pub = MqttClient(self.broker_host, self.broker_port,
                               client_id=f"{self.client_id}-pub")
        self._pub.connect()

        self.producer.start()
        self.consumer.start()

        t = threading.Thread(target=self._sensor_loop, daemon=True,
                             name=f"sensor-{self.client_id[:8]}")
        t.start()
        self._threads.append(t)
        t = threading.Thread(target=self._flush_loop, daemon=True,
                             name=f"aggregate-{self.client_id[:8]}")
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=3.0)
        if self.aggregator is not None:
            self.aggregator.flush()
        if self.producer is not None:
            self.producer.stop()
        if self.consumer is not None:
            self.consumer.stop()
        for c in (self._pub, self._sub):
            if c is not None:
                c.disconnect()
        self._report_wire_rate()

    # -- internals -----------------------------------------------------------

    def _sensor_loop(self) -> None:
        def sink(sample: RRSample) -> None:
            if self._stop.is_set():
                raise SinkClosed()
            self._pub.publish(topic_for(self.client_id), sample_payload(sample))

        self.sensor_delivered = sensor_mod.stream(
            self.sensor_config, sink, stop=self._stop.is_set)

    def _flush_loop(self) -> None:
        while not self._stop.wait(0.1):
            self.aggregator.poll()

    def _report_wire_rate(self) -> None:
        if self.producer is None:
            return
        rate = self.producer.outbound_rate_bps()
        if rate is None:
            return
        lo, hi = WIRE_RATE_REFERENCE_BPS
        if lo <= rate <= hi:
            log.info("client %s outbound rate %.0f B/s (within the %d-%d "
                     "reference range)", self.client_id, rate, lo, hi)
        else:
            log.warning("client %s outbound rate %.0f B/s outside the "
                        "%d-%d B/s reference range", self.client_id, rate, lo, hi)
