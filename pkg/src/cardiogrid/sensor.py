"""Deterministic RR-interval stream generator emulating wearable sensors.

A stream is a sequence of activity phases; within each phase the interval is
the target-HR mean plus two sinusoidal modulations (one LF, one HF, so the
spectral analytics have structure to find) plus Gaussian jitter.  The seed
fully determines the emitted byte sequence regardless of pacing mode.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .hrv import RR_MAX_MS, RR_MIN_MS, RRSample


class Exhausted(Exception):
    """Cumulative stream time passed the total phase duration."""


class SinkClosed(Exception):
    """Raised by a sink to terminate the stream cleanly."""


@dataclass(frozen=True)
class Modulation:
    amplitude_ms: float = 0.0
    freq_hz: float = 0.1

    def __post_init__(self):
        if self.freq_hz <= 0:
            raise ValueError("modulation frequency must be > 0")


@dataclass(frozen=True)
class ActivityPhase:
    """One stretch of activity with a target heart rate and variability."""

    label: str
    duration_s: float
    target_hr_bpm: float
    rr_jitter_ms: float = 0.0
    lf_mod: Modulation = field(default_factory=Modulation)
    hf_mod: Modulation = field(default_factory=lambda: Modulation(0.0, 0.25))

    def __post_init__(self):
        if not (20 <= self.target_hr_bpm <= 300):
            raise ValueError(f"target_hr_bpm {self.target_hr_bpm} outside [20, 300]")
        if self.duration_s <= 0:
            raise ValueError("phase duration must be > 0")
        if self.rr_jitter_ms < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class SensorConfig:
    client_id: str
    seed: int
    phases: tuple[ActivityPhase, ...]
    pacing: str = "accelerated"  # realtime | accelerated

    def __post_init__(self):
        if not self.phases:
            raise ValueError("at least one phase required")
        if self.pacing not in ("realtime", "accelerated"):
            raise ValueError(f"unknown pacing {self.pacing!r}")

    @property
    def total_duration_s(self) -> float:
        return sum(p.duration_s for p in self.phases)


class RRGenerator:
    """Stateful per-client generator; one logical thread of control at a time."""

    def __init__(self, config: SensorConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._elapsed_ms = 0
        self._total_ms = int(round(config.total_duration_s * 1000))

    @property
    def elapsed_ms(self) -> int:
        return self._elapsed_ms

    def _phase_at(self, elapsed_s: float) -> ActivityPhase:
        acc = 0.0
        for phase in self.config.phases:
            acc += phase.duration_s
            if elapsed_s < acc:
                return phase
        return self.config.phases[-1]

    def next_sample(self) -> RRSample:
        """Emit the next sample; timestamp advances by exactly the interval."""
        if self._elapsed_ms >= self._total_ms:
            raise Exhausted(f"stream {self.config.client_id} complete at {self._elapsed_ms} ms")
        t_s = self._elapsed_ms / 1000.0
        phase = self._phase_at(t_s)
        rr = 60000.0 / phase.target_hr_bpm
        rr += phase.lf_mod.amplitude_ms * math.sin(2 * math.pi * phase.lf_mod.freq_hz * t_s)
        rr += phase.hf_mod.amplitude_ms * math.sin(2 * math.pi * phase.hf_mod.freq_hz * t_s)
        if phase.rr_jitter_ms > 0:
            rr += self._rng.normal(0.0, phase.rr_jitter_ms)
        rr_ms = int(min(max(round(rr), RR_MIN_MS), RR_MAX_MS))
        self._elapsed_ms += rr_ms
        return RRSample(client_id=self.config.client_id,
                        r_timestamp_ms=self._elapsed_ms,
                        rr_interval_ms=rr_ms)

    def __iter__(self) -> Iterator[RRSample]:
        while True:
            try:
                yield self.next_sample()
            except Exhausted:
                return


def stream(config: SensorConfig, sink: Callable[[RRSample], None],
           stop: Optional[Callable[[], bool]] = None) -> int:
    """Drive a generator into a sink; returns the number of samples delivered.

    Realtime pacing sleeps the RR interval between deliveries; accelerated
    pacing delivers as fast as the sink accepts.  A sink raising SinkClosed
    (or `stop()` returning True) terminates the stream cleanly.
    """
    gen = RRGenerator(config)
    delivered = 0
    for sample in gen:
        if stop is not None and stop():
            break
        if config.pacing == "realtime":
            time.sleep(sample.rr_interval_ms / 1000.0)
        try:
            sink(sample)
        except SinkClosed:
            break
        delivered += 1
    return delivered
