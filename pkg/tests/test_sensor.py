"""Generator determinism, moment tracking, pacing contracts."""

import time

import numpy as np
import pytest

from cardiogrid import hrv, sensor
from cardiogrid.sensor import (
    ActivityPhase,
    Exhausted,
    Modulation,
    RRGenerator,
    SensorConfig,
    SinkClosed,
    stream,
)


def steady_config(client="c1", seed=7, hr=60.0, jitter=0.0, duration=120.0,
                  pacing="accelerated", lf=None, hf=None):
    phase = ActivityPhase(label="steady", duration_s=duration, target_hr_bpm=hr,
                          rr_jitter_ms=jitter,
                          lf_mod=lf or Modulation(),
                          hf_mod=hf or Modulation(0.0, 0.25))
    return SensorConfig(client_id=client, seed=seed, phases=(phase,), pacing=pacing)


class TestNextSample:
    def test_deterministic_mean_without_noise(self):
        gen = RRGenerator(steady_config(hr=60.0, duration=10.0))
        stamps = [gen.next_sample() for _ in range(5)]
        assert [s.rr_interval_ms for s in stamps] == [1000] * 5
        assert [s.r_timestamp_ms for s in stamps] == [1000, 2000, 3000, 4000, 5000]

    def test_same_seed_bit_identical(self):
        cfg = steady_config(seed=99, jitter=30.0, duration=300.0)
        a = [s for s in RRGenerator(cfg)]
        b = [s for s in RRGenerator(cfg)]
        assert a == b

    def test_different_seeds_differ(self):
        a = list(RRGenerator(steady_config(seed=1, jitter=30.0, duration=60.0)))
        b = list(RRGenerator(steady_config(seed=2, jitter=30.0, duration=60.0)))
        assert a != b

    def test_empirical_moments(self):
        # 10k samples at 75 bpm, jitter 25 ms: mean within 1% of 800 ms,
        # std within 10% of 25 ms
        cfg = steady_config(hr=75.0, jitter=25.0, duration=9_000.0, seed=5)
        gen = RRGenerator(cfg)
        rr = np.array([gen.next_sample().rr_interval_ms for _ in range(10_000)])
        assert abs(rr.mean() - 800.0) <= 8.0
        assert abs(rr.std(ddof=1) - 25.0) <= 2.5

    def test_exhaustion(self):
        gen = RRGenerator(steady_config(hr=60.0, duration=3.0))
        for _ in range(3):
            gen.next_sample()
        with pytest.raises(Exhausted):
            gen.next_sample()

    def test_phase_switching_changes_rate(self):
        phases = (
            ActivityPhase(label="sedentary", duration_s=10.0, target_hr_bpm=60.0),
            ActivityPhase(label="run", duration_s=10.0, target_hr_bpm=150.0),
        )
        gen = RRGenerator(SensorConfig(client_id="c1", seed=1, phases=phases))
        samples = list(gen)
        early = [s.rr_interval_ms for s in samples if s.r_timestamp_ms <= 10_000]
        late = [s.rr_interval_ms for s in samples if s.r_timestamp_ms > 10_400]
        assert all(rr == 1000 for rr in early)
        assert all(rr == 400 for rr in late)

    def test_emitted_stream_satisfies_sample_invariants(self):
        cfg = steady_config(jitter=200.0, hr=290.0, duration=120.0, seed=11)
        last_t = None
        for s in RRGenerator(cfg):
            checked = hrv.validate_sample(s.client_id, s.r_timestamp_ms,
                                          s.rr_interval_ms, last_t)
            assert checked.rr_interval_ms == s.rr_interval_ms
            if last_t is not None:
                assert s.r_timestamp_ms - last_t == s.rr_interval_ms
            last_t = s.r_timestamp_ms

    @pytest.mark.parametrize("hr", [60.0, 120.0, 180.0])
    def test_rate_envelope_1_to_3_hz(self, hr):
        cfg = steady_config(hr=hr, jitter=20.0, duration=600.0, seed=3)
        samples = list(RRGenerator(cfg))
        span_s = samples[-1].r_timestamp_ms / 1000.0
        rate = len(samples) / span_s
        assert 1.0 - 0.05 <= rate <= 3.0 + 0.05
        assert rate == pytest.approx(hr / 60.0, rel=0.05)


class TestStream:
    def test_accelerated_20min_stream_is_fast(self):
        cfg = steady_config(duration=1200.0, jitter=10.0)
        received = []
        t0 = time.monotonic()
        delivered = stream(cfg, received.append)
        assert time.monotonic() - t0 < 5.0
        assert delivered == len(received) >= 1100

    def test_realtime_pacing_delivery_count(self):
        # ~1 Hz for 3 s of stream time: expect 2-4 samples delivered
        cfg = steady_config(duration=3.0, pacing="realtime")
        received = []
        stream(cfg, received.append)
        assert 2 <= len(received) <= 4

    def test_sink_closed_stops_stream(self):
        cfg = steady_config(duration=1200.0)
        received = []

        def sink(sample):
            if len(received) >= 10:
                raise SinkClosed()
            received.append(sample)

        delivered = stream(cfg, sink)
        assert delivered == 10
        assert len(received) == 10

    def test_stop_callable_halts(self):
        cfg = steady_config(duration=1200.0)
        count = [0]

        def stop():
            return count[0] >= 5

        def sink(sample):
            count[0] += 1

        stream(cfg, sink, stop=stop)
        assert count[0] == 5

    def test_pacing_does_not_change_samples(self):
        fast = steady_config(seed=21, jitter=15.0, duration=5.0, pacing="accelerated")
        slow = steady_config(seed=21, jitter=15.0, duration=5.0, pacing="realtime")
        got_fast, got_slow = [], []
        stream(fast, got_fast.append)
        stream(slow, got_slow.append)
        assert got_fast == got_slow


class TestConfigValidation:
    def test_needs_phases(self):
        with pytest.raises(ValueError):
            SensorConfig(client_id="c1", seed=1, phases=())

    def test_hr_bounds(self):
        with pytest.raises(ValueError):
            ActivityPhase(label="x", duration_s=10.0, target_hr_bpm=310.0)

    def test_bad_pacing(self):
        with pytest.raises(ValueError):
            steady_config(pacing="warp")

    def test_modulation_frequency_positive(self):
        with pytest.raises(ValueError):
            Modulation(10.0, 0.0)
