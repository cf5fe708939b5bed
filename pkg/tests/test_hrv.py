"""Analytics tests: frozen oracle values, invariants, degradation paths."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiogrid import hrv
from cardiogrid.hrv import (
    DEFAULT_BANDS,
    DEFAULT_GRID,
    EmptyBand,
    FrequencyBands,
    InsufficientData,
    NonMonotonic,
    OutOfRange,
    RRSample,
    RRWindow,
    SpectralGrid,
    window_from_pairs,
)

from oracles import dft_periodogram, mean_hr_oracle, sdnn_two_pass


def constant_window(rr=800, n=5, client="c1"):
    pairs = [((i + 1) * rr, rr) for i in range(n)]
    return window_from_pairs(client, pairs)


class TestValidateSample:
    def test_in_bounds_accepted(self):
        s = hrv.validate_sample("c1", 1800, 800, last_timestamp_ms=1000)
        assert s == RRSample("c1", 1800, 800)

    def test_zero_interval_rejected(self):
        with pytest.raises(OutOfRange):
            hrv.validate_sample("c1", 1000, 0)

    def test_interval_above_bound_rejected(self):
        with pytest.raises(OutOfRange):
            hrv.validate_sample("c1", 1000, 5000)

    @pytest.mark.parametrize("rr", [200, 3000])
    def test_bounds_inclusive(self, rr):
        assert hrv.validate_sample("c1", 10_000, rr).rr_interval_ms == rr

    def test_timestamp_regression_rejected(self):
        with pytest.raises(NonMonotonic):
            hrv.validate_sample("c1", 900, 800, last_timestamp_ms=1000)

    def test_equal_timestamp_rejected(self):
        with pytest.raises(NonMonotonic):
            hrv.validate_sample("c1", 1000, 800, last_timestamp_ms=1000)

    def test_no_predecessor_skips_monotonicity(self):
        assert hrv.validate_sample("c1", 5, 800).r_timestamp_ms == 5


class TestIdentity:
    def test_empty_window(self):
        w = window_from_pairs("c1", [])
        assert hrv.identity(w) is w

    def test_three_samples_unchanged(self):
        w = constant_window(n=3)
        out = hrv.identity(w)
        assert out.samples == w.samples

    def test_idempotent(self):
        w = constant_window(n=7)
        assert hrv.identity(hrv.identity(w)) == hrv.identity(w)


class TestSdnn:
    def test_constant_intervals_zero(self):
        assert hrv.sdnn(constant_window()) == 0.0

    def test_oracle_value_frozen(self):
        # two-pass oracle on {790, 800, 810}: mean 800, ss 200, var 100
        assert sdnn_two_pass([790, 800, 810]) == 10.0
        w = window_from_pairs("c1", [(790, 790), (1590, 800), (2400, 810)])
        assert hrv.sdnn(w) == pytest.approx(10.0, rel=1e-12)

    def test_shift_invariance(self):
        base = [760, 810, 795, 820, 780]
        shifted = [x + 100 for x in base]

        def mk(vals):
            t, pairs = 0, []
            for v in vals:
                t += v
                pairs.append((t, v))
            return window_from_pairs("c1", pairs)

        assert hrv.sdnn(mk(base)) == pytest.approx(hrv.sdnn(mk(shifted)), rel=1e-12)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            hrv.sdnn(constant_window(n=1))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(min_value=200, max_value=3000), min_size=2,
                    max_size=400))
    def test_matches_two_pass_oracle(self, intervals):
        t, pairs = 0, []
        for rr in intervals:
            t += rr
            pairs.append((t, rr))
        w = window_from_pairs("c1", pairs)
        expected = sdnn_two_pass(intervals)
        got = hrv.sdnn(w)
        assert got >= 0.0
        assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(min_value=250, max_value=1400), min_size=2,
                    max_size=100), st.integers(min_value=2, max_value=2))
    def test_homogeneous_scaling(self, intervals, k):
        def mk(vals):
            t, pairs = 0, []
            for v in vals:
                t += v
                pairs.append((t, v))
            return window_from_pairs("c1", pairs)

        scaled = [v * k for v in intervals]
        assert hrv.sdnn(mk(scaled)) == pytest.approx(k * hrv.sdnn(mk(intervals)),
                                                     rel=1e-9, abs=1e-9)


class TestMeanHeartRate:
    def test_1000ms_is_60bpm(self):
        assert hrv.mean_heart_rate(constant_window(rr=1000)) == 60.0

    def test_500ms_is_120bpm(self):
        assert hrv.mean_heart_rate(constant_window(rr=500)) == 120.0

    def test_mixed_oracle(self):
        w = window_from_pairs("c1", [(800, 800), (1800, 1000)])
        assert mean_hr_oracle([800, 1000]) == pytest.approx(60000 / 900)
        assert hrv.mean_heart_rate(w) == pytest.approx(60000 / 900, rel=1e-12)

    def test_empty_raises(self):
        with pytest.raises(InsufficientData):
            hrv.mean_heart_rate(window_from_pairs("c1", []))


def _even_window(values, dt_s=0.8, client="c1"):
    """Window with evenly spaced timestamps (spectral tests only)."""
    samples = tuple(RRSample(client, int(round(i * dt_s * 1000)), int(v))
                    for i, v in enumerate(values, start=1))
    return RRWindow(client, samples, 0,
                    samples[-1].r_timestamp_ms + 1 if samples else 1)


class TestLombScargle:
    def test_constant_series_zero_power(self):
        freqs = DEFAULT_GRID.frequencies()
        power = hrv.lomb_scargle_power(constant_window(n=16), freqs)
        assert np.all(power == 0.0)

    def test_matches_dft_oracle_on_even_sampling(self):
        rng = np.random.default_rng(42)
        n, dt = 128, 0.8
        values = 900 + 40 * np.sin(2 * np.pi * 0.11 * dt * np.arange(n)) \
            + rng.normal(0, 15, n)
        values = np.clip(np.round(values), 200, 3000)
        w = _even_window(values, dt)
        fk = np.arange(1, n // 2) / (n * dt)
        got = hrv.lomb_scargle_power(w, fk)
        for i, f in enumerate(fk):
            expected = dft_periodogram(w.timestamps_s(), values, f)
            assert got[i] == pytest.approx(expected, rel=1e-6, abs=1e-9)

    def test_peak_at_modulation_frequency(self):
        # 0.25 Hz modulated RR series: argmax within one grid step of 0.25 Hz
        n = 256
        t, pairs = 0, []
        for i in range(n):
            rr = int(round(800 + 60 * math.sin(2 * math.pi * 0.25 * t / 1000.0)))
            t += rr
            pairs.append((t, rr))
        w = window_from_pairs("c1", pairs)
        freqs = DEFAULT_GRID.frequencies()
        power = hrv.lomb_scargle_power(w, freqs)
        peak = freqs[int(np.argmax(power))]
        assert abs(peak - 0.25) <= DEFAULT_GRID.step

    def test_nonnegative_and_offset_invariant(self):
        rng = np.random.default_rng(3)
        t, pairs = 0, []
        for _ in range(64):
            rr = int(rng.integers(700, 900))
            t += rr
            pairs.append((t, rr))
        w1 = window_from_pairs("c1", pairs)
        w2 = window_from_pairs("c1", [(t, rr + 150) for t, rr in pairs])
        freqs = DEFAULT_GRID.frequencies()
        p1 = hrv.lomb_scargle_power(w1, freqs)
        p2 = hrv.lomb_scargle_power(w2, freqs)
        assert np.all(p1 >= 0.0)
        np.testing.assert_allclose(p1, p2, rtol=1e-7, atol=1e-9)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            hrv.lomb_scargle_power(constant_window(n=3), [0.1, 0.2])

    def test_bad_grid_rejected(self):
        w = constant_window(n=8)
        with pytest.raises(ValueError):
            hrv.lomb_scargle_power(w, [0.2, 0.1])
        with pytest.raises(ValueError):
            hrv.lomb_scargle_power(w, [0.0, 0.1])


class TestBandPowers:
    def test_zero_spectrum(self):
        freqs = DEFAULT_GRID.frequencies()
        assert hrv.band_powers(freqs, np.zeros_like(freqs), DEFAULT_BANDS) == (0, 0, 0)

    def test_constant_one_over_lf_band(self):
        # grid exactly spanning the LF band; flat unit power integrates to width
        freqs = np.linspace(0.04, 0.15, 23)
        power = np.ones_like(freqs)
        bands = FrequencyBands(vlf=(0.003, 0.04), lf=(0.04, 0.15), hf=(0.15, 0.4))
        with pytest.raises(EmptyBand):
            hrv.band_powers(freqs, power, bands)  # vlf has one point only
        wide = np.concatenate([[0.003, 0.02], freqs, [0.3, 0.4]])
        wide_p = np.concatenate([[0.0, 0.0], power, [0.0, 0.0]])
        vlf, lf, hf = hrv.band_powers(wide, wide_p, bands)
        assert lf == pytest.approx(0.15 - 0.04, rel=1e-12)

    def test_band_leq_total_and_monotone(self):
        rng = np.random.default_rng(9)
        freqs = DEFAULT_GRID.frequencies()
        power = rng.uniform(0, 5, freqs.size)
        vlf, lf, hf = hrv.band_powers(freqs, power, DEFAULT_BANDS)
        total = float(np.trapezoid(power, freqs))
        assert max(vlf, lf, hf) <= total + 1e-12
        # enlarging LF never decreases its power
        wider = FrequencyBands(vlf=(0.0033, 0.04), lf=(0.04, 0.2), hf=(0.2, 0.4))
        _, lf_wide, _ = hrv.band_powers(freqs, power, wider)
        assert lf_wide >= lf - 1e-12

    def test_lf_dominates_for_lf_modulated_stream(self):
        t, pairs = 0, []
        for _ in range(400):
            rr = int(round(800 + 50 * math.sin(2 * math.pi * 0.1 * t / 1000.0)))
            t += rr
            pairs.append((t, rr))
        report = hrv.analyze(window_from_pairs("c1", pairs))
        total = report.vlf_power + report.lf_power + report.hf_power
        assert report.lf_power >= 0.8 * total


class TestAnalyze:
    def test_constant_window_report(self):
        report = hrv.analyze(constant_window(rr=800, n=32))
        assert report.sdnn_ms == 0.0
        assert report.vlf_power == report.lf_power == report.hf_power == 0.0
        assert report.mean_hr_bpm == pytest.approx(75.0)
        assert report.lf_hf_ratio is None  # hf power is zero
        assert report.n_intervals == 32

    def test_single_sample_degrades(self):
        report = hrv.analyze(window_from_pairs("c1", [(800, 800)]))
        assert report.mean_hr_bpm == pytest.approx(75.0)
        assert report.sdnn_ms is None
        assert report.vlf_power is None and report.lf_hf_ratio is None

    def test_reference_window_matches_oracle_composition(self):
        rng = np.random.default_rng(2024)
        t, pairs = 0, []
        for _ in range(300):
            rr = int(rng.integers(700, 1000))
            t += rr
            pairs.append((t, rr))
        w = window_from_pairs("c1", pairs)
        report = hrv.analyze(w)

        intervals = [rr for _, rr in pairs]
        assert report.sdnn_ms == pytest.approx(sdnn_two_pass(intervals), rel=1e-9)
        assert report.mean_hr_bpm == pytest.approx(mean_hr_oracle(intervals), rel=1e-12)
        freqs = DEFAULT_GRID.frequencies()
        power = hrv.lomb_scargle_power(w, freqs)
        vlf, lf, hf = hrv.band_powers(freqs, power, DEFAULT_BANDS)
        assert report.vlf_power == vlf and report.lf_power == lf and report.hf_power == hf
        assert report.lf_hf_ratio == pytest.approx(lf / hf)

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(5)
        t, pairs = 0, []
        for _ in range(64):
            rr = int(rng.integers(600, 1200))
            t += rr
            pairs.append((t, rr))
        w = window_from_pairs("c1", pairs)
        r1, r2 = hrv.analyze(w), hrv.analyze(w)
        assert r1 == r2  # exact field equality, including floats

    def test_report_dict_round_trip(self):
        report = hrv.analyze(constant_window(n=10))
        assert hrv.HrvReport.from_dict(report.to_dict()) == report


class TestTypes:
    def test_window_rejects_unordered(self):
        s1 = RRSample("c1", 2000, 800)
        s2 = RRSample("c1", 1000, 800)
        with pytest.raises(ValueError):
            RRWindow("c1", (s1, s2), 0, 3000)

    def test_window_rejects_foreign_client(self):
        s = RRSample("c2", 1000, 800)
        with pytest.raises(ValueError):
            RRWindow("c1", (s,), 0, 2000)

    def test_window_rejects_out_of_bounds(self):
        s = RRSample("c1", 5000, 800)
        with pytest.raises(ValueError):
            RRWindow("c1", (s,), 0, 2000)

    def test_bad_band_ordering_rejected(self):
        with pytest.raises(ValueError):
            FrequencyBands(vlf=(0.04, 0.0033), lf=(0.04, 0.15), hf=(0.15, 0.4))

    def test_grid_frequencies_span(self):
        g = SpectralGrid(0.0033, 0.4, 0.002)
        f = g.frequencies()
        assert f[0] == pytest.approx(0.0033)
        assert f[-1] <= 0.4 + 1e-12
        assert np.all(np.diff(f) > 0)
