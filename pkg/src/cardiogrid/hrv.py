"""Pure HRV analytics over windows of RR intervals.

All functions here are side-effect free and operate on immutable inputs,
so they can be called from any number of workers concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Physiological plausibility bounds: 20-300 bpm.
RR_MIN_MS = 200
RR_MAX_MS = 3000


class HrvError(Exception):
    """Base class for analytics errors."""


class OutOfRange(HrvError):
    """RR interval outside physiological bounds; corrupt or spoofed record."""


class NonMonotonic(HrvError):
    """R-peak timestamp did not advance past the last accepted sample."""


class InsufficientData(HrvError):
    """Too few intervals in the window for the requested statistic."""


class DegenerateSignal(HrvError):
    """Zero-variance RR series (informational; spectra degrade to zero power)."""


class EmptyBand(HrvError):
    """A frequency band covers fewer than 2 grid points; grid too coarse."""


@dataclass(frozen=True)
class RRSample:
    """One heartbeat observation: R-peak timestamp and the elapsed RR interval."""

    client_id: str
    r_timestamp_ms: int
    rr_interval_ms: int


@dataclass(frozen=True)
class RRWindow:
    """Ordered run of one client's samples inside [window_start_ms, window_end_ms)."""

    client_id: str
    samples: tuple[RRSample, ...]
    window_start_ms: int
    window_end_ms: int

    def __post_init__(self):
        for s in self.samples:
            if s.client_id != self.client_id:
                raise ValueError(f"sample client {s.client_id!r} != window client {self.client_id!r}")
            if not (self.window_start_ms <= s.r_timestamp_ms < self.window_end_ms):
                raise ValueError("sample timestamp outside window bounds")
        stamps = [s.r_timestamp_ms for s in self.samples]
        if stamps != sorted(stamps):
            raise ValueError("samples not ordered by r_timestamp_ms")

    @property
    def n_intervals(self) -> int:
        return len(self.samples)

    def intervals_ms(self) -> np.ndarray:
        return np.array([s.rr_interval_ms for s in self.samples], dtype=np.float64)

    def timestamps_s(self) -> np.ndarray:
        return np.array([s.r_timestamp_ms for s in self.samples], dtype=np.float64) / 1000.0


@dataclass(frozen=True)
class FrequencyBands:
    """VLF/LF/HF band edges in Hz, low < high, bands ordered and non-overlapping."""

    vlf: tuple[float, float]
    lf: tuple[float, float]
    hf: tuple[float, float]

    def __post_init__(self):
        (vl, vh), (ll, lh), (hl, hh) = self.vlf, self.lf, self.hf
        if not (0 < vl < vh <= ll < lh <= hl < hh):
            raise ValueError(f"band edges must satisfy 0 < vlf < lf < hf, got {self}")

    def canonical(self) -> str:
        """Stable text form, used in the trusted-pipeline measurement."""
        return (f"vlf={self.vlf[0]!r},{self.vlf[1]!r};"
                f"lf={self.lf[0]!r},{self.lf[1]!r};"
                f"hf={self.hf[0]!r},{self.hf[1]!r}")


@dataclass(frozen=True)
class SpectralGrid:
    """Uniform frequency grid: f_min, f_min+step, ... up to f_max inclusive-ish."""

    f_min: float
    f_max: float
    step: float

    def __post_init__(self):
        if not (0 < self.f_min < self.f_max) or self.step <= 0:
            raise ValueError(f"invalid spectral grid {self}")

    def frequencies(self) -> np.ndarray:
        n = int(np.floor((self.f_max - self.f_min) / self.step + 1e-9)) + 1
        return self.f_min + self.step * np.arange(n)

    def canonical(self) -> str:
        return f"grid={self.f_min!r},{self.f_max!r},{self.step!r}"


# Task Force conventional edges; the architecture only names the bands.
DEFAULT_BANDS = FrequencyBands(vlf=(0.0033, 0.04), lf=(0.04, 0.15), hf=(0.15, 0.4))
DEFAULT_GRID = SpectralGrid(f_min=0.0033, f_max=0.4, step=0.002)


@dataclass(frozen=True)
class HrvReport:
    """Per-client, per-window analytics output.

    Fields that could not be computed (precondition not met) are None.
    """

    client_id: str
    window_start_ms: int
    window_end_ms: int
    n_intervals: int
    sdnn_ms: Optional[float]
    mean_hr_bpm: Optional[float]
    vlf_power: Optional[float]
    lf_power: Optional[float]
    hf_power: Optional[float]
    lf_hf_ratio: Optional[float]

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "window_start_ms": self.window_start_ms,
            "window_end_ms": self.window_end_ms,
            "n_intervals": self.n_intervals,
            "sdnn_ms": self.sdnn_ms,
            "mean_hr_bpm": self.mean_hr_bpm,
            "vlf_power": self.vlf_power,
            "lf_power": self.lf_power,
            "hf_power": self.hf_power,
            "lf_hf_ratio": self.lf_hf_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HrvReport":
        return cls(**{k: d[k] for k in (
            "client_id", "window_start_ms", "window_end_ms", "n_intervals",
            "sdnn_ms", "mean_hr_bpm", "vlf_power", "lf_power", "hf_power",
            "lf_hf_ratio")})


def validate_sample(client_id: str, r_timestamp_ms: int, rr_interval_ms: int,
                    last_timestamp_ms: Optional[int] = None) -> RRSample:
    """Accept a candidate sample or reject it as corrupt.

    Raises OutOfRange for intervals outside [200, 3000] ms and NonMonotonic
    when the timestamp does not advance past the stream's last accepted one.
    """
    if not (RR_MIN_MS <= rr_interval_ms <= RR_MAX_MS):
        raise OutOfRange(f"rr={rr_interval_ms} ms outside [{RR_MIN_MS}, {RR_MAX_MS}]")
    if last_timestamp_ms is not None and r_timestamp_ms <= last_timestamp_ms:
        raise NonMonotonic(f"timestamp {r_timestamp_ms} <= last accepted {last_timestamp_ms}")
    return RRSample(client_id=client_id, r_timestamp_ms=r_timestamp_ms,
                    rr_interval_ms=rr_interval_ms)


def identity(window: RRWindow) -> RRWindow:
    """Pass-through analytic: returns the window unchanged (echo stage)."""
    return window


def sdnn(window: RRWindow) -> float:
    """Sample standard deviation (ddof=1) of the RR intervals, in ms."""
    if window.n_intervals < 2:
        raise InsufficientData(f"sdnn needs >= 2 intervals, got {window.n_intervals}")
    return float(np.std(window.intervals_ms(), ddof=1))


def mean_heart_rate(window: RRWindow) -> float:
    """Mean heart rate in bpm: 60000 / mean(rr_interval_ms)."""
    if window.n_intervals < 1:
        raise InsufficientData("mean_heart_rate needs >= 1 interval")
    return float(60000.0 / np.mean(window.intervals_ms()))


def lomb_scargle_power(window: RRWindow, freq_grid: Sequence[float]) -> np.ndarray:
    """Classical Lomb-Scargle periodogram of the mean-subtracted RR series.

    The abscissa of sample i is its R-peak timestamp in seconds, so the
    estimator works directly on the unevenly sampled series.  Output is one
    power value (ms^2) per grid frequency.  A zero-variance window yields
    all-zero power instead of dividing by zero.
    """
    freqs = np.asarray(freq_grid, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("freq_grid must be a non-empty 1-D sequence")
    if np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise ValueError("freq_grid must be strictly increasing and positive")
    if window.n_intervals < 4:
        raise InsufficientData(f"spectrum needs >= 4 intervals, got {window.n_intervals}")

    x = window.intervals_ms()
    x = x - x.mean()
    if np.all(x == 0.0):
        return np.zeros_like(freqs)
    t = window.timestamps_s()

    omega = 2.0 * np.pi * freqs[:, None]          # (F, 1)
    wt = omega * t[None, :]                       # (F, N)
    # Scargle's tau makes the sine/cosine terms orthogonal per frequency.
    tau = np.arctan2(np.sin(2.0 * wt).sum(axis=1), np.cos(2.0 * wt).sum(axis=1)) / 2.0
    arg = wt - tau[:, None]
    c, s = np.cos(arg), np.sin(arg)
    cx = (c * x[None, :]).sum(axis=1)
    sx = (s * x[None, :]).sum(axis=1)
    cc = (c * c).sum(axis=1)
    ss = (s * s).sum(axis=1)
    power = 0.5 * (np.divide(cx * cx, cc, out=np.zeros_like(cx), where=cc > 0)
                   + np.divide(sx * sx, ss, out=np.zeros_like(sx), where=ss > 0))
    return power


def band_powers(freqs: Sequence[float], power: Sequence[float],
                bands: FrequencyBands) -> tuple[float, float, float]:
    """Trapezoidal band power over each of VLF, LF, HF.

    Only grid points inside a band contribute; raises EmptyBand when a band
    holds fewer than 2 grid points.
    """
    f = np.asarray(freqs, dtype=np.float64)
    p = np.asarray(power, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError("frequency and power arrays must have equal shape")
    if np.any(np.diff(f) <= 0):
        raise ValueError("spectrum frequencies must be strictly increasing")

    out = []
    for name, (lo, hi) in (("vlf", bands.vlf), ("lf", bands.lf), ("hf", bands.hf)):
        sel = (f >= lo) & (f <= hi)
        if int(sel.sum()) < 2:
            raise EmptyBand(f"{name} band [{lo}, {hi}] Hz covers {int(sel.sum())} grid points")
        out.append(float(np.trapezoid(p[sel], f[sel])))
    return out[0], out[1], out[2]


def analyze(window: RRWindow, bands: FrequencyBands = DEFAULT_BANDS,
            grid: SpectralGrid = DEFAULT_GRID) -> HrvReport:
    """Full pipeline for one window: SDNN, mean HR, spectral band powers.

    Metrics whose preconditions fail degrade to None rather than erroring,
    so short or degenerate windows still flow through the pipeline.
    """
    window = identity(window)

    sdnn_ms = mean_hr = None
    vlf = lf = hf = ratio = None
    try:
        mean_hr = mean_heart_rate(window)
    except InsufficientData:
        pass
    try:
        sdnn_ms = sdnn(window)
    except InsufficientData:
        pass
    try:
        freqs = grid.frequencies()
        power = lomb_scargle_power(window, freqs)
        vlf, lf, hf = band_powers(freqs, power, bands)
        if hf > 0:
            ratio = lf / hf
    except (InsufficientData, EmptyBand):
        pass

    return HrvReport(
        client_id=window.client_id,
        window_start_ms=window.window_start_ms,
        window_end_ms=window.window_end_ms,
        n_intervals=window.n_intervals,
        sdnn_ms=sdnn_ms,
        mean_hr_bpm=mean_hr,
        vlf_power=vlf,
        lf_power=lf,
        hf_power=hf,
        lf_hf_ratio=ratio,
    )


def window_from_pairs(client_id: str, pairs: Sequence[tuple[int, int]]) -> RRWindow:
    """Build a window spanning exactly the given (timestamp_ms, rr_ms) pairs."""
    samples = tuple(RRSample(client_id, int(t), int(rr)) for t, rr in pairs)
    if samples:
        start = samples[0].r_timestamp_ms
        end = samples[-1].r_timestamp_ms + 1
    else:
        start, end = 0, 1
    return RRWindow(client_id=client_id, samples=samples,
                    window_start_ms=start, window_end_ms=end)
