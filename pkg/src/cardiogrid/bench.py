"""Stability benchmarks: secure-vs-plain maxima sweeps at desk scale.

Two experiments mirror the evaluation methodology: a clients sweep (how many
1 Hz clients run in parallel before the engine goes unstable) and a load
sweep (how many bytes/s a single client can push).  Thresholds are located
by doubling then bisection, each point being a full timed run judged by the
instability criterion.  Absolute maxima are hardware-specific; the artifact's
contract is the secure/plain proportion.
"""

from __future__ import annotations

import csv
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import secure
from .enclave import (
    BoundaryProcess,
    EnclaveConfig,
    OverheadModel,
    PipelineConfig,
    analyze_batch,
    establish_session,
)
from .engine import Engine, EngineConfig, StabilityReport, is_unstable
from .gateway import BatchRecord, DropBox
from .sensor import ActivityPhase, RRGenerator, SensorConfig

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "mode", "point", "stable", "mean_processing_ms",
               "overhead_per_call_ms", "overhead_per_kb_ms", "seed")


class NeverUnstable(Exception):
    """Doubling hit the search bound while still stable (reported, not fatal)."""


@dataclass
class SweepConfig:
    experiment: str = "clients"  # clients | load
    run_duration_s: float = 120.0  # paper-fidelity runs use 1200
    interval_s: float = 10.0
    client_rate_hz: float = 1.0
    flush_interval_s: float = 5.0
    max_lines: int = 64
    lower_bound: float = 1.0
    upper_bound: float = 1024.0
    tolerance_clients: int = 4
    tolerance_load_rel: float = 0.10
    modes: tuple[str, ...] = ("secure", "plain")
    seed: int = 7
    batch_work_ms: float = 100.0  # desk-scale workload amplifier, both modes
    overhead: Optional[OverheadModel] = None  # None -> calibrate
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    warmup_intervals: int = 2
    early_abort: bool = True

    def __post_init__(self):
        if self.experiment not in ("clients", "load"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.run_duration_s < 6 * self.interval_s:
            raise ValueError("run duration must cover at least 6 intervals")
        if self.lower_bound <= 0 or self.upper_bound < self.lower_bound:
            raise ValueError("search bounds must be positive and ordered")


@dataclass
class PointRecord:
    mode: str
    point: float
    stable: bool
    mean_processing_ms: float
    seed: int
    reran: bool = False


@dataclass
class ModeOutcome:
    mode: str
    max_stable: Optional[float]
    never_unstable: bool
    non_monotone: bool
    points: list[PointRecord]


@dataclass
class SweepResult:
    experiment: str
    config: SweepConfig
    overhead: OverheadModel
    outcomes: dict[str, ModeOutcome]

    @property
    def proportion(self) -> Optional[float]:
        sec = self.outcomes.get("secure")
        pla = self.outcomes.get("plain")
        if (sec is None or pla is None or sec.max_stable is None
                or pla.max_stable in (None, 0)):
            return None
        return sec.max_stable / pla.max_stable

    def all_points(self) -> list[PointRecord]:
        return [p for o in self.outcomes.values() for p in o.points]


# ---------------------------------------------------------------------------
# Threshold search: doubling then bisection over a stability judge.


@dataclass
class SearchOutcome:
    max_stable: Optional[float]
    first_unstable: Optional[float]
    never_unstable: bool
    points: list[tuple[float, bool]]


def threshold_search(judge: Callable[[float], bool], lower: float, upper: float,
                     *, integer: bool = True, tol_abs: float = 4.0,
                     tol_rel: Optional[float] = None) -> SearchOutcome:
    """Locate the largest stable point between lower and upper.

    `judge(point)` returns True when the point is stable.  Doubling from the
    lower bound finds a bracketing unstable point (never overshooting the
    true threshold by more than 2x), then bisection narrows the bracket to
    the absolute tolerance, or to `tol_rel * low` when tol_rel is given.
    """
    points: list[tuple[float, bool]] = []

    def run(pt: float) -> bool:
        pt = float(round(pt)) if integer else float(pt)
        stable = judge(pt)
        points.append((pt, stable))
        return stable

    pt = lower
    last_stable: Optional[float] = None
    while True:
        stable = run(pt)
        if not stable:
            break
        last_stable = pt
        if pt >= upper:
            return SearchOutcome(max_stable=last_stable, first_unstable=None,
                                 never_unstable=True, points=points)
        pt = min(pt * 2, upper)

    if last_stable is None:
        return SearchOutcome(max_stable=None, first_unstable=pt,
                             never_unstable=False, points=points)

    lo, hi = last_stable, pt
    while True:
        gap_limit = tol_rel * lo if tol_rel is not None else tol_abs
        if hi - lo <= gap_limit:
            break
        mid = (lo + hi) / 2
        if integer:
            mid = float(int(mid))
            if mid <= lo or mid >= hi:
                break
        if run(mid):
            lo = mid
        else:
            hi = mid
    return SearchOutcome(max_stable=lo, first_unstable=hi,
                         never_unstable=False, points=points)


# ---------------------------------------------------------------------------
# Point runners: one full engine run per tested point.


class _LightClient:
    """In-process batch stream standing in for one full client package.

    Samples come from the deterministic generator; batches follow the
    gateway flush policy and go straight into the outbound drop, sealed in
    secure mode.
    """

    def __init__(self, client_id: str, seed: int, drop: DropBox, mode: str,
                 sealer=None, rate_hz: float = 1.0):
        phases = (ActivityPhase(label="steady", duration_s=10_000_000.0,
                                target_hr_bpm=60.0 * rate_hz, rr_jitter_ms=20.0),)
        self.generator = RRGenerator(SensorConfig(client_id=client_id, seed=seed,
                                                  phases=phases))
        self.client_id = client_id
        self.drop = drop
        self.mode = mode
        self.sealer = sealer
        self.pending: list[tuple[int, int]] = []
        self.plain_seq = 0
        self.batches = 0

    def advance_to(self, logical_ms: float) -> None:
        """Generate samples up to the given logical stream time."""
        while self.generator.elapsed_ms < logical_ms:
            s = self.generator.next_sample()
            self.pending.append((s.r_timestamp_ms, s.rr_interval_ms))

    def take_lines(self, n: int) -> None:
        """Generate exactly n more samples regardless of logical pacing."""
        for _ in range(n):
            s = self.generator.next_sample()
            self.pending.append((s.r_timestamp_ms, s.rr_interval_ms))

    def flush(self, max_lines: Optional[int] = None) -> int:
        """Deposit pending lines as one batch (or several of max_lines)."""
        deposited = 0
        while self.pending:
            take = len(self.pending) if max_lines is None else min(max_lines,
                                                                   len(self.pending))
            lines, self.pending = self.pending[:take], self.pending[take:]
            record = BatchRecord(client_id=self.client_id, lines=tuple(lines),
                                 created_at_ms=int(time.time() * 1000))
            payload = record.serialize()
            if self.mode == "secure":
                env = self.sealer.seal(payload)
                self.drop.deposit(self.drop.outbox(self.client_id), env.sequence,
                                  ".env", env.encode())
                deposited += len(env.encode())
            else:
                self.plain_seq += 1
                self.drop.deposit(self.drop.outbox(self.client_id), self.plain_seq,
                                  ".csv", payload)
                deposited += len(payload)
            self.batches += 1
        return deposited


def _grossly_unstable(engine: Engine, cfg: SweepConfig) -> bool:
    """Early-abort predicate: several post-warmup windows far past the interval."""
    metrics = [m for m in engine.metrics
               if m.interval_index >= cfg.warmup_intervals]
    if len(metrics) < 3:
        return False
    recent = metrics[-3:]
    limit = cfg.interval_s * 1000.0 * 1.3
    return all(m.processing_ms > limit for m in recent)


def run_point(cfg: SweepConfig, mode: str, point: float, seed: int,
              drop_root: Path, root_key_path: Optional[Path],
              root_public: Optional[bytes]) -> StabilityReport:
    """Execute one timed run at the given sweep point and judge stability."""
    drop = DropBox(drop_root)
    drop_root.mkdir(parents=True, exist_ok=True)
    overhead = cfg.overhead or OverheadModel()

    boundary = None
    channel = None
    try:
        if mode == "secure":
            boundary = BoundaryProcess(EnclaveConfig(
                pipeline=cfg.pipeline, overhead=overhead,
                root_key_path=str(root_key_path)))
            channel = boundary.connect()

        n_clients = int(point) if cfg.experiment == "clients" else 1
        clients = _make_clients(cfg, mode, n_clients, seed, drop, channel,
                                root_public)

        engine = Engine(EngineConfig(
            drop_root=drop_root, mode=mode, interval_s=cfg.interval_s,
            warmup_intervals=cfg.warmup_intervals,
            batch_work_ms=cfg.batch_work_ms,
            bands=cfg.pipeline.bands, grid=cfg.pipeline.grid,
        ), boundary=channel)
        engine.start()

        stop = threading.Event()
        driver = threading.Thread(
            target=_drive_clients, args=(cfg, clients, stop, point), daemon=True)
        driver.start()

        deadline = time.monotonic() + cfg.run_duration_s
        while time.monotonic() < deadline:
            if engine.fatal is not None:
                break
            if cfg.early_abort and _grossly_unstable(engine, cfg):
                log.info("%s point %g grossly unstable, aborting early", mode, point)
                break
            time.sleep(0.2)
        stop.set()
        driver.join(timeout=5.0)
        engine.stop(drain=False)
        return engine.stability()
    finally:
        if channel is not None:
            channel.close()
        if boundary is not None:
            boundary.shutdown()


def _make_clients(cfg: SweepConfig, mode: str, count: int, seed: int,
                  drop: DropBox, channel, root_public) -> list[_LightClient]:
    clients = []
    expected = cfg.pipeline.measurement()
    for i in range(count):
        cid = f"bench-{i:04d}"
        sealer = None
        if mode == "secure":
            _, sealer, _ = establish_session(channel, cid, expected, root_public)
        clients.append(_LightClient(cid, seed * 100_003 + i, drop, mode, sealer,
                                    rate_hz=cfg.client_rate_hz))
    return clients


def _drive_clients(cfg: SweepConfig, clients: list[_LightClient],
                   stop: threading.Event, point: float) -> None:
    started = time.monotonic()
    if cfg.experiment == "clients":
        # Realtime-equivalent pacing: a flush per client every flush interval.
        while not stop.is_set():
            if stop.wait(cfg.flush_interval_s):
                return
            elapsed_ms = (time.monotonic() - started) * 1000.0
            for c in clients:
                c.advance_to(elapsed_ms)
                c.flush()
    else:
        # Load experiment: one client paced by a bytes/s budget (the point),
        # flushing whenever the gateway's max_lines rule would.
        client = clients[0]
        spent = 0.0
        tick = 0.5
        while not stop.is_set():
            if stop.wait(tick):
                return
            budget = point * (time.monotonic() - started) - spent
            while budget > 0 and not stop.is_set():
                client.take_lines(1)
                t, rr = client.pending[-1]
                line_cost = len(f"{t},{rr}\n")
                budget -= line_cost
                spent += line_cost
                if len(client.pending) >= cfg.max_lines:
                    client.flush(max_lines=cfg.max_lines)
            # leftover partial batch flushes once it reaches a full group


def make_real_runner(cfg: SweepConfig, work_dir: Path,
                     root_key_path: Path, root_public: bytes
                     ) -> Callable[[str, float], StabilityReport]:
    """Point runner bound to a scratch directory and attestation root."""
    counter = {"n": 0}

    def runner(mode: str, point: float) -> StabilityReport:
        counter["n"] += 1
        drop_root = work_dir / f"point-{counter['n']:03d}-{mode}-{point:g}"
        seed = cfg.seed + counter["n"]
        return run_point(cfg, mode, point, seed, drop_root,
                         root_key_path, root_public)

    return runner


# ---------------------------------------------------------------------------
# Sweeps.


def _sweep(cfg: SweepConfig,
           runner: Callable[[str, float], StabilityReport]) -> SweepResult:
    integer = cfg.experiment == "clients"
    outcomes: dict[str, ModeOutcome] = {}
    overhead = cfg.overhead or OverheadModel()

    for mode in cfg.modes:
        records: list[PointRecord] = []

        def judge(point: float, _mode=mode, _records=records) -> bool:
            report = runner(_mode, point)
            stable = not report.unstable
            _records.append(PointRecord(
                mode=_mode, point=point, stable=stable,
                mean_processing_ms=report.mean_processing_ms, seed=cfg.seed))
            log.info("%s/%s point %g -> %s (mean %.0f ms)", cfg.experiment,
                     _mode, point, "stable" if stable else "UNSTABLE",
                     report.mean_processing_ms)
            return stable

        outcome = threshold_search(
            judge, cfg.lower_bound, cfg.upper_bound, integer=integer,
            tol_abs=float(cfg.tolerance_clients),
            tol_rel=cfg.tolerance_load_rel if not integer else None)

        max_stable, non_monotone = _monotonicity_guard(records, outcome, judge)
        outcomes[mode] = ModeOutcome(
            mode=mode, max_stable=max_stable,
            never_unstable=outcome.never_unstable,
            non_monotone=non_monotone, points=records)
        if outcome.never_unstable:
            log.warning("%s sweep (%s): never unstable up to bound %g",
                        cfg.experiment, mode, cfg.upper_bound)

    return SweepResult(experiment=cfg.experiment, config=cfg,
                       overhead=overhead, outcomes=outcomes)


def _monotonicity_guard(records: list[PointRecord], outcome: SearchOutcome,
                        judge: Callable[[float], bool]) -> tuple[Optional[float], bool]:
    """Re-run a contradicting unstable point once; flag if it persists."""
    max_stable = outcome.max_stable
    stable_pts = [r.point for r in records if r.stable]
    unstable_pts = [r for r in records if not r.stable]
    if not stable_pts or not unstable_pts:
        return max_stable, False
    best_stable = max(stable_pts)
    offender = min(unstable_pts, key=lambda r: r.point)
    if offender.point >= best_stable:
        return max_stable, False
    # Observed unstable below a stable point: single re-run.
    still_unstable = not judge(offender.point)
    records[-1].reran = True
    if still_unstable:
        return max_stable, True
    recomputed = max(r.point for r in records if r.stable)
    return recomputed, False


def sweep_clients(cfg: SweepConfig,
                  runner: Optional[Callable[[str, float], StabilityReport]] = None,
                  work_dir: Optional[Path] = None,
                  root_key_path: Optional[Path] = None,
                  root_public: Optional[bytes] = None) -> SweepResult:
    """Maximum parallel 1 Hz clients per mode; see module docstring."""
    cfg = replace(cfg, experiment="clients")
    if runner is None:
        runner = make_real_runner(cfg, work_dir, root_key_path, root_public)
    return _sweep(cfg, runner)


def sweep_load(cfg: SweepConfig,
               runner: Optional[Callable[[str, float], StabilityReport]] = None,
               work_dir: Optional[Path] = None,
               root_key_path: Optional[Path] = None,
               root_public: Optional[bytes] = None) -> SweepResult:
    """Maximum single-client input load (bytes/s) per mode."""
    cfg = replace(cfg, experiment="load")
    if runner is None:
        runner = make_real_runner(cfg, work_dir, root_key_path, root_public)
    return _sweep(cfg, runner)


# ---------------------------------------------------------------------------
# Overhead calibration: secure path tuned to ~0.5x plain throughput.


def reference_batch(n_lines: int = 64, seed: int = 11) -> BatchRecord:
    gen = RRGenerator(SensorConfig(
        client_id="calibration", seed=seed,
        phases=(ActivityPhase(label="steady", duration_s=1_000_000.0,
                              target_hr_bpm=60.0, rr_jitter_ms=20.0),)))
    lines = []
    for _ in range(n_lines):
        s = gen.next_sample()
        lines.append((s.r_timestamp_ms, s.rr_interval_ms))
    return BatchRecord(client_id="calibration", lines=tuple(lines),
                       created_at_ms=0)


def calibrate_overhead(pipeline: PipelineConfig, root_key_path: Path,
                       root_public: bytes, batch_work_ms: float,
                       reps: int = 25) -> OverheadModel:
    """Measure both paths on a reference batch and size the crossing sleep
    so one secure batch costs about twice one plain batch.

    This is explicitly an emulation knob; it is disclosed in every report.
    """
    record = reference_batch()
    payload = record.serialize()

    def timed(fn) -> float:
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        samples.sort()
        return samples[len(samples) // 2] * 1000.0  # median, ms

    def plain_once():
        if batch_work_ms > 0:
            time.sleep(batch_work_ms / 1000.0)
        analyze_batch(record, pipeline.bands, pipeline.grid)

    t_plain = timed(plain_once)

    boundary = BoundaryProcess(EnclaveConfig(
        pipeline=pipeline, overhead=OverheadModel(),
        root_key_path=str(root_key_path)))
    try:
        channel = boundary.connect()
        _, sealer, opener = establish_session(
            channel, "calibration", pipeline.measurement(), root_public)

        def secure_once():
            if batch_work_ms > 0:
                time.sleep(batch_work_ms / 1000.0)
            env = sealer.seal(payload)
            status, reply = channel.process(env.encode())
            assert status == 0
            opener.open(secure.SealedEnvelope.decode(reply), secure.DIR_TO_CLIENT)

        t_secure0 = timed(secure_once)
        channel.close()
    finally:
        boundary.shutdown()

    extra_ms = max(0.0, 2.0 * t_plain - t_secure0)
    model = OverheadModel(per_call_ms=extra_ms / 2.0, per_kb_ms=0.0)
    log.info("calibration: plain %.2f ms, secure(no overhead) %.2f ms "
             "-> per_call_ms %.2f", t_plain, t_secure0, model.per_call_ms)
    return model


# ---------------------------------------------------------------------------
# Report emission.


def emit_report(results: Sequence[SweepResult], out_dir: Path) -> tuple[Path, Path]:
    """Write the per-point CSV and the human-readable summary table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep_points.csv"
    md_path = out_dir / "summary.md"

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for result in results:
            for p in result.all_points():
                writer.writerow([
                    result.experiment, p.mode, f"{p.point:g}",
                    int(p.stable), f"{p.mean_processing_ms:.3f}",
                    f"{result.overhead.per_call_ms:g}",
                    f"{result.overhead.per_kb_ms:g}", p.seed,
                ])

    lines = ["# Stability sweep summary", ""]
    for result in results:
        sec = result.outcomes.get("secure")
        pla = result.outcomes.get("plain")
        title = ("Maximum Number of Clients Served in Parallel"
                 if result.experiment == "clients"
                 else "Maximum Input Load per Second")
        unit = "# Clients" if result.experiment == "clients" else "Load (B/sec)"
        lines += [f"## {title}", "",
                  "| | Secure | Plain |", "|---|---|---|"]
        sec_max = sec.max_stable if sec and sec.max_stable is not None else float("nan")
        pla_max = pla.max_stable if pla and pla.max_stable is not None else float("nan")
        lines.append(f"| {unit} | {sec_max:g} | {pla_max:g} |")
        prop = result.proportion
        prop_s = f"{prop:.2f}" if prop is not None else "n/a"
        lines.append(f"| Proportion | {prop_s} | 1 |")
        flags = []
        for o in (sec, pla):
            if o is None:
                continue
            if o.never_unstable:
                flags.append(f"{o.mode}: never unstable up to the search bound")
            if o.non_monotone:
                flags.append(f"{o.mode}: persistent non-monotone stability observed")
        if flags:
            lines += ["", *(f"- WARNING: {f}" for f in flags)]
        lines += ["",
                  f"Overhead emulation (disclosed): per_call_ms="
                  f"{result.overhead.per_call_ms:g}, per_kb_ms="
                  f"{result.overhead.per_kb_ms:g}; desk-scale run of "
                  f"{result.config.run_duration_s:g} s per point.", ""]
    md_path.write_text("\n".join(lines))
    return csv_path, md_path
