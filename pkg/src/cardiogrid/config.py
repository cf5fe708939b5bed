"""Flat `section.key = value` configuration with strict key checking.

Unknown keys are rejected so typos fail fast; every run logs its fully
resolved configuration.  The CARDIOGRID_CONFIG environment variable names
the default config path, and command-line flags override file values.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

from .enclave import OverheadModel, PipelineConfig
from .hrv import FrequencyBands, SpectralGrid
from .sensor import ActivityPhase, Modulation, SensorConfig

log = logging.getLogger(__name__)

ENV_CONFIG = "CARDIOGRID_CONFIG"

KNOWN_KEYS = {
    "seed",
    "clients",
    "drop.root",
    "broker.host", "broker.port", "broker.queue_depth",
    "enclave.host", "enclave.port",
    "pipeline.version",
    "bands.vlf_low", "bands.vlf_high", "bands.lf_low", "bands.lf_high",
    "bands.hf_low", "bands.hf_high",
    "grid.f_min", "grid.f_max", "grid.step",
    "engine.interval_s", "engine.mode", "engine.workers",
    "engine.batch_work_ms", "engine.warmup_intervals", "engine.metrics_path",
    "engine.duration_s", "engine.echo_metrics",
    "overhead.per_call_ms", "overhead.per_kb_ms",
    "attestation.root_key", "attestation.root_pub",
    "bench.duration_s", "bench.interval_s", "bench.lower", "bench.upper",
    "bench.tolerance_clients", "bench.tolerance_load", "bench.modes",
    "bench.batch_work_ms", "bench.out_dir", "bench.early_abort",
    "bench.client_rate_hz",
}

CLIENT_FIELDS = {"seed", "pacing", "phases", "flush_interval_s", "max_lines"}


class ConfigError(Exception):
    pass


def _check_key(key: str) -> None:
    if key in KNOWN_KEYS:
        return
    if key.startswith("client."):
        parts = key.split(".")
        if len(parts) == 3 and parts[2] in CLIENT_FIELDS:
            return
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        _check_key(key)
        values[key] = value.strip()
    return values


class RunConfig:
    """Resolved configuration: file values plus flag overrides."""

    def __init__(self, values: Optional[dict[str, str]] = None):
        self.values = dict(values or {})

    @classmethod
    def load(cls, path: Optional[str] = None,
             overrides: Optional[dict[str, str]] = None) -> "RunConfig":
        values: dict[str, str] = {}
        source = path or os.environ.get(ENV_CONFIG)
        if source:
            p = Path(source)
            if not p.is_file():
                raise ConfigError(f"config file not found: {source}")
            values.update(parse_config_text(p.read_text()))
        for key, val in (overrides or {}).items():
            _check_key(key)
            values[key] = val
        return cls(values)

    def log_resolved(self, role: str) -> None:
        for key in sorted(self.values):
            log.info("[config:%s] %s = %s", role, key, self.values[key])

    # -- typed getters ------------------------------------------------------

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.values.get(key, default)

    def get_str(self, key: str, default: str) -> str:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")

    # -- section builders ---------------------------------------------------

    def bands(self) -> FrequencyBands:
        from .hrv import DEFAULT_BANDS

        d = DEFAULT_BANDS
        return FrequencyBands(
            vlf=(self.get_float("bands.vlf_low", d.vlf[0]),
                 self.get_float("bands.vlf_high", d.vlf[1])),
            lf=(self.get_float("bands.lf_low", d.lf[0]),
                self.get_float("bands.lf_high", d.lf[1])),
            hf=(self.get_float("bands.hf_low", d.hf[0]),
                self.get_float("bands.hf_high", d.hf[1])),
        )

    def grid(self) -> SpectralGrid:
        from .hrv import DEFAULT_GRID

        g = DEFAULT_GRID
        return SpectralGrid(f_min=self.get_float("grid.f_min", g.f_min),
                            f_max=self.get_float("grid.f_max", g.f_max),
                            step=self.get_float("grid.step", g.step))

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(version=self.get_str("pipeline.version", "1"),
                              bands=self.bands(), grid=self.grid())

    def overhead(self) -> OverheadModel:
        return OverheadModel(
            per_call_ms=self.get_float("overhead.per_call_ms", 0.0),
            per_kb_ms=self.get_float("overhead.per_kb_ms", 0.0))

    def client_ids(self) -> list[str]:
        raw = self.get("clients")
        if not raw:
            return []
        return [c.strip() for c in raw.split(",") if c.strip()]

    def sensor_config(self, client_id: str) -> SensorConfig:
        prefix = f"client.{client_id}."
        seed = self.get_int(prefix + "seed", self.get_int("seed", 1))
        pacing = self.get_str(prefix + "pacing", "realtime")
        phases_raw = self.get(prefix + "phases")
        if phases_raw:
            phases = parse_phases(phases_raw)
        else:
            phases = (ActivityPhase(label="sedentary", duration_s=3600.0,
                                    target_hr_bpm=70.0, rr_jitter_ms=25.0,
                                    lf_mod=Modulation(20.0, 0.1),
                                    hf_mod=Modulation(10.0, 0.25)),)
        return SensorConfig(client_id=client_id, seed=seed, phases=phases,
                            pacing=pacing)

    def root_public(self) -> bytes:
        path = self.get("attestation.root_pub")
        if not path:
            raise ConfigError("attestation.root_pub is required for this role")
        return bytes.fromhex(Path(path).read_text().strip())


def parse_phases(raw: str) -> tuple[ActivityPhase, ...]:
    """Parse `label:dur_s:hr:jitter[:lf_amp@lf_hz[:hf_amp@hf_hz]]; ...`."""
    phases = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) < 4:
            raise ConfigError(f"phase needs label:duration:hr:jitter, got {chunk!r}")
        label, dur, hr, jitter = parts[:4]
        mods = []
        for spec in parts[4:6]:
            try:
                amp, freq = spec.split("@")
                mods.append(Modulation(float(amp), float(freq)))
            except ValueError:
                raise ConfigError(f"modulation must be amp@freq, got {spec!r}") from None
        lf = mods[0] if len(mods) > 0 else Modulation()
        hf = mods[1] if len(mods) > 1 else Modulation(0.0, 0.25)
        try:
            phases.append(ActivityPhase(label=label, duration_s=float(dur),
                                        target_hr_bpm=float(hr),
                                        rr_jitter_ms=float(jitter),
                                        lf_mod=lf, hf_mod=hf))
        except ValueError as exc:
            raise ConfigError(f"bad phase {chunk!r}: {exc}") from None
    if not phases:
        raise ConfigError("no phases parsed")
    return tuple(phases)
