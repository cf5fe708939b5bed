"""Single executable with one subcommand per role.

Exit codes: 0 clean completion, 1 configuration/usage error, 2 runtime
fatal (boundary death, attestation failure).  All configuration comes from
a key-value config file (CARDIOGRID_CONFIG or --config) with flag overrides.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from . import bench as bench_mod
from . import secure
from .client import ClientPackage
from .config import ConfigError, RunConfig
from .enclave import (
    BoundaryChannel,
    BoundaryDown,
    EnclaveConfig,
    SpawnFailure,
    serve,
)
from .engine import Engine, EngineConfig, EngineFatal, verify_boundary
from .mqtt import Broker

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FATAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 with help on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file path (default: $CARDIOGRID_CONFIG)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cardiogrid",
                     description="privacy-preserving cardiac streaming testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", parents=[], help="run the MQTT-subset broker")
    _add_common(p)
    p.add_argument("--duration", type=float, default=0.0,
                   help="seconds to run (0 = until interrupted)")

    p = sub.add_parser("client", help="run one or more client packages")
    _add_common(p)
    p.add_argument("--id", action="append", dest="ids",
                   help="client id (repeatable; default: config `clients` list)")
    p.add_argument("--mode", choices=["secure", "plain"])
    p.add_argument("--duration", type=float, default=0.0)

    p = sub.add_parser("server", help="run the micro-batch engine")
    _add_common(p)
    p.add_argument("--mode", choices=["secure", "plain"])
    p.add_argument("--duration", type=float, default=0.0)

    p = sub.add_parser("enclave", help="run the trusted boundary process")
    _add_common(p)

    p = sub.add_parser("bench", help="stability sweeps")
    bench_sub = p.add_subparsers(dest="experiment", required=True)
    for exp in ("clients", "load"):
        bp = bench_sub.add_parser(exp)
        _add_common(bp)
        bp.add_argument("--duration", type=float, help="seconds per sweep point")
        bp.add_argument("--out-dir", help="report output directory")

    p = sub.add_parser("calibrate-overhead",
                       help="size the boundary overhead for ~0.5x throughput")
    _add_common(p)

    p = sub.add_parser("attest-check", help="verify the running boundary's identity")
    _add_common(p)

    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.load(args.config, overrides)


def _setup_logging(role: str) -> None:
    logging.basicConfig(
        level=logging.INFO,
        format=f"%(asctime)s {role} %(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _run_broker(cfg: RunConfig, args) -> int:
    broker = Broker(host=cfg.get_str("broker.host", "127.0.0.1"),
                    port=cfg.get_int("broker.port", 1883),
                    queue_depth=cfg.get_int("broker.queue_depth", 1000))
    broker.start()
    print(f"BROKER-READY port={broker.port}", flush=True)
    try:
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_OK


def _run_enclave(cfg: RunConfig, args) -> int:
    root_key = cfg.get("attestation.root_key")
    if not root_key:
        raise ConfigError("attestation.root_key is required for the enclave role")
    econfig = EnclaveConfig(
        pipeline=cfg.pipeline(),
        overhead=cfg.overhead(),
        root_key_path=root_key,
        host=cfg.get_str("enclave.host", "127.0.0.1"),
        port=cfg.get_int("enclave.port", 0),
    )

    def announce(port: int, measurement: bytes) -> None:
        print(f"ENCLAVE-READY port={port} measurement={measurement.hex()}", flush=True)

    try:
        return serve(econfig, ready=announce)
    except KeyboardInterrupt:
        return EXIT_OK


def _run_server(cfg: RunConfig, args) -> int:
    mode = args.mode or cfg.get_str("engine.mode", "secure")
    drop_root = Path(cfg.get_str("drop.root", "drop"))
    metrics_path = cfg.get("engine.metrics_path")
    channel = None
    if mode == "secure":
        addr = (cfg.get_str("enclave.host", "127.0.0.1"),
                cfg.get_int("enclave.port", 0))
        try:
            channel = BoundaryChannel(*addr, timeout=None)
            verify_boundary(channel, cfg.pipeline().measurement(), cfg.root_public())
        except (OSError, BoundaryDown) as exc:
            log.error("cannot reach boundary at %s:%d: %s", addr[0], addr[1], exc)
            return EXIT_FATAL
        except secure.SecureChannelError as exc:
            log.error("attestation gate failed: %s: %s", type(exc).__name__, exc)
            return EXIT_FATAL
        log.info("boundary attested; serving in secure mode")

    engine = Engine(EngineConfig(
        drop_root=drop_root,
        mode=mode,
        interval_s=cfg.get_float("engine.interval_s", 10.0),
        worker_count=cfg.get_int("engine.workers", 1),
        warmup_intervals=cfg.get_int("engine.warmup_intervals", 2),
        batch_work_ms=cfg.get_float("engine.batch_work_ms", 0.0),
        bands=cfg.bands(),
        grid=cfg.grid(),
        metrics_path=Path(metrics_path) if metrics_path else None,
        echo_metrics=cfg.get_bool("engine.echo_metrics", False),
    ), boundary=channel)

    duration = args.duration or cfg.get_float("engine.duration_s", 0.0)
    try:
        if duration > 0:
            engine.run_for(duration)
        else:
            engine.start()
            print("SERVER-READY", flush=True)
            while True:
                time.sleep(0.5)
                if engine.fatal is not None:
                    raise EngineFatal(engine.fatal)
    except KeyboardInterrupt:
        engine.stop()
    except EngineFatal as exc:
        log.error("engine fatal: %s", exc)
        return EXIT_FATAL
    finally:
        if channel is not None:
            channel.close()
    report = engine.stability()
    log.info("run complete: %d intervals, mean processing %.1f ms, unstable=%s",
             len(report.metrics), report.mean_processing_ms, report.unstable)
    return EXIT_OK


def _run_client(cfg: RunConfig, args) -> int:
    ids = args.ids or cfg.client_ids()
    if not ids:
        raise ConfigError("no client ids given (--id or `clients` config key)")
    mode = args.mode or cfg.get_str("engine.mode", "secure")
    drop_root = Path(cfg.get_str("drop.root", "drop"))
    broker_host = cfg.get_str("broker.host", "127.0.0.1")
    broker_port = cfg.get_int("broker.port", 1883)
    enclave_addr = root_pub = None
    if mode == "secure":
        enclave_addr = (cfg.get_str("enclave.host", "127.0.0.1"),
                        cfg.get_int("enclave.port", 0))
        root_pub = cfg.root_public()

    packages = []
    try:
        for cid in ids:
            pkg = ClientPackage(
                sensor_config=cfg.sensor_config(cid),
                drop_root=drop_root,
                broker_host=broker_host, broker_port=broker_port,
                mode=mode, enclave_addr=enclave_addr, root_public=root_pub,
                pipeline=cfg.pipeline(),
                flush_interval_s=cfg.get_float(f"client.{cid}.flush_interval_s", 5.0),
                max_lines=cfg.get_int(f"client.{cid}.max_lines", 64),
            )
            pkg.start()
            packages.append(pkg)
        print(f"CLIENT-READY ids={','.join(ids)}", flush=True)
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    except (OSError, BoundaryDown) as exc:
        log.error("client runtime failure: %s", exc)
        return EXIT_FATAL
    except secure.SecureChannelError as exc:
        log.error("attestation failed: %s: %s", type(exc).__name__, exc)
        return EXIT_FATAL
    finally:
        for pkg in packages:
            pkg.stop()
    return EXIT_OK


def _run_attest_check(cfg: RunConfig, args) -> int:
    addr = (cfg.get_str("enclave.host", "127.0.0.1"), cfg.get_int("enclave.port", 0))
    expected = cfg.pipeline().measurement()
    try:
        channel = BoundaryChannel(*addr, timeout=10.0)
    except OSError as exc:
        log.error("cannot reach boundary at %s:%d: %s", addr[0], addr[1], exc)
        return EXIT_FATAL
    try:
        verify_boundary(channel, expected, cfg.root_public())
    except secure.SecureChannelError as exc:
        log.error("attestation check failed: %s: %s", type(exc).__name__, exc)
        return EXIT_FATAL
    except BoundaryDown as exc:
        log.error("boundary unreachable: %s", exc)
        return EXIT_FATAL
    finally:
        channel.close()
    print(f"measurement={expected.hex()}")
    return EXIT_OK


def _run_calibrate(cfg: RunConfig, args) -> int:
    root_key = cfg.get("attestation.root_key")
    if not root_key:
        raise ConfigError("attestation.root_key is required for calibration")
    model = bench_mod.calibrate_overhead(
        cfg.pipeline(), Path(root_key), cfg.root_public(),
        batch_work_ms=cfg.get_float("bench.batch_work_ms", 100.0))
    print(f"overhead.per_call_ms = {model.per_call_ms:.3f}")
    print(f"overhead.per_kb_ms = {model.per_kb_ms:.3f}")
    return EXIT_OK


def _run_bench(cfg: RunConfig, args) -> int:
    import tempfile

    root_key = cfg.get("attestation.root_key")
    if not root_key:
        raise ConfigError("attestation.root_key is required for benchmarks")
    root_public = cfg.root_public()
    pipeline = cfg.pipeline()
    duration = args.duration or cfg.get_float("bench.duration_s", 120.0)

    overhead = None
    if "overhead.per_call_ms" in cfg.values or "overhead.per_kb_ms" in cfg.values:
        overhead = cfg.overhead()

    sweep_cfg = bench_mod.SweepConfig(
        experiment=args.experiment,
        run_duration_s=duration,
        interval_s=cfg.get_float("bench.interval_s", 10.0),
        client_rate_hz=cfg.get_float("bench.client_rate_hz", 1.0),
        lower_bound=cfg.get_float("bench.lower", 1.0),
        upper_bound=cfg.get_float("bench.upper",
                                  1024.0 if args.experiment == "clients" else 65536.0),
        tolerance_clients=cfg.get_int("bench.tolerance_clients", 4),
        tolerance_load_rel=cfg.get_float("bench.tolerance_load", 0.10),
        seed=cfg.get_int("seed", 7),
        batch_work_ms=cfg.get_float("bench.batch_work_ms", 100.0),
        overhead=overhead,
        pipeline=pipeline,
        early_abort=cfg.get_bool("bench.early_abort", True),
    )
    if sweep_cfg.overhead is None:
        log.info("no overhead model configured; calibrating")
        sweep_cfg.overhead = bench_mod.calibrate_overhead(
            pipeline, Path(root_key), root_public,
            batch_work_ms=sweep_cfg.batch_work_ms)

    out_dir = Path(args.out_dir or cfg.get_str("bench.out_dir", "bench-report"))
    with tempfile.TemporaryDirectory(prefix="cardiogrid-bench-") as tmp:
        work_dir = Path(tmp)
        if args.experiment == "clients":
            result = bench_mod.sweep_clients(sweep_cfg, work_dir=work_dir,
                                             root_key_path=Path(root_key),
                                             root_public=root_public)
        else:
            result = bench_mod.sweep_load(sweep_cfg, work_dir=work_dir,
                                          root_key_path=Path(root_key),
                                          root_public=root_public)
    csv_path, md_path = bench_mod.emit_report([result], out_dir)
    prop = result.proportion
    print(f"report written: {csv_path} {md_path}")
    print(f"proportion secure/plain: {prop:.3f}" if prop is not None
          else "proportion secure/plain: n/a")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    role = args.command if args.command != "bench" else f"bench-{args.experiment}"
    _setup_logging(role)
    try:
        cfg = _load_config(args)
        cfg.log_resolved(role)
        if args.command == "broker":
            return _run_broker(cfg, args)
        if args.command == "client":
            return _run_client(cfg, args)
        if args.command == "server":
            return _run_server(cfg, args)
        if args.command == "enclave":
            return _run_enclave(cfg, args)
        if args.command == "bench":
            return _run_bench(cfg, args)
        if args.command == "calibrate-overhead":
            return _run_calibrate(cfg, args)
        if args.command == "attest-check":
            return _run_attest_check(cfg, args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpawnFailure as exc:
        log.error("spawn failure: %s", exc)
        return EXIT_FATAL
    except EngineFatal as exc:
        log.error("fatal: %s", exc)
        return EXIT_FATAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
