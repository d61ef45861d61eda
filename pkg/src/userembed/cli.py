"""Command-line entry point: gen-data, train, serve, simulate, report.

Exit codes: 0 success, 1 usage error (bad arguments, missing
prerequisites), 2 failed acceptance gate under --check, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigFileError, RunConfig, build_model_config, default_run_config, load_run_config, write_example_config
from .experiments import ExperimentReport, run_pooling_ablation, run_scheme_comparison
from .fstore import FeatureStore, StoreConfig
from .model import UserModel
from .service import EmbeddingService, ServingMode
from .snapshot import model_from_snapshot
from .synth import DayFileStream, LatentWorld, write_day_file
from .trainer import SnapshotStore, Trainer
from .wire import EmbeddingServer

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_GATE_FAILED = 2
EXIT_INTERNAL = 3


class UsageError(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    if args.config is None:
        return default_run_config()
    return load_run_config(args.config)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, drift=dataclasses.replace(cfg.drift, seed=args.seed), seeds=(args.seed,))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(_load_config(args), args)
    days = args.days if args.days is not None else cfg.experiment.days_total
    if days < 0:
        raise UsageError("--days must be >= 0")
    out = _out_dir(cfg) / "data"
    out.mkdir(parents=True, exist_ok=True)
    world = LatentWorld(cfg.drift)
    fingerprint = cfg.fingerprint()
    manifest = {"fingerprint": fingerprint, "seed": cfg.drift.seed, "days": []}
    for day in range(days):
        path = out / f"day_{day:04d}.bin"
        digest = write_day_file(world.events_for_day(day), path, fingerprint=fingerprint)
        manifest["days"].append({"day": day, "path": path.name, "sha256": digest})
        world.release_day(day)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {days} day files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args), args)
    out = _out_dir(cfg)
    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        raise UsageError(f"no generated data at {data_dir}; run gen-data first")
    manifest = json.loads((data_dir / "manifest.json").read_text())
    days = [entry["day"] for entry in manifest["days"]]
    if not days:
        raise UsageError("data manifest lists no days")
    stream = DayFileStream(data_dir)
    model = UserModel(build_model_config(cfg), seed=cfg.train.seed)
    store = SnapshotStore(out / "snapshots", retention=max(8, len(days) + 1))
    trainer = Trainer(model, cfg.train, store)
    initial = min(cfg.train.initial_days, len(days))
    trainer.train_initial(stream, range(days[0], days[0] + initial))
    for day in range(days[0] + initial, days[-1] + 1, cfg.train.cadence):
        trainer.recurring_update(stream, day + cfg.train.cadence - 1)
    meta = {
        "fingerprint": cfg.fingerprint(),
        "versions": store.versions(),
        "day_losses": {str(k): v for k, v in trainer.day_losses.items()},
    }
    (out / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"published versions {store.versions()} to {out / 'snapshots'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _apply_overrides(_load_config(args), args)
    out = _out_dir(cfg)
    snap_dir = out / "snapshots"
    if not (snap_dir / "manifest.json").exists():
        raise UsageError(f"no snapshots at {snap_dir}; run train first")
    store = SnapshotStore.open(snap_dir)
    snapshot = store.latest()
    model_cfg = build_model_config(cfg)
    mode_kind = args.mode or cfg.serving.mode
    mode = {
        "frozen": ServingMode.frozen(),
        "offline_batch": ServingMode.offline_batch(),
        "realtime": ServingMode.realtime(cfg.serving.budget_ms),
        "async": ServingMode.async_serving(),
    }.get(mode_kind)
    if mode is None:
        raise UsageError(f"unknown serving mode {mode_kind!r}")

    models: dict[int, object] = {}

    def compute_fn(snap, user_id, features):
        mdl = models.get(snap.version)
        if mdl is None:
            mdl = model_from_snapshot(model_cfg, snap)
            models[snap.version] = mdl
        return mdl.user_embeddings(features)

    fstore = FeatureStore(
        StoreConfig(k=cfg.model.k_embeddings, dim=cfg.model.dim,
                    history=cfg.store.history, pool_window=cfg.store.pool_window)
    )
    service = EmbeddingService(
        compute_fn,
        fstore,
        mode,
        queue_capacity=cfg.serving.queue_capacity,
        workers=cfg.serving.workers,
        compute_delay=cfg.serving.compute_delay_ms / 1e3,
    )
    service.start(snapshot)
    port = args.port or cfg.serving.port
    server = EmbeddingServer(("127.0.0.1", port), service)
    print(f"serving mode={mode.kind} snapshot v{snapshot.version} on 127.0.0.1:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        service.stop()
        metrics_path = out / "serve_metrics.txt"
        metrics_path.write_text(service.metrics.render_text())
        print(f"metrics written to {metrics_path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(_load_config(args), args)
    out = _out_dir(cfg)
    if cfg.experiment.kind == "scheme_comparison":
        report = run_scheme_comparison(cfg, out)
        gates = ["ordering_gate_passed", "async_gap_gate_passed"]
    else:
        report = run_pooling_ablation(cfg, out)
        gates = ["ap_gate_passed", "raw_degradation_gate_passed"]
    print(report.render_text())
    if args.check and not all(report.aggregate[g] for g in gates):
        failed = [g for g in gates if not report.aggregate[g]]
        print(f"acceptance gate failed: {failed}", file=sys.stderr)
        return EXIT_GATE_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    reports = sorted(run_dir.glob("*.json"))
    loaded: list[ExperimentReport] = []
    for path in reports:
        try:
            loaded.append(ExperimentReport.load(path))
        except (ValueError, KeyError, TypeError):
            continue
    if not loaded:
        raise UsageError(f"no experiment reports found in {run_dir}")
    fingerprints = {r.fingerprint for r in loaded}
    if len(fingerprints) > 1:
        raise UsageError(f"refusing to merge reports with differing config fingerprints: {sorted(fingerprints)}")
    text = "\n".join(r.render_text() for r in loaded)
    (run_dir / "report.txt").write_text(text)
    print(text)
    return EXIT_OK


def cmd_example_config(args) -> int:
    write_example_config(args.path)
    print(f"wrote example config to {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="userembed",
        description="Train, serve, and evaluate drifting-stream user embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="run config YAML (defaults are used when omitted)")
        p.add_argument("--out", help="override out_dir")
        p.add_argument("--seed", type=int, help="override the run seed")

    p = sub.add_parser("gen-data", help="write synthetic day files")
    add_common(p)
    p.add_argument("--days", type=int, help="number of days (default: experiment.days_total)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="initial plus recurring training over generated data")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="start the wire-protocol embedding service")
    add_common(p)
    p.add_argument("--mode", choices=["frozen", "offline_batch", "realtime", "async"])
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("simulate", help="run the configured experiment")
    add_common(p)
    p.add_argument("--check", action="store_true", help="exit 2 when a directional gate fails")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render experiment reports from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("example-config", help="write a fully commented example config")
    p.add_argument("path")
    p.set_defaults(func=cmd_example_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
