"""Command-line entry point: ``relaygeom <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 model or schema mismatch, 4 network failure after retries.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path

from . import harness, modelio, records, synthetic
from .config import ConfigError, PipelineConfig, default_config, load_config, load_scenarios
from .gates import GATES, NORMAL, classify_sequence
from .onionoo import NetworkError, OnionooClient, SnapshotDataError, fetch_snapshot
from .schema import SchemaError
from .store import SnapshotConflictError, SnapshotCorruptError, SnapshotStore

logger = logging.getLogger("relaygeom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL, EXIT_NETWORK = 0, 1, 2, 3, 4

REPORT_CHANNELS = ("z_global", "z_guard", "shift_guard", "theta_deg", "cv", "delta_mg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline INI file")
    common.add_argument("--from", dest="start", type=_date, help="first date (inclusive)")
    common.add_argument("--to", dest="end", type=_date, help="last date (inclusive)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("--models", type=Path,
                        help="directory holding encoder.rgm, grbm.rgm and baselines.json "
                             "(overrides the configured model paths)")
    common.add_argument("--format", choices=("record", "table"), default="record")
    common.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    p = _Parser(prog="relaygeom", description="Relay population geometry pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    sub.add_parser("fetch", parents=[common], help="ingest the latest Onionoo snapshot into the store")
    t = sub.add_parser("train", parents=[common], help="fit and freeze the observers on the training window")
    t.add_argument("--force", action="store_true", help="replace existing model files")
    b = sub.add_parser("baseline", parents=[common], help="fit and freeze EJT baselines on stable windows")
    b.add_argument("--force", action="store_true", help="replace an existing baselines file")
    sub.add_parser("sweep", parents=[common], help="compute channels and labels over a date range")
    c = sub.add_parser("classify", parents=[common], help="classify one window from stored records")
    c.add_argument("--records", type=Path, required=True, help="record stream or channel table")
    c.add_argument("--date", type=_date, help="window to classify (default: the last one)")
    n = sub.add_parser("null", parents=[common], help="Monte Carlo null for the first canonical correlation")
    n.add_argument("--iterations", type=int, help="override the configured iteration count")
    s = sub.add_parser("synth", parents=[common], help="write a synthetic population into a store")
    s.add_argument("--scenario", type=Path, help="INI file of [event.*] sections")
    s.add_argument("--relays", type=int, default=2000)
    s.add_argument("--windows", type=int, default=30)
    s.add_argument("--start-date", type=_date, default=dt.date(2026, 1, 1))
    r = sub.add_parser("report", parents=[common], help="forensic summary of every non-NORMAL window")
    r.add_argument("--records", type=Path, required=True, help="record stream or channel table")
    return p


# -- helpers -----------------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.models is not None:
        m = args.models
        cfg = cfg.replace(encoder_path=m / "encoder.rgm", grbm_path=m / "grbm.rgm",
                          baselines_path=m / "baselines.json")
    return cfg


def _store(cfg: PipelineConfig, root=None) -> SnapshotStore:
    return SnapshotStore(root or cfg.store, cfg.load_schema())


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _refuse_overwrite(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise DataError(f"refusing to replace frozen file(s) {', '.join(existing)}; pass --force")


def _frames(store, start, end):
    frames = store.load_range(start, end)
    if not frames:
        raise DataError(f"no stored snapshots in {start}..{end}")
    gaps = store.gaps(start or frames[0].date, end or frames[-1].date)
    if gaps:
        logger.warning("%d missing day(s) in range: %s", len(gaps), ", ".join(map(str, gaps)))
    return frames


def _load_models(cfg, schema):
    return modelio.load_models(cfg.encoder_path, cfg.grbm_path, schema)


def _load_baselines(cfg, schema):
    if Path(cfg.baselines_path).exists():
        return modelio.load_baselines(cfg.baselines_path, schema.hash())
    logger.warning("no baselines file; using the configured constants and no shift medians")
    b = cfg.baseline
    return harness.Baselines(b, b, b, {})


def _read_channel_stream(path, fmt):
    if fmt == "table":
        return records.read_channel_table(path)
    return [(records.channels_from_record(d), d.get("label")) for d in records.read_records(path)]


def _gate_config(cfg):
    """Configured gates plus shift medians from the baselines file, if one exists."""
    if not Path(cfg.baselines_path).exists():
        return cfg.gates
    shift = modelio.load_baselines(cfg.baselines_path).shift_median
    return dataclasses.replace(cfg.gates, shift_median=dict(shift))


# -- commands ----------------------------------------------------------------------

def cmd_fetch(args, cfg):
    store = _store(cfg, args.out)
    with OnionooClient(cfg.network) as client:
        result, _ = fetch_snapshot(client, None, store.schema)
    d = result.frame.date
    if (args.start and d < args.start) or (args.end and d > args.end):
        raise DataError(f"endpoint serves {d}, outside the requested range; historical dates need an archive")
    written = store.put(result.frame)
    print(json.dumps({"date": d.isoformat(), "relays": len(result.frame),
                      "skipped": result.n_skipped, "written": written}, sort_keys=True))


def cmd_train(args, cfg):
    store = _store(cfg)
    start, end = args.start or cfg.training_start, args.end or cfg.training_end
    frames = _frames(store, start, end)
    training = cfg.training.with_seed(args.seed) if args.seed is not None else cfg.training
    enc, grbm = cfg.encoder_path, cfg.grbm_path
    _refuse_overwrite((enc, grbm), args.force)
    models = harness.train_models(frames, training, store.schema)
    Path(enc).parent.mkdir(parents=True, exist_ok=True)
    Path(grbm).parent.mkdir(parents=True, exist_ok=True)
    modelio.save_models(models, enc, grbm)
    print(json.dumps({"frames": len(frames), "from": frames[0].date.isoformat(),
                      "to": frames[-1].date.isoformat(), "encoder": str(enc), "grbm": str(grbm),
                      "encoder_hash": models.cdae.param_hash(), "grbm_hash": models.grbm.param_hash()},
                     sort_keys=True))


def cmd_baseline(args, cfg):
    store = _store(cfg)
    b_start, b_end = cfg.baseline_window
    frames = _frames(store, args.start or b_start, args.end or b_end)
    models = _load_models(cfg, store.schema)
    out = args.out or cfg.baselines_path
    _refuse_overwrite((out,), args.force)
    try:
        baselines = harness.fit_baselines(frames, models, cfg.ejt_threshold)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    modelio.save_baselines(out, baselines, store.schema.hash())
    print(json.dumps(modelio.baselines_to_dict(baselines, store.schema.hash()), sort_keys=True))


def cmd_sweep(args, cfg):
    start, end = args.start or cfg.sweep_start, args.end or cfg.sweep_end
    cfg.check_sweep(start, end)
    store = _store(cfg)
    models = _load_models(cfg, store.schema)
    baselines = _load_baselines(cfg, store.schema)
    lead = None if start is None else start - dt.timedelta(days=1)
    frames = _frames(store, lead, end)
    gate_config = dataclasses.replace(cfg.gates, shift_median=dict(baselines.shift_median))
    result = harness.run_sweep(frames, models, baselines, gate_config, cfg.ejt_threshold)
    recs = [r for r in result.records if start is None or r.date >= start]
    with _output(args.out) as fh:
        if args.format == "table":
            records.write_channel_table(((r.channels, r.label) for r in recs), fh)
        else:
            records.write_records(recs, fh)
    counts = {}
    for r in recs:
        counts[r.label] = counts.get(r.label, 0) + 1
    logger.info("swept %d windows: %s", len(recs), counts)


def cmd_classify(args, cfg):
    stream = _read_channel_stream(args.records, args.format)
    if not stream:
        raise DataError(f"{args.records}: no windows")
    vectors = [v for v, _ in stream]
    target = args.date or vectors[-1].date
    upto = [v for v in vectors if v.date <= target]
    if not upto or upto[-1].date != target:
        raise DataError(f"{args.records}: no window dated {target}")
    report, event = classify_sequence(upto, _gate_config(cfg))[-1]
    if args.format == "record" and args.out:
        with _output(args.out) as fh:
            fh.write(json.dumps({"date": target.isoformat(), "label": event.label,
                                 **event.provenance}, sort_keys=True) + "\n")
    print(f"{target.isoformat()} {event.label}")
    print(f"  rule: {event.rule}")
    print(f"  fired: {', '.join(event.fired) if event.fired else '(none)'}")
    if report.not_evaluable:
        print(f"  not evaluable: {', '.join(g for g in GATES if g in report.not_evaluable)}")
    for note in event.notes:
        print(f"  note: {note}")


def cmd_null(args, cfg):
    store = _store(cfg)
    models = _load_models(cfg, store.schema)
    empirical = None
    dates = [d for d in store.dates() if (args.start is None or d >= args.start)
             and (args.end is None or d <= args.end)]
    if dates:
        state = harness.frame_state(store.get(dates[-1]), models)
        empirical = None if state.cca is None else float(state.cca.rho1)
    res = harness.monte_carlo_null(models, args.iterations or cfg.null_iterations,
                                   seed=args.seed or 0, n_samples=cfg.null_samples,
                                   empirical_rho1=empirical)
    print(json.dumps({
        "iterations": res.iterations, "null_mean": res.null_mean, "null_std": res.null_std,
        "null_max": res.null_max, "empirical_rho1": res.empirical_rho1,
        "empirical_date": dates[-1].isoformat() if dates else None,
        "separation_sigma": res.separation_sigma, "n_degenerate": res.n_degenerate,
    }, sort_keys=True))


def cmd_synth(args, cfg):
    seed = args.seed or 0
    scfg = synthetic.SyntheticConfig(n_relays=args.relays, n_windows=args.windows,
                                     seed=seed, start_date=args.start_date)
    frames = synthetic.generate_population(scfg)
    scripts = load_scenarios(args.scenario) if args.scenario else []
    for script in scripts:
        try:
            frames = synthetic.inject_event(frames, script, seed)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    store = _store(cfg, args.out)
    written = sum(store.put(f) for f in frames)
    print(json.dumps({"store": str(store.root), "frames": len(frames), "written": written,
                      "from": frames[0].date.isoformat(), "to": frames[-1].date.isoformat(),
                      "events": [{"kind": s.kind, "start": s.start, "duration": s.duration}
                                 for s in scripts]}, sort_keys=True))


def _fmt(v):
    return "-" if v is None else f"{v:.4g}"


def cmd_report(args, cfg):
    stream = _read_channel_stream(args.records, args.format)
    results = classify_sequence([v for v, _ in stream], _gate_config(cfg))
    rows = [(vec, rep, ev) for (vec, _), (rep, ev) in zip(stream, results) if ev.label != NORMAL]
    with _output(args.out) as fh:
        fh.write("| date | class | gates fired | " + " | ".join(REPORT_CHANNELS) + " |\n")
        fh.write("|" + "---|" * (3 + len(REPORT_CHANNELS)) + "\n")
        for vec, rep, ev in rows:
            fh.write(f"| {vec.date} | {ev.label} | {', '.join(ev.fired)} | "
                     + " | ".join(_fmt(vec.get(c)) for c in REPORT_CHANNELS) + " |\n")
        fh.write(f"\n{len(rows)} of {len(stream)} windows non-NORMAL\n")
        for vec, rep, ev in rows:
            fh.write(f"\n{vec.date} {ev.label}: {ev.rule}\n")
            for note in ev.notes + rep.notes:
                fh.write(f"  - {note}\n")


COMMANDS = {
    "fetch": cmd_fetch, "train": cmd_train, "baseline": cmd_baseline, "sweep": cmd_sweep,
    "classify": cmd_classify, "null": cmd_null, "synth": cmd_synth, "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, modelio.ModelFileError) as exc:
        print(f"model/schema error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except NetworkError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (DataError, SnapshotDataError, SnapshotConflictError, SnapshotCorruptError,
            records.RecordFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
