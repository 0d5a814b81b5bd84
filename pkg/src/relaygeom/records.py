"""Serialized sweep output: NDJSON window records and a CSV channel table.

Both formats are lossless for the numeric channels. Records use JSON's
shortest round-trip float repr; the table writes 17 significant digits.
An absent channel is ``null`` in a record and an empty cell in the table.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
from collections.abc import Iterable
from pathlib import Path

from .gates import CHANNELS, GATES, ChannelVector, EventClass, GateReport

TABLE_COLUMNS = ("date",) + CHANNELS + ("degenerate_cca", "label")


class RecordFormatError(ValueError):
    """A record line or table row that cannot be parsed."""


def channel_record(vec: ChannelVector, report: GateReport, event: EventClass, rho=(),
                   ejt: dict | None = None, n_relays: int = 0) -> dict:
    """Record for one window from its channels, gate report and label."""
    return {
        "date": vec.date.isoformat(),
        "channels": {name: vec.get(name) for name in CHANNELS},
        "degenerate_cca": vec.degenerate_cca,
        "missing": sorted(vec.missing),
        "fired": [g for g in GATES if g in report.fired],
        "not_evaluable": [g for g in GATES if g in report.not_evaluable],
        "gate_notes": list(report.notes),
        "label": event.label,
        "rule": event.rule,
        "notes": list(event.notes),
        "rho": [float(r) for r in rho],
        "ejt": ejt or {},
        "n_relays": int(n_relays),
    }


def record_dict(rec) -> dict:
    """Flatten a harness ``WindowRecord`` into plain JSON types."""
    ejt = {}
    for cluster in sorted(rec.splits):
        entry = dict(rec.splits[cluster])
        entry["top10"] = [int(i) for i in rec.top10.get(cluster, [])]
        ejt[cluster] = entry
    return channel_record(rec.channels, rec.report, rec.event, rec.rho, ejt, rec.n_relays)


def dumps_record(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(records: Iterable, fh) -> int:
    """Write one JSON line per window record; returns the count."""
    n = 0
    for rec in records:
        d = rec if isinstance(rec, dict) else record_dict(rec)
        fh.write(dumps_record(d) + "\n")
        n += 1
    return n


def read_records(source) -> list[dict]:
    """Parse an NDJSON record stream from a path or text handle."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_records(fh)
    out = []
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"line {lineno}: {exc}") from exc
        if not isinstance(d, dict) or "date" not in d or "channels" not in d:
            raise RecordFormatError(f"line {lineno}: not a window record")
        out.append(d)
    return out


def channels_from_record(d: dict) -> ChannelVector:
    try:
        return ChannelVector.from_dict({
            **d["channels"],
            "date": d["date"],
            "degenerate_cca": d.get("degenerate_cca", False),
            "missing": d.get("missing", ()),
        })
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordFormatError(f"record {d.get('date')}: {exc}") from exc


def gate_report_from_record(d: dict) -> GateReport:
    return GateReport(dt.date.fromisoformat(d["date"]), frozenset(d.get("fired", ())),
                      frozenset(d.get("not_evaluable", ())), {}, tuple(d.get("gate_notes", ())))


def event_from_record(d: dict) -> EventClass:
    return EventClass(dt.date.fromisoformat(d["date"]), d["label"], tuple(d.get("fired", ())),
                      d.get("rule", ""), tuple(d.get("notes", ())))


# -- channel table -------------------------------------------------------------------

def _cell(v) -> str:
    return "" if v is None else format(v, ".17g")


def write_channel_table(rows: Iterable[tuple[ChannelVector, str | None]], fh) -> int:
    """CSV with one row per window; ``rows`` pairs each vector with its label."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    n = 0
    for vec, label in rows:
        w.writerow([vec.date.isoformat()] + [_cell(vec.get(c)) for c in CHANNELS]
                   + [int(vec.degenerate_cca), label or ""])
        n += 1
    return n


def channel_table_text(rows) -> str:
    buf = io.StringIO()
    write_channel_table(rows, buf)
    return buf.getvalue()


def read_channel_table(source) -> list[tuple[ChannelVector, str | None]]:
    """Inverse of :func:`write_channel_table`; ``source`` is a path or text handle."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            return read_channel_table(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if tuple(header or ()) != TABLE_COLUMNS:
        raise RecordFormatError("channel table header does not match the expected columns")
    out = []
    for lineno, row in enumerate(reader, 2):
        if len(row) != len(TABLE_COLUMNS):
            raise RecordFormatError(f"row {lineno}: expected {len(TABLE_COLUMNS)} cells, got {len(row)}")
        try:
            vals = {c: (float(x) if x != "" else None) for c, x in zip(CHANNELS, row[1:-2])}
            vec = ChannelVector(date=dt.date.fromisoformat(row[0]),
                                degenerate_cca=row[-2] == "1", **vals)
        except ValueError as exc:
            raise RecordFormatError(f"row {lineno}: {exc}") from exc
        out.append((vec, row[-1] or None))
    return out


def parse_channel_table(text: str) -> list[tuple[ChannelVector, str | None]]:
    return read_channel_table(io.StringIO(text))
