"""On-disk store of daily population snapshots.

Layout under ``root``::

    manifest.ini                      feature schema the store was created with
    snapshots/YYYY-MM-DD.ndjson.gz    header line, then one relay per line
    snapshots/YYYY-MM-DD.sha256       SHA-256 of the uncompressed content

Relay lines hold ``id``, ``features`` (``null`` for a missing value),
``consensus_weight`` and ``role_probs``. Files are gzip with a zero mtime so
equal content gives equal bytes. Re-storing a date with equal content is a
no-op; differing content is a conflict unless overwriting is requested.
Missing days are reported, never filled.
"""

from __future__ import annotations

import datetime as dt
import gzip
import hashlib
import io
import json
import logging
import math
import threading
from collections import defaultdict
from pathlib import Path

import numpy as np

from .population import WindowFrame
from .schema import FeatureSchema, SchemaError, check_schema_hash

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "relaygeom-snapshot"
SNAPSHOT_VERSION = 1


class SnapshotConflictError(RuntimeError):
    """A stored date already holds different content."""


class SnapshotCorruptError(ValueError):
    """A snapshot file fails its hash check or cannot be parsed."""


def _num(v: float):
    return None if math.isnan(v) else float(v)


def serialize_frame(frame: WindowFrame, schema_hash: str) -> bytes:
    header = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION,
              "date": frame.date.isoformat(), "schema_hash": schema_hash, "n_relays": len(frame)}
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for i in range(len(frame)):
        lines.append(json.dumps({
            "id": str(frame.ids[i]),
            "features": [_num(v) for v in frame.features[i]],
            "consensus_weight": float(frame.consensus_weight[i]),
            "role_probs": [float(p) for p in frame.role_probs[i]],
        }, sort_keys=True, separators=(",", ":"), allow_nan=False))
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_frame(blob: bytes, expected_schema_hash: str | None = None) -> WindowFrame:
    text = blob.decode("utf-8").splitlines()
    if not text:
        raise SnapshotCorruptError("empty snapshot")
    try:
        header = json.loads(text[0])
        if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
            raise SnapshotCorruptError(f"unsupported snapshot header {header}")
        if expected_schema_hash is not None:
            check_schema_hash(expected_schema_hash, header["schema_hash"], f"snapshot {header['date']}")
        rows = [json.loads(line) for line in text[1:] if line]
        if len(rows) != header["n_relays"]:
            raise SnapshotCorruptError(f"header says {header['n_relays']} relays, found {len(rows)}")
        feats = np.array([[np.nan if v is None else v for v in r["features"]] for r in rows], dtype=float)
        return WindowFrame(
            date=dt.date.fromisoformat(header["date"]),
            ids=[r["id"] for r in rows],
            features=feats,
            consensus_weight=[r["consensus_weight"] for r in rows],
            role_probs=[r["role_probs"] for r in rows],
            schema_hash=header["schema_hash"],
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotCorruptError(f"malformed snapshot: {exc}") from exc


def _gzip(blob: bytes) -> bytes:
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
        gz.write(blob)
    return buf.getvalue()


class SnapshotStore:
    """One snapshot file per calendar day, tied to one feature schema."""

    def __init__(self, root, schema: FeatureSchema | None = None):
        self.root = Path(root)
        self.snapshot_dir = self.root / "snapshots"
        manifest = self.root / "manifest.ini"
        if manifest.exists():
            stored = FeatureSchema.load(manifest)
            if schema is not None:
                check_schema_hash(schema.hash(), stored.hash(), f"store {self.root}")
            self.schema = stored
        else:
            self.schema = schema or FeatureSchema.default()
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            self.schema.save(manifest)
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        self.schema_hash = self.schema.hash()
        self._locks = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock(self, date: dt.date) -> threading.Lock:
        with self._locks_guard:
            return self._locks[date]

    def path_for(self, date: dt.date) -> Path:
        return self.snapshot_dir / f"{date.isoformat()}.ndjson.gz"

    def hash_path(self, date: dt.date) -> Path:
        return self.snapshot_dir / f"{date.isoformat()}.sha256"

    def stored_hash(self, date: dt.date) -> str | None:
        p = self.hash_path(date)
        return p.read_text(encoding="ascii").split()[0] if p.exists() else None

    def put(self, frame: WindowFrame, overwrite: bool = False) -> bool:
        """Store ``frame``; returns False when identical content is already stored."""
        if frame.schema_hash is not None:
            check_schema_hash(self.schema_hash, frame.schema_hash, f"frame {frame.date}")
        if frame.features.shape[1] != self.schema.n_features:
            raise SchemaError(f"frame has {frame.features.shape[1]} features, schema {self.schema.n_features}")
        blob = serialize_frame(frame, self.schema_hash)
        digest = hashlib.sha256(blob).hexdigest()
        with self._lock(frame.date):
            old = self.stored_hash(frame.date)
            if old == digest:
                logger.info("%s: unchanged, no write", frame.date)
                return False
            if old is not None and not overwrite:
                raise SnapshotConflictError(
                    f"{frame.date}: stored content differs (stored {old[:12]}, new {digest[:12]})")
            path = self.path_for(frame.date)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(_gzip(blob))
            tmp.replace(path)
            hp = self.hash_path(frame.date)
            htmp = hp.with_name(hp.name + ".tmp")
            htmp.write_text(f"{digest}  {path.name}\n", encoding="ascii")
            htmp.replace(hp)
        return True

    def get(self, date: dt.date) -> WindowFrame:
        path = self.path_for(date)
        if not path.exists():
            raise FileNotFoundError(f"no snapshot for {date}")
        try:
            blob = gzip.decompress(path.read_bytes())
        except (OSError, EOFError) as exc:
            raise SnapshotCorruptError(f"{path}: {exc}") from exc
        want = self.stored_hash(date)
        if want is not None and hashlib.sha256(blob).hexdigest() != want:
            raise SnapshotCorruptError(f"{path}: content hash does not match its sidecar")
        frame = deserialize_frame(blob, self.schema_hash)
        if frame.date != date:
            raise SnapshotCorruptError(f"{path}: header date {frame.date} != {date}")
        return frame

    def dates(self) -> list[dt.date]:
        out = []
        for p in self.snapshot_dir.glob("*.ndjson.gz"):
            try:
                out.append(dt.date.fromisoformat(p.name[:10]))
            except ValueError:
                logger.warning("ignoring stray file %s", p)
        return sorted(out)

    def gaps(self, start: dt.date | None = None, end: dt.date | None = None) -> list[dt.date]:
        """Calendar days in [start, end] without a snapshot (defaults: stored extent)."""
        have = set(self.dates())
        if not have and (start is None or end is None):
            return []
        start = start or min(have)
        end = end or max(have)
        n = (end - start).days + 1
        return [d for d in (start + dt.timedelta(days=i) for i in range(max(n, 0))) if d not in have]

    def load_range(self, start: dt.date | None = None, end: dt.date | None = None) -> list[WindowFrame]:
        """Stored frames with dates in [start, end], oldest first; gaps are skipped."""
        return [self.get(d) for d in self.dates()
                if (start is None or d >= start) and (end is None or d <= end)]
