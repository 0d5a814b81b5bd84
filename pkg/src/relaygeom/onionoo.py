"""Onionoo details client and the relay document to 191-feature mapping.

The public endpoint serves only the latest consensus; the snapshot date is
read from ``relays_published``. Asking for any other date is a data error.
Historical backfill goes through an archived details document instead (see
:func:`frame_from_details`).
"""

from __future__ import annotations

import datetime as dt
import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import httpx
import numpy as np

from .population import WindowFrame
from .schema import COUNTRIES, EXIT_PORTS, PLATFORMS, RELAY_FLAGS, VERSION_STATUSES, FeatureSchema

logger = logging.getLogger(__name__)

MAX_SKIP_FRACTION = 0.05

# Onionoo flag spelling -> schema flag suffix
FLAG_MAP = {
    "Authority": "authority", "BadExit": "bad_exit", "Exit": "exit", "Fast": "fast",
    "Guard": "guard", "HSDir": "hsdir", "MiddleOnly": "middle_only",
    "NoEdConsensus": "no_ed_consensus", "Stable": "stable", "StaleDesc": "stale_desc",
    "Sybil": "sybil", "V2Dir": "v2dir", "Valid": "valid",
}
assert set(FLAG_MAP.values()) == set(RELAY_FLAGS)

_PLATFORM_WORDS = {"linux": "linux", "freebsd": "freebsd", "openbsd": "openbsd",
                   "netbsd": "netbsd", "windows": "windows", "darwin": "darwin", "mac": "darwin"}


class NetworkError(RuntimeError):
    """The endpoint stayed unreachable or kept failing after all retries."""


class SnapshotDataError(ValueError):
    """A details document that cannot become a snapshot."""


class MalformedRelayError(ValueError):
    """One relay document that cannot be mapped; the relay is skipped."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://onionoo.torproject.org"
    timeout: float = 30.0
    max_retries: int = 4
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    min_interval: float = 1.0

    def __post_init__(self):
        if self.timeout <= 0 or self.max_retries < 0 or self.backoff_base < 0 or self.min_interval < 0:
            raise ValueError("endpoint timeout must be positive; retries, backoff and interval nonnegative")


class OnionooClient:
    """Rate-limited GET client with exponential backoff on transient failures."""

    RETRY_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(self, config: EndpointConfig | None = None, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        self.config = config or EndpointConfig()
        self._http = httpx.Client(base_url=self.config.base_url, timeout=self.config.timeout,
                                  transport=transport, headers={"Accept-Encoding": "gzip"})
        self._sleep = sleep
        self._clock = clock
        self._last = None

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _throttle(self):
        if self._last is not None:
            wait = self.config.min_interval - (self._clock() - self._last)
            if wait > 0:
                self._sleep(wait)
        self._last = self._clock()

    def get_json(self, path: str, params: dict | None = None) -> dict:
        cfg = self.config
        last_err = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = min(cfg.backoff_cap, cfg.backoff_base * 2 ** (attempt - 1))
                logger.warning("retry %d/%d in %.1fs after %s", attempt, cfg.max_retries, delay, last_err)
                self._sleep(delay)
            self._throttle()
            try:
                resp = self._http.get(path, params=params)
            except httpx.TransportError as exc:
                last_err = exc
                continue
            if resp.status_code in self.RETRY_STATUS:
                last_err = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise NetworkError(f"{path}: HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise SnapshotDataError(f"{path}: response is not JSON") from exc
        raise NetworkError(f"{path}: gave up after {cfg.max_retries + 1} attempts ({last_err})")

    def details(self) -> dict:
        return self.get_json("/details", {"type": "relay", "running": "true"})


# -- document -> features ------------------------------------------------------------

def _parse_ts(value) -> dt.datetime:
    try:
        return dt.datetime.strptime(value, "%Y-%m-%d %H:%M:%S")
    except (TypeError, ValueError) as exc:
        raise MalformedRelayError(f"bad timestamp {value!r}") from exc


def _num(doc, key, default=math.nan) -> float:
    v = doc.get(key)
    if v is None:
        return default
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MalformedRelayError(f"{key} is not numeric: {v!r}")
    return float(v)


def _prob(doc, key) -> float:
    p = _num(doc, key, 0.0)
    if not 0.0 <= p <= 1.0:
        raise MalformedRelayError(f"{key}={p} outside [0, 1]")
    return p


def parse_version(version: str | None) -> tuple[float, float]:
    """("0.4.8.10") -> (series 8, patch 10); absent or unparsable -> NaN pair."""
    if not version:
        return math.nan, math.nan
    parts = version.split("-")[0].split(".")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        return math.nan, math.nan
    if len(nums) < 4:
        return math.nan, math.nan
    return float(nums[2]), float(nums[3])


def parse_platform(platform: str | None) -> str:
    """OS family from a platform string such as "Tor 0.4.8.10 on Linux"."""
    if not platform or " on " not in platform:
        return "other"
    os_part = platform.split(" on ", 1)[1].strip().lower()
    word = os_part.split()[0] if os_part else ""
    return _PLATFORM_WORDS.get(word, "other")


def _port_ranges(items) -> list[tuple[int, int]]:
    out = []
    for item in items:
        lo, _, hi = str(item).partition("-")
        try:
            out.append((int(lo), int(hi or lo)))
        except ValueError as exc:
            raise MalformedRelayError(f"bad port range {item!r}") from exc
    return out


def exit_ports(summary: dict | None) -> dict[int, bool]:
    """Which tracked ports the summary accepts; a missing summary accepts none."""
    if not summary:
        return {p: False for p in EXIT_PORTS}
    if "accept" in summary:
        ranges, accept = _port_ranges(summary["accept"]), True
    elif "reject" in summary:
        ranges, accept = _port_ranges(summary["reject"]), False
    else:
        raise MalformedRelayError("exit_policy_summary has neither accept nor reject")
    return {p: any(lo <= p <= hi for lo, hi in ranges) == accept for p in EXIT_PORTS}


def relay_features(doc: dict, schema: FeatureSchema, published: dt.datetime) -> np.ndarray:
    """Map one details document to the schema's feature vector (NaN = missing)."""
    if not isinstance(doc, dict):
        raise MalformedRelayError("relay document is not an object")
    if not isinstance(doc.get("fingerprint"), str) or not doc["fingerprint"]:
        raise MalformedRelayError("missing fingerprint")
    cw = _num(doc, "consensus_weight")
    if not cw >= 0:
        raise MalformedRelayError("missing or negative consensus_weight")
    x = np.full(schema.n_features, math.nan)
    ix = schema.index

    def put(name, value):
        x[ix(name)] = float(value)

    obs, rate, burst = (_num(doc, k) for k in ("observed_bandwidth", "bandwidth_rate", "bandwidth_burst"))
    adv = _num(doc, "advertised_bandwidth")
    if math.isnan(adv):
        adv = float(np.fmin(np.fmin(obs, rate), burst))
    put("running", bool(doc.get("running", True)))
    put("measured", bool(doc.get("measured", False)))
    put("observed_bandwidth", obs)
    put("bandwidth_rate", rate)
    put("bandwidth_burst", burst)
    put("advertised_bandwidth", adv)
    put("bandwidth_difference", rate - obs)
    put("bandwidth_ratio", obs / rate if rate > 0 else math.nan)
    put("burst_to_rate_ratio", burst / rate if rate > 0 else math.nan)
    for key in ("middle_probability", "guard_probability", "exit_probability"):
        put(key, _prob(doc, key))
    put("consensus_weight", cw)
    put("consensus_weight_fraction", _num(doc, "consensus_weight_fraction"))

    flags = doc.get("flags") or []
    if not isinstance(flags, list):
        raise MalformedRelayError("flags is not a list")
    for name, suffix in FLAG_MAP.items():
        put(f"flag_{suffix}", name in flags)

    put("latitude", _num(doc, "latitude"))
    put("longitude", _num(doc, "longitude"))
    day = 86400.0
    if doc.get("first_seen") is not None:
        put("lifespan_days", max((published - _parse_ts(doc["first_seen"])).total_seconds() / day, 0.0))
    if doc.get("last_restarted") is not None:
        put("days_since_restart", max((published - _parse_ts(doc["last_restarted"])).total_seconds() / day, 0.0))
    put("overload_general_timestamp", _num(doc, "overload_general_timestamp", 0.0) / 1000.0)

    addrs = doc.get("or_addresses") or []
    put("or_address_count", len(addrs))
    put("has_ipv6", any(str(a).startswith("[") for a in addrs))
    put("dir_port_open", doc.get("dir_address") is not None)
    put("hibernating", bool(doc.get("hibernating", False)))
    put("recommended_version", bool(doc.get("recommended_version", False)))
    contact = doc.get("contact")
    put("has_contact", bool(contact))
    put("contact_length", len(contact) if contact else 0)
    eff = doc.get("effective_family") or []
    alleged = doc.get("alleged_family") or []
    put("effective_family_size", len(eff))
    put("declared_family_size", len(eff) + len(alleged))
    put("alleged_family_size", len(alleged))
    put("indirect_family_size", len(doc.get("indirect_family") or []))
    series, patch = parse_version(doc.get("version"))
    put("tor_version_series", series)
    put("tor_version_patch", patch)
    status = str(doc.get("version_status") or "").replace(" ", "_")
    for s in VERSION_STATUSES:
        put(f"version_status_{s}", status == s)
    plat = parse_platform(doc.get("platform"))
    for p in PLATFORMS:
        put(f"platform_{p}", plat == p)
    for port, ok in exit_ports(doc.get("exit_policy_summary")).items():
        put(f"exit_port_{port}", ok)
    policy = doc.get("exit_policy") or []
    put("exit_policy_accept_count", sum(str(r).startswith("accept") for r in policy))
    put("exit_policy_reject_count", sum(str(r).startswith("reject") for r in policy))
    # uptime fractions live in the separate uptime documents; left missing here
    country = str(doc.get("country") or "").lower()
    for c in COUNTRIES:
        put(f"country_{c}", country == c)
    put("country_other", country not in COUNTRIES)
    return x


def role_probs(doc: dict) -> tuple[float, float, float]:
    """(guard, middle, exit) selection probabilities, in the population role order."""
    return _prob(doc, "guard_probability"), _prob(doc, "middle_probability"), _prob(doc, "exit_probability")


@dataclass
class IngestResult:
    frame: WindowFrame
    documents: list
    skipped: dict = field(default_factory=dict)  # fingerprint or index -> reason

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def frame_from_details(details: dict, schema: FeatureSchema | None = None,
                       date: dt.date | None = None) -> IngestResult:
    """Turn a details document into a dated frame, skipping malformed relays."""
    schema = schema or FeatureSchema.default()
    if not isinstance(details, dict) or not isinstance(details.get("relays"), list):
        raise SnapshotDataError("details document has no relay list")
    published = details.get("relays_published")
    try:
        published_at = _parse_ts(published)
    except MalformedRelayError as exc:
        raise SnapshotDataError(f"bad relays_published: {published!r}") from exc
    snap_date = published_at.date()
    if date is not None and date != snap_date:
        raise SnapshotDataError(
            f"endpoint published {snap_date}, requested {date}; only the latest consensus is served")
    docs = details["relays"]
    ids, rows, weights, probs, skipped = [], [], [], [], {}
    for i, doc in enumerate(docs):
        key = doc.get("fingerprint") if isinstance(doc, dict) and doc.get("fingerprint") else f"#{i}"
        try:
            x = relay_features(doc, schema, published_at)
            rp = role_probs(doc)
        except MalformedRelayError as exc:
            skipped[key] = str(exc)
            continue
        ids.append(doc["fingerprint"])
        rows.append(x)
        weights.append(x[schema.index("consensus_weight")])
        probs.append(rp)
    n = len(docs)
    if n == 0:
        raise SnapshotDataError("details document lists no relays")
    if len(skipped) / n > MAX_SKIP_FRACTION:
        raise SnapshotDataError(f"{len(skipped)} of {n} relays malformed; snapshot rejected")
    if skipped:
        logger.warning("%s: skipped %d malformed relays", snap_date, len(skipped))
    F = np.vstack(rows)
    cwf = schema.index("consensus_weight_fraction")
    total = float(np.sum(weights))
    missing = np.isnan(F[:, cwf])
    if missing.any() and total > 0:
        F[missing, cwf] = np.asarray(weights)[missing] / total
    frame = WindowFrame(date=snap_date, ids=ids, features=F, consensus_weight=weights,
                        role_probs=probs, schema_hash=schema.hash())
    frame.diagnostics["skipped_relays"] = len(skipped)
    return IngestResult(frame, docs, skipped)


def fetch_snapshot(client: OnionooClient, date: dt.date | None = None,
                   schema: FeatureSchema | None = None, store=None) -> tuple[IngestResult, bool]:
    """Fetch the latest details, derive the frame and persist it when ``store`` is given."""
    result = frame_from_details(client.details(), schema, date)
    written = store.put(result.frame) if store is not None else False
    return result, written
