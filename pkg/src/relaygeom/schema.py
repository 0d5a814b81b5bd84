"""Feature schema for relay snapshots.

The default schema has 191 features. Seventeen of them are the clean continuous
features consumed by the geometric observer; the rest (flags, counters, one-hot
encodings) are only seen by the thermodynamic observer.

The manifest file is INI-formatted::

    [schema]
    version = 1
    clean_indices = 1,3,4,...

    [features]
    running = flag
    observed_bandwidth = bytes/s
    ...

Feature order is the order of keys in ``[features]``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

UNITS = frozenset(
    {"bytes/s", "degrees", "days", "probability", "unix-seconds", "dimensionless", "flag"}
)

N_FEATURES = 191
DEFAULT_CLEAN_INDICES = (1, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14, 28, 29, 30, 31, 32)

CLEAN_CATEGORIES = {
    "capacity": (
        "observed_bandwidth",
        "bandwidth_rate",
        "bandwidth_burst",
        "advertised_bandwidth",
        "bandwidth_difference",
        "bandwidth_ratio",
        "burst_to_rate_ratio",
    ),
    "role": (
        "middle_probability",
        "guard_probability",
        "exit_probability",
        "consensus_weight",
        "consensus_weight_fraction",
    ),
    "geo_temporal": ("latitude", "longitude", "lifespan_days", "days_since_restart"),
    "health": ("overload_general_timestamp",),
}

RELAY_FLAGS = (
    "authority",
    "bad_exit",
    "exit",
    "fast",
    "guard",
    "hsdir",
    "middle_only",
    "no_ed_consensus",
    "stable",
    "stale_desc",
    "sybil",
    "v2dir",
    "valid",
)
VERSION_STATUSES = ("recommended", "experimental", "obsolete", "new_in_series", "unrecommended")
PLATFORMS = ("linux", "freebsd", "openbsd", "netbsd", "windows", "darwin", "other")
EXIT_PORTS = (
    20, 21, 22, 23, 25, 53, 80, 110, 143, 194,
    443, 465, 587, 993, 995, 5222, 6667, 8080, 8443, 11371,
)
COUNTRIES = (
    "de", "us", "fr", "nl", "fi", "se", "ch", "gb", "ca", "ru",
    "pl", "ro", "at", "jp", "br", "ar", "lu", "no", "cz", "ua",
    "it", "es", "dk", "bg", "hu", "lt", "lv", "ee", "is", "ie",
    "be", "pt", "gr", "sk", "si", "hr", "rs", "md", "tr", "il",
    "in", "sg", "hk", "tw", "kr", "au", "nz", "za", "mx", "cl",
    "co", "pe", "uy", "cr", "pa", "ve", "ec", "bo", "py", "do",
    "vn", "th", "my", "id", "ph", "kz", "ge", "am", "az", "by",
    "cy", "mt", "mk", "al", "ba", "me", "li", "mc", "sm", "ad",
    "ae", "sa", "qa", "kw", "bh", "om", "jo", "lb", "eg", "ma",
    "tn", "dz", "ng", "ke", "gh", "sc", "mu", "pk", "bd", "lk",
    "np", "kh", "la", "mn", "uz", "kg", "tj", "ir", "iq",
)

CLEAN_NAMES = (
    "observed_bandwidth",
    "bandwidth_rate",
    "bandwidth_burst",
    "advertised_bandwidth",
    "bandwidth_difference",
    "bandwidth_ratio",
    "burst_to_rate_ratio",
    "middle_probability",
    "guard_probability",
    "exit_probability",
    "consensus_weight",
    "consensus_weight_fraction",
    "latitude",
    "longitude",
    "lifespan_days",
    "days_since_restart",
    "overload_general_timestamp",
)


def _default_features() -> list[tuple[str, str]]:
    feats: list[tuple[str, str]] = [
        ("running", "flag"),
        ("observed_bandwidth", "bytes/s"),
        ("measured", "flag"),
        ("bandwidth_rate", "bytes/s"),
        ("bandwidth_burst", "bytes/s"),
        ("advertised_bandwidth", "bytes/s"),
        ("bandwidth_difference", "bytes/s"),
        ("bandwidth_ratio", "dimensionless"),
        ("burst_to_rate_ratio", "dimensionless"),
        ("middle_probability", "probability"),
        ("guard_probability", "probability"),
        ("exit_probability", "probability"),
        ("effective_family_size", "dimensionless"),
        ("consensus_weight", "dimensionless"),
        ("consensus_weight_fraction", "probability"),
    ]
    feats += [(f"flag_{name}", "flag") for name in RELAY_FLAGS]
    feats += [
        ("latitude", "degrees"),
        ("longitude", "degrees"),
        ("lifespan_days", "days"),
        ("days_since_restart", "days"),
        ("overload_general_timestamp", "unix-seconds"),
        ("or_address_count", "dimensionless"),
        ("has_ipv6", "flag"),
        ("dir_port_open", "flag"),
        ("hibernating", "flag"),
        ("recommended_version", "flag"),
        ("has_contact", "flag"),
        ("contact_length", "dimensionless"),
        ("declared_family_size", "dimensionless"),
        ("alleged_family_size", "dimensionless"),
        ("indirect_family_size", "dimensionless"),
        ("tor_version_series", "dimensionless"),
        ("tor_version_patch", "dimensionless"),
    ]
    feats += [(f"version_status_{s}", "flag") for s in VERSION_STATUSES]
    feats += [(f"platform_{p}", "flag") for p in PLATFORMS]
    feats += [(f"exit_port_{p}", "flag") for p in EXIT_PORTS]
    feats += [
        ("exit_policy_accept_count", "dimensionless"),
        ("exit_policy_reject_count", "dimensionless"),
        ("uptime_fraction_week", "probability"),
        ("uptime_fraction_month", "probability"),
    ]
    feats += [(f"country_{c}", "flag") for c in COUNTRIES]
    feats.append(("country_other", "flag"))
    return feats


class SchemaError(ValueError):
    """Raised for malformed schemas or mismatched schema hashes."""


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names, per-feature units and the clean-feature subset."""

    names: tuple[str, ...]
    units: tuple[str, ...]
    clean_indices: tuple[int, ...] = DEFAULT_CLEAN_INDICES
    version: int = 1
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.names) != len(self.units):
            raise SchemaError("names and units differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("duplicate feature names")
        bad = [u for u in self.units if u not in UNITS]
        if bad:
            raise SchemaError(f"unknown unit tags: {sorted(set(bad))}")
        ci = self.clean_indices
        if len(ci) != 17:
            raise SchemaError(f"clean_indices must have 17 entries, got {len(ci)}")
        if any(b <= a for a, b in zip(ci, ci[1:])):
            raise SchemaError("clean_indices must be strictly increasing")
        if ci[0] < 0 or ci[-1] >= len(self.names):
            raise SchemaError("clean_indices out of range")
        if any(self.units[i] == "flag" for i in ci):
            raise SchemaError("clean features must be continuous")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @classmethod
    def default(cls) -> FeatureSchema:
        feats = _default_features()
        assert len(feats) == N_FEATURES, len(feats)
        return cls(tuple(n for n, _ in feats), tuple(u for _, u in feats))

    @property
    def n_features(self) -> int:
        return len(self.names)

    @property
    def clean_names(self) -> tuple[str, ...]:
        return tuple(self.names[i] for i in self.clean_indices)

    @property
    def flag_mask(self):
        import numpy as np

        return np.array([u == "flag" for u in self.units])

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def clean_position(self, name: str) -> int:
        """Position of ``name`` inside the 17-vector of clean features."""
        idx = self.index(name)
        try:
            return self.clean_indices.index(idx)
        except ValueError:
            raise SchemaError(f"{name!r} is not a clean feature") from None

    def hash(self) -> str:
        payload = {
            "version": self.version,
            "names": list(self.names),
            "units": list(self.units),
            "clean_indices": list(self.clean_indices),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_manifest(self) -> str:
        lines = [
            "[schema]",
            f"version = {self.version}",
            "clean_indices = " + ",".join(str(i) for i in self.clean_indices),
            "",
            "[features]",
        ]
        lines += [f"{n} = {u}" for n, u in zip(self.names, self.units)]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_manifest(), encoding="utf-8")

    @classmethod
    def from_manifest(cls, text: str) -> FeatureSchema:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str  # keep feature-name case
        parser.read_string(text)
        try:
            version = parser.getint("schema", "version")
            raw = parser.get("schema", "clean_indices")
            items = list(parser.items("features"))
        except (configparser.Error, ValueError) as exc:
            raise SchemaError(f"malformed manifest: {exc}") from exc
        clean = tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)
        return cls(
            tuple(k for k, _ in items),
            tuple(v.strip() for _, v in items),
            clean_indices=clean,
            version=version,
        )

    @classmethod
    def load(cls, path: str | Path) -> FeatureSchema:
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))


def check_schema_hash(expected: str, actual: str, what: str = "frame") -> None:
    if expected != actual:
        raise SchemaError(
            f"schema hash mismatch: {what} has {actual[:12]}…, models expect {expected[:12]}…"
        )
