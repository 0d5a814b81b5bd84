"""Pipeline configuration read from an INI file.

Example::

    [paths]
    store = store
    encoder = models/encoder.rgm
    grbm = models/grbm.rgm
    baselines = models/baselines.json
    ; schema = schema.ini          (optional; the built-in manifest otherwise)

    [training]
    start = 2026-01-19
    end = 2026-02-09
    seed = 0

    [baseline]
    mean = 0.750
    std = 0.113
    ; start/end default to the training window
    threshold = 0.90

    [sweep]
    ; start = 2026-02-10
    ; end = 2026-03-31

    [gates]
    cv_threshold = 3.0

    [network]
    base_url = https://onionoo.torproject.org
    min_interval = 1.0

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

from .cdae import CdaeTrainingConfig
from .ejt import EjtBaseline
from .gates import GateConfig
from .harness import TrainingConfig
from .onionoo import EndpointConfig
from .schema import FeatureSchema


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    store: Path = Path("store")
    schema_path: Path | None = None
    encoder_path: Path = Path("models/encoder.rgm")
    grbm_path: Path = Path("models/grbm.rgm")
    baselines_path: Path = Path("models/baselines.json")
    training_start: dt.date = dt.date(2026, 1, 19)
    training_end: dt.date = dt.date(2026, 2, 9)
    training: TrainingConfig = TrainingConfig()
    baseline: EjtBaseline = EjtBaseline()
    baseline_start: dt.date | None = None
    baseline_end: dt.date | None = None
    ejt_threshold: float = 0.90
    sweep_start: dt.date | None = None
    sweep_end: dt.date | None = None
    gates: GateConfig = GateConfig()
    network: EndpointConfig = EndpointConfig()
    null_iterations: int = 200
    null_samples: int = 2000
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.baseline.std > 0:
            raise ConfigError("baseline std must be positive")
        if self.training_end < self.training_start:
            raise ConfigError("training window ends before it starts")
        if self.baseline_window[1] < self.baseline_window[0]:
            raise ConfigError("baseline window ends before it starts")
        self.check_sweep(self.sweep_start, self.sweep_end)
        if not 0 < self.ejt_threshold < 1:
            raise ConfigError("EJT trace-mass threshold must lie in (0, 1)")
        if self.null_iterations < 1 or self.null_samples < 2:
            raise ConfigError("null iterations and samples must be positive")

    @property
    def baseline_window(self) -> tuple[dt.date, dt.date]:
        return (self.baseline_start or self.training_start, self.baseline_end or self.training_end)

    def check_sweep(self, start: dt.date | None, end: dt.date | None) -> None:
        """The sweep must begin after the training window closes."""
        if start is not None and start <= self.training_end:
            raise ConfigError(f"sweep start {start} does not follow the training window ending {self.training_end}")
        if start is not None and end is not None and end < start:
            raise ConfigError("sweep window ends before it starts")

    def load_schema(self) -> FeatureSchema:
        return FeatureSchema.load(self.schema_path) if self.schema_path else FeatureSchema.default()

    def replace(self, **kw) -> PipelineConfig:
        return dataclasses.replace(self, **kw)


def _date(sec, key):
    raw = sec.get(key)
    if raw is None or not raw.strip():
        return None
    try:
        return dt.date.fromisoformat(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: not an ISO date: {raw!r}") from exc


def _typed_section(parser, name, cls, base):
    """Override dataclass ``base`` fields from section ``name``, typed by the defaults."""
    if not parser.has_section(name):
        return base
    sec = parser[name]
    known = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key in sec:
        if key not in known:
            continue
        default = getattr(base, key)
        try:
            if isinstance(default, bool):
                kw[key] = sec.getboolean(key)
            elif isinstance(default, int):
                kw[key] = sec.getint(key)
            elif isinstance(default, float):
                kw[key] = sec.getfloat(key)
            elif isinstance(default, str):
                kw[key] = sec.get(key)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return dataclasses.replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


_KNOWN = {
    "paths": {"store", "schema", "encoder", "grbm", "baselines"},
    "training": {"start", "end", "seed", "cdae_epochs", "cdae_lambda_c", "grbm_epochs", "grbm_hidden"},
    "baseline": {"mean", "std", "start", "end", "threshold"},
    "sweep": {"start", "end"},
    "gates": {f.name for f in dataclasses.fields(GateConfig)} - {"shift_median"},
    "network": {f.name for f in dataclasses.fields(EndpointConfig)},
    "null": {"iterations", "samples"},
}


def load_config(path) -> PipelineConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for name in parser.sections():
        if name not in _KNOWN:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(parser[name]) - _KNOWN[name]
        if unknown:
            raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    return config_from_parser(parser, path.parent)


def config_from_parser(parser: configparser.ConfigParser, base_dir: Path) -> PipelineConfig:
    d = PipelineConfig()
    kw = {}

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    if parser.has_section("paths"):
        sec = parser["paths"]
        for key, attr in (("store", "store"), ("schema", "schema_path"), ("encoder", "encoder_path"),
                          ("grbm", "grbm_path"), ("baselines", "baselines_path")):
            if sec.get(key):
                kw[attr] = resolve(sec[key])
    for attr in ("store", "encoder_path", "grbm_path", "baselines_path"):
        kw.setdefault(attr, resolve(getattr(d, attr)))

    try:
        if parser.has_section("training"):
            sec = parser["training"]
            kw["training_start"] = _date(sec, "start") or d.training_start
            kw["training_end"] = _date(sec, "end") or d.training_end
            seed = sec.getint("seed", d.training.seed)
            cdae = CdaeTrainingConfig(epochs=sec.getint("cdae_epochs", d.training.cdae.epochs),
                                      lambda_c=sec.getfloat("cdae_lambda_c", d.training.cdae.lambda_c))
            kw["training"] = TrainingConfig(
                cdae=cdae, grbm_epochs=sec.getint("grbm_epochs", d.training.grbm_epochs),
                grbm_hidden=sec.getint("grbm_hidden", d.training.grbm_hidden)).with_seed(seed)
        if parser.has_section("baseline"):
            sec = parser["baseline"]
            kw["baseline"] = EjtBaseline(sec.getfloat("mean", d.baseline.mean),
                                         sec.getfloat("std", d.baseline.std))
            kw["baseline_start"] = _date(sec, "start")
            kw["baseline_end"] = _date(sec, "end")
            kw["ejt_threshold"] = sec.getfloat("threshold", d.ejt_threshold)
        if parser.has_section("sweep"):
            sec = parser["sweep"]
            kw["sweep_start"] = _date(sec, "start")
            kw["sweep_end"] = _date(sec, "end")
        if parser.has_section("null"):
            sec = parser["null"]
            kw["null_iterations"] = sec.getint("iterations", d.null_iterations)
            kw["null_samples"] = sec.getint("samples", d.null_samples)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    kw["gates"] = _typed_section(parser, "gates", GateConfig, d.gates)
    kw["network"] = _typed_section(parser, "network", EndpointConfig, d.network)
    try:
        return PipelineConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def default_config(base_dir=".") -> PipelineConfig:
    return config_from_parser(configparser.ConfigParser(), Path(base_dir))


# -- scenario files ------------------------------------------------------------------

def load_scenarios(path):
    """Read ``[event.*]`` sections into scenario scripts.

    Each section needs ``kind`` and ``start``; ``duration`` and ``magnitude``
    are optional and every other key is a numeric event parameter.
    """
    from .synthetic import SCENARIO_DEFAULTS, ScenarioScript, default_script

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    scripts = []
    for name in parser.sections():
        if not name.startswith("event"):
            raise ConfigError(f"scenario file: unexpected section [{name}]")
        sec = dict(parser[name])
        try:
            kind = sec.pop("kind").strip().upper()
            start = int(sec.pop("start"))
            base = default_script(kind, start)
            duration = int(sec.pop("duration", base.duration))
            magnitude = float(sec.pop("magnitude", base.magnitude))
            params = dict(SCENARIO_DEFAULTS[kind])
            for k, v in sec.items():
                if k not in params:
                    raise ConfigError(f"[{name}]: unknown parameter {k!r} for {kind}")
                params[k] = float(v)
            scripts.append(ScenarioScript(kind, start, duration, magnitude, params))
        except KeyError as exc:
            raise ConfigError(f"[{name}]: missing or unknown {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[{name}]: {exc}") from exc
    return scripts
