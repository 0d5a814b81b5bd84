"""Gate cascade, event taxonomy and the restart-age forensic statistic."""

from __future__ import annotations

import datetime as dt
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, fields

import numpy as np

CH5_CV = "CH5_CV"
CH6_GLOBAL_EJT = "CH6_GLOBAL_EJT"
CH6_GUARD_ELASTIC = "CH6_GUARD_ELASTIC"
CH6_STIFF_FRACTURE = "CH6_STIFF_FRACTURE"
CH1_ROTATION = "CH1_ROTATION"
GATES = (CH5_CV, CH6_GLOBAL_EJT, CH6_GUARD_ELASTIC, CH6_STIFF_FRACTURE, CH1_ROTATION)
CH6_GATES = (CH6_GLOBAL_EJT, CH6_GUARD_ELASTIC, CH6_STIFF_FRACTURE)

PRECURSOR = "PRECURSOR"
REGIME_S = "REGIME_S"
REGIME_D = "REGIME_D"
REGIME_E = "REGIME_E"
REGIME_K_CANDIDATE = "REGIME_K_CANDIDATE"
MODE_F = "MODE_F"
NORMAL = "NORMAL"
LABELS = (PRECURSOR, REGIME_S, REGIME_D, REGIME_E, REGIME_K_CANDIDATE, MODE_F, NORMAL)

# numeric channels; a None value means the channel is absent for the window
CHANNELS = (
    "theta_deg", "delta_rho", "epsilon", "sigma_z", "cv",
    "alpha_global", "z_global", "alpha_guard", "z_guard", "alpha_exit", "z_exit",
    "shift_guard", "shift_exit", "shift_global", "delta_mg",
)


@dataclass(frozen=True)
class ChannelVector:
    """Per-window detection signals; absent channels are None and listed in ``missing``."""

    date: dt.date | None
    theta_deg: float | None = None
    delta_rho: float | None = None
    epsilon: float | None = None
    sigma_z: float | None = None
    cv: float | None = None
    alpha_global: float | None = None
    z_global: float | None = None
    alpha_guard: float | None = None
    z_guard: float | None = None
    alpha_exit: float | None = None
    z_exit: float | None = None
    shift_guard: float | None = None
    shift_exit: float | None = None
    shift_global: float | None = None
    delta_mg: float | None = None
    degenerate_cca: bool = False
    missing: frozenset = frozenset()

    def __post_init__(self):
        absent = set(self.missing)
        for name in CHANNELS:
            v = getattr(self, name)
            if v is None:
                absent.add(name)
                continue
            v = float(v)
            if math.isnan(v):
                absent.add(name)
                object.__setattr__(self, name, None)
                continue
            object.__setattr__(self, name, v)
            if name.startswith("alpha_") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            if (name.startswith("shift_") or name in ("cv", "delta_mg")) and v < 0:
                raise ValueError(f"{name}={v} must be nonnegative")
        unknown = absent - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels in missing: {sorted(unknown)}")
        for name in absent:
            object.__setattr__(self, name, None)
        object.__setattr__(self, "missing", frozenset(absent))
        object.__setattr__(self, "degenerate_cca", bool(self.degenerate_cca))

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["date"] = None if self.date is None else self.date.isoformat()
        out["missing"] = sorted(self.missing)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ChannelVector:
        kw = {name: d.get(name) for name in CHANNELS}
        date = d.get("date")
        return cls(
            date=dt.date.fromisoformat(date) if isinstance(date, str) else date,
            degenerate_cca=bool(d.get("degenerate_cca", False)),
            missing=frozenset(d.get("missing", ())),
            **kw,
        )


@dataclass(frozen=True)
class GateConfig:
    cv_threshold: float = 3.0
    global_ejt_z: float = -2.0
    elastic_z: float = 2.0
    fracture_z: float = -2.0
    theta_threshold_deg: float = 60.0
    shift_median: dict = field(default_factory=dict)
    greatly_exceeds_factor: float = 2.0
    dmg_threshold: float = 3.86
    sustain_windows: int = 3

    def __post_init__(self):
        if self.dmg_threshold <= 0:
            raise ValueError("dmg_threshold must be positive")
        if self.sustain_windows < 1:
            raise ValueError("sustain_windows must be >= 1")
        if self.greatly_exceeds_factor < 1:
            raise ValueError("greatly_exceeds_factor must be >= 1")
        object.__setattr__(self, "shift_median", {k: float(v) for k, v in self.shift_median.items()})


@dataclass(frozen=True)
class GateReport:
    date: dt.date | None
    fired: frozenset
    not_evaluable: frozenset
    values: dict
    notes: tuple = ()

    def as_dict(self) -> dict:
        return {
            "date": None if self.date is None else self.date.isoformat(),
            "fired": [g for g in GATES if g in self.fired],
            "not_evaluable": [g for g in GATES if g in self.not_evaluable],
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class EventClass:
    date: dt.date | None
    label: str
    fired: tuple
    rule: str
    notes: tuple = ()

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def provenance(self) -> dict:
        return {"fired": list(self.fired), "rule": self.rule, "notes": list(self.notes)}


def evaluate_gates(cv: ChannelVector, config: GateConfig) -> GateReport:
    """Pure threshold evaluation of the five gates for one window."""
    fired, absent, notes = set(), set(), []

    def need(gate, *names):
        miss = [n for n in names if cv.get(n) is None]
        if miss:
            absent.add(gate)
            notes.append(f"{gate} not evaluable: missing {', '.join(miss)}")
            return False
        return True

    if need(CH5_CV, "cv") and cv.cv > config.cv_threshold:
        fired.add(CH5_CV)
    if need(CH6_GLOBAL_EJT, "z_global") and cv.z_global < config.global_ejt_z:
        fired.add(CH6_GLOBAL_EJT)
    guard_median = config.shift_median.get("Guard")
    guard_ok = need(CH6_GUARD_ELASTIC, "z_guard", "shift_guard")
    frac_ok = need(CH6_STIFF_FRACTURE, "z_guard", "shift_guard")
    if guard_median is None:
        for gate in (CH6_GUARD_ELASTIC, CH6_STIFF_FRACTURE):
            absent.add(gate)
            notes.append(f"{gate} not evaluable: no Guard shift baseline")
        guard_ok = frac_ok = False
    if guard_ok and cv.z_guard > config.elastic_z and cv.shift_guard > guard_median:
        fired.add(CH6_GUARD_ELASTIC)
    if (frac_ok and cv.z_guard < config.fracture_z
            and cv.shift_guard > config.greatly_exceeds_factor * guard_median):
        fired.add(CH6_STIFF_FRACTURE)
    if need(CH1_ROTATION, "theta_deg") and cv.theta_deg > config.theta_threshold_deg:
        fired.add(CH1_ROTATION)
    values = {n: cv.get(n) for n in ("cv", "z_global", "z_guard", "shift_guard", "theta_deg", "delta_mg")}
    return GateReport(cv.date, frozenset(fired), frozenset(absent), values, tuple(notes))


def _elastic_run(history):
    """Trailing run of consecutive windows with the Guard elastic gate fired."""
    run = []
    for report, vec in reversed(history):
        if CH6_GUARD_ELASTIC not in report.fired:
            break
        run.append(vec)
    return run


def classify_event(history: Sequence[tuple[GateReport, ChannelVector]],
                   config: GateConfig | None = None) -> EventClass:
    """Label the latest window of ``history`` by the fixed precedence order.

    Only the trailing windows are read, so labels are causal: the first
    windows of a sustained elastic run read as REGIME_D until the run
    reaches ``sustain_windows``.
    """
    if not history:
        raise ValueError("empty history")
    config = config or GateConfig()
    report, vec = history[-1]
    fired = report.fired
    ordered = tuple(g for g in GATES if g in fired)

    def out(label, rule, *notes):
        return EventClass(report.date, label, ordered, rule, tuple(notes))

    if CH6_GLOBAL_EJT in fired:
        return out(REGIME_E, "global EJT z below threshold")
    if CH6_STIFF_FRACTURE in fired:
        return out(REGIME_K_CANDIDATE, "Guard stiff fracture without global fracture",
                   "forensic checklist required")
    if CH6_GUARD_ELASTIC in fired:
        run = _elastic_run(history)
        dmg_run = 0
        for v in run:
            if v.delta_mg is None or not v.delta_mg > config.dmg_threshold:
                break
            dmg_run += 1
        if dmg_run >= config.sustain_windows:
            return out(REGIME_S, f"Guard elastic with delta_mg > {config.dmg_threshold:g} "
                                 f"for {dmg_run} consecutive windows")
        if len(run) <= 2:
            return out(REGIME_D, f"Guard elastic isolated ({len(run)} window(s))")
        return out(REGIME_D, "Guard elastic sustained without mass divergence",
                   f"elastic run of {len(run)} windows; delta_mg sustained for {dmg_run}")
    if CH5_CV in fired:
        notes = ("rotation co-fired",) if CH1_ROTATION in fired else ()
        return out(PRECURSOR, "free-energy CV above threshold", *notes)
    if CH1_ROTATION in fired:
        if vec.z_global is not None and vec.z_global > config.global_ejt_z:
            return out(MODE_F, "rotation without fracture")
        return out(NORMAL, "rotation alone", "global EJT z not evaluable; rotation is not a standalone alarm")
    return out(NORMAL, "no gate fired")


def classify_sequence(vectors: Iterable[ChannelVector], config: GateConfig) -> list[tuple[GateReport, EventClass]]:
    """Evaluate and classify an ordered channel stream window by window."""
    history, out = [], []
    for vec in vectors:
        rep = evaluate_gates(vec, config)
        history.append((rep, vec))
        out.append((rep, classify_event(history[-max(config.sustain_windows, 3) - 1:], config)))
    return out


@dataclass(frozen=True)
class RestartAgeResult:
    ratio: float | None
    separation: float | None
    bimodal: bool
    evaluable: bool
    note: str = ""


def restart_age_bimodality(returning, nonreturning, ratio_threshold: float = 10.0,
                           separation_threshold: float = 2.0) -> RestartAgeResult:
    """Mean restart-age ratio between cohorts and a bimodality flag.

    The flag needs the ratio at or above ``ratio_threshold`` and an Ashman
    separation ``sqrt(2) |m1 - m2| / sqrt(s1^2 + s2^2)`` above
    ``separation_threshold``, i.e. cohort spreads small relative to the gap.
    """
    a = np.asarray(returning, dtype=float).ravel()
    b = np.asarray(nonreturning, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        return RestartAgeResult(None, None, False, False, "empty cohort")
    ma, mb = float(a.mean()), float(b.mean())
    if ma <= 0:
        return RestartAgeResult(None, None, False, False, "returning cohort mean is zero")
    ratio = mb / ma
    spread = math.sqrt(float(a.var()) + float(b.var()))
    sep = math.inf if spread == 0 else math.sqrt(2.0) * abs(mb - ma) / spread
    if spread == 0 and mb == ma:
        sep = 0.0
    flag = bool(ratio >= ratio_threshold and sep > separation_threshold)
    return RestartAgeResult(ratio, sep, flag, True)


def fpr_evaluation(reports: Sequence[GateReport], stable: Sequence[bool] | None = None) -> dict[str, float]:
    """Per-gate fraction of stable windows on which the gate fired."""
    reports = list(reports)
    if stable is not None:
        stable = list(stable)
        if len(stable) != len(reports):
            raise ValueError("stable mask length differs from report count")
        reports = [r for r, s in zip(reports, stable) if s]
    if not reports:
        raise ValueError("no stable windows to evaluate")
    n = len(reports)
    return {g: sum(g in r.fired for r in reports) / n for g in GATES}
