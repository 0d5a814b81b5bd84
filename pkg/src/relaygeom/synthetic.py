"""Synthetic relay populations with scripted structural events.

A population is a fixed set of relays with static traits (capacity, role,
location, software) and a small daily state (network load, consensus
reweighting, restart ages). Day-to-day change is confined to observed
bandwidth, consensus weight and restart age; every derived feature is
recomputed from those so frames stay internally consistent.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .population import EXIT, GUARD, MIDDLE, WindowFrame
from .schema import EXIT_PORTS, PLATFORMS, VERSION_STATUSES, FeatureSchema

logger = logging.getLogger(__name__)

SURGE = "SURGE"
FRACTURE = "FRACTURE"
FLEET_RESTART = "FLEET_RESTART"
FRAGMENTATION = "FRAGMENTATION"
EVENT_KINDS = (SURGE, FRACTURE, FLEET_RESTART, FRAGMENTATION)

_SCHEMA = FeatureSchema.default()
_IX = {n: i for i, n in enumerate(_SCHEMA.names)}

# (country, latitude, longitude, share)
_HUBS = (
    ("de", 50.5, 9.5, 0.22), ("us", 39.0, -90.0, 0.17), ("fr", 47.0, 2.5, 0.10),
    ("nl", 52.3, 5.0, 0.10), ("fi", 61.0, 25.0, 0.04), ("se", 59.5, 17.0, 0.04),
    ("ch", 46.9, 8.0, 0.04), ("gb", 52.5, -1.5, 0.04), ("ca", 45.5, -75.0, 0.04),
    ("ru", 55.7, 37.6, 0.04), ("pl", 52.0, 20.0, 0.03), ("ro", 45.0, 25.0, 0.03),
    ("at", 48.0, 15.0, 0.03), ("jp", 35.7, 139.7, 0.03), ("br", -23.5, -46.6, 0.02),
    ("sg", 1.3, 103.8, 0.03),
)

EPOCH_REF = 1_767_225_600  # 2026-01-01T00:00:00Z


@dataclass(frozen=True)
class SyntheticConfig:
    """Population and dynamics settings for the generator.

    ``jitter`` scales every day-to-day change (load steps, reweighting,
    per-relay noise, aging, restarts); at 0 consecutive frames are identical.
    Each day network load moves by a log-step drawn from ``load_step`` and
    consensus reweighting follows in the same direction at a ratio drawn from
    ``reweight_ratio``.
    """

    n_relays: int = 2000
    n_windows: int = 30
    seed: int = 0
    role_mix: tuple = (0.25, 0.55, 0.20)
    mean_median_ratio: float = 1.4
    max_median_ratio: float = 14.0
    stiff_anisotropy: tuple = ("latitude", "longitude", "days_since_restart")
    jitter: float = 1.0
    start_date: dt.date = dt.date(2026, 1, 1)
    median_bandwidth: float = 4.0e6
    load_step: tuple = (0.03, 0.05)
    reweight_ratio: tuple = (0.8, 1.2)
    relay_noise: float = 0.01

    def __post_init__(self):
        if self.n_relays < 1 or self.n_windows < 1:
            raise ValueError("n_relays and n_windows must be positive")
        mix = tuple(float(x) for x in self.role_mix)
        if len(mix) != 3 or any(x < 0 for x in mix) or not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
            raise ValueError("role_mix must be three nonnegative fractions summing to 1")
        object.__setattr__(self, "role_mix", mix)
        if self.mean_median_ratio < 1 or self.max_median_ratio < 1:
            raise ValueError("skew ratios must be >= 1")
        if self.max_median_ratio < self.mean_median_ratio:
            raise ValueError("infeasible skew targets: max/median below mean/median")
        if self.jitter < 0 or self.relay_noise < 0:
            raise ValueError("jitter and noise levels must be nonnegative")
        for name in ("load_step", "reweight_ratio"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered nonnegative (low, high) pair")
        unknown = [n for n in self.stiff_anisotropy if n not in _IX]
        if unknown:
            raise ValueError(f"unknown anisotropy features {unknown}")
        object.__setattr__(self, "stiff_anisotropy", tuple(self.stiff_anisotropy))

    @property
    def lognormal_sigma(self) -> float:
        return math.sqrt(2.0 * math.log(self.mean_median_ratio))


@dataclass(frozen=True)
class ScenarioScript:
    kind: str
    start: int
    duration: int = 1
    magnitude: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.start < 0 or self.duration < 1:
            raise ValueError("start must be >= 0 and duration >= 1")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")

    @property
    def windows(self) -> range:
        return range(self.start, self.start + self.duration)

    def affected_windows(self, n_frames: int) -> set[int]:
        """Frame indices whose incoming pair sees the event, including the recovery pair."""
        return {t for t in range(self.start, self.start + self.duration + 1) if 0 < t < n_frames}


# -- static population --------------------------------------------------------

@dataclass
class _Population:
    ids: np.ndarray
    roles: np.ndarray
    capacity: np.ndarray
    utilization: np.ndarray
    rate_mult: np.ndarray
    burst_mult: np.ndarray
    bwauth: np.ndarray
    restart_hazard: np.ndarray
    dsr: np.ndarray
    lifespan: np.ndarray
    static: np.ndarray  # full 191 matrix holding the time-invariant columns
    role_probs: np.ndarray


def _capacity(rng, cfg, n):
    sigma = cfg.lognormal_sigma
    cap = cfg.median_bandwidth * np.exp(sigma * rng.standard_normal(n))
    return np.minimum(cap, cfg.max_median_ratio * cfg.median_bandwidth)


def _build_population(cfg: SyntheticConfig, rng) -> _Population:
    n = cfg.n_relays
    role_idx = rng.choice(3, size=n, p=[cfg.role_mix[0], cfg.role_mix[1], cfg.role_mix[2]])
    roles = np.array([GUARD, MIDDLE, EXIT], dtype=object)[role_idx]
    is_guard, is_exit = role_idx == 0, role_idx == 2

    capacity = _capacity(rng, cfg, n)
    utilization = rng.uniform(0.35, 0.75, n)
    rate_mult = rng.choice([1.0, 1.25, 1.5, 2.0], size=n, p=[0.4, 0.25, 0.2, 0.15])
    burst_mult = rng.choice([1.0, 1.5, 2.0], size=n, p=[0.5, 0.2, 0.3])
    bwauth = np.exp(0.15 * rng.standard_normal(n))

    aniso = set(cfg.stiff_anisotropy)
    long_running = rng.random(n) < np.where(is_guard, 0.7, 0.35)
    if "days_since_restart" in aniso:
        hazard = np.where(long_running, 1 / 900.0, 1 / 15.0)
    else:
        hazard = np.full(n, 1 / 60.0)
    lifespan = 30.0 + rng.gamma(2.0, 350.0, n)
    dsr = np.minimum(rng.exponential(1.0 / hazard), lifespan)

    S = np.zeros((n, _SCHEMA.n_features))
    S[:, _IX["running"]] = 1.0
    S[:, _IX["measured"]] = 1.0
    S[:, _IX["effective_family_size"]] = np.where(rng.random(n) < 0.8, 1, rng.integers(2, 12, n))
    flags = {
        "flag_exit": is_exit,
        "flag_fast": capacity > 0.3 * cfg.median_bandwidth,
        "flag_guard": is_guard,
        "flag_hsdir": rng.random(n) < 0.6,
        "flag_stable": is_guard | (rng.random(n) < 0.5),
        "flag_v2dir": rng.random(n) < 0.7,
        "flag_valid": np.ones(n, bool),
        "flag_running": None,
    }
    for name, vals in flags.items():
        if vals is not None and name in _IX:
            S[:, _IX[name]] = vals

    # geography: hubs when anisotropic, a single region otherwise
    shares = np.array([h[3] for h in _HUBS])
    hub = rng.choice(len(_HUBS), size=n, p=shares / shares.sum())
    spread = 2.5
    if "latitude" in aniso:
        lat = np.array([_HUBS[h][1] for h in hub]) + spread * rng.standard_normal(n)
    else:
        lat = 50.0 + spread * rng.standard_normal(n)
    if "longitude" in aniso:
        lon = np.array([_HUBS[h][2] for h in hub]) + spread * rng.standard_normal(n)
    else:
        lon = 10.0 + spread * rng.standard_normal(n)
    S[:, _IX["latitude"]] = np.clip(lat, -89.0, 89.0)
    S[:, _IX["longitude"]] = np.clip(lon, -179.0, 179.0)
    for i, h in enumerate(hub):
        S[i, _IX["country_" + _HUBS[h][0]]] = 1.0

    overloaded = rng.random(n) < 0.08
    S[:, _IX["overload_general_timestamp"]] = np.where(
        overloaded, EPOCH_REF - rng.uniform(0, 30 * 86400, n), 0.0)

    S[:, _IX["or_address_count"]] = 1 + (rng.random(n) < 0.4)
    S[:, _IX["has_ipv6"]] = S[:, _IX["or_address_count"]] > 1
    S[:, _IX["dir_port_open"]] = rng.random(n) < 0.3
    S[:, _IX["recommended_version"]] = rng.random(n) < 0.85
    has_contact = rng.random(n) < 0.8
    S[:, _IX["has_contact"]] = has_contact
    S[:, _IX["contact_length"]] = np.where(has_contact, np.round(rng.lognormal(3.7, 0.5, n)), 0)
    fam = S[:, _IX["effective_family_size"]]
    S[:, _IX["declared_family_size"]] = fam
    S[:, _IX["alleged_family_size"]] = np.maximum(fam - (rng.random(n) < 0.1), 0)
    S[:, _IX["indirect_family_size"]] = (rng.random(n) < 0.05).astype(float)
    S[:, _IX["tor_version_series"]] = rng.choice([8.0, 9.0], size=n, p=[0.8, 0.2])
    S[:, _IX["tor_version_patch"]] = rng.integers(5, 15, n)
    vs = rng.choice(len(VERSION_STATUSES), size=n, p=[0.8, 0.05, 0.05, 0.05, 0.05])
    for k, name in enumerate(VERSION_STATUSES):
        S[:, _IX["version_status_" + name]] = vs == k
    pl = rng.choice(len(PLATFORMS), size=n, p=[0.8, 0.1, 0.03, 0.01, 0.02, 0.02, 0.02])
    for k, name in enumerate(PLATFORMS):
        S[:, _IX["platform_" + name]] = pl == k
    port_open = rng.random((n, len(EXIT_PORTS))) < np.linspace(0.9, 0.3, len(EXIT_PORTS))
    for k, port in enumerate(EXIT_PORTS):
        S[:, _IX[f"exit_port_{port}"]] = port_open[:, k] & is_exit
    S[:, _IX["exit_policy_accept_count"]] = np.where(is_exit, rng.integers(3, 40, n), 0)
    S[:, _IX["exit_policy_reject_count"]] = rng.integers(1, 10, n)
    S[:, _IX["uptime_fraction_week"]] = rng.beta(20, 1.5, n)
    S[:, _IX["uptime_fraction_month"]] = rng.beta(20, 2.0, n)

    P = np.full((n, 3), 0.0)
    main = rng.uniform(0.55, 0.9, n)
    rest = 1.0 - main
    split = rng.uniform(0, 1, n)
    others = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
    for r in range(3):
        sel = role_idx == r
        a, b = others[r]
        P[sel, r] = main[sel]
        P[sel, a] = rest[sel] * split[sel]
        P[sel, b] = rest[sel] * (1 - split[sel])

    ids = np.array([f"R{i:06d}" for i in range(n)], dtype=object)
    return _Population(ids, roles, capacity, utilization, rate_mult, burst_mult, bwauth,
                       hazard, dsr, lifespan, S, P)


def derive_features(F: np.ndarray) -> np.ndarray:
    """Recompute the derived bandwidth and probability columns in place."""
    obs, rate, burst = F[:, _IX["observed_bandwidth"]], F[:, _IX["bandwidth_rate"]], F[:, _IX["bandwidth_burst"]]
    F[:, _IX["advertised_bandwidth"]] = np.minimum(np.minimum(obs, rate), burst)
    F[:, _IX["bandwidth_difference"]] = rate - obs
    F[:, _IX["bandwidth_ratio"]] = obs / rate
    F[:, _IX["burst_to_rate_ratio"]] = burst / rate
    cw = F[:, _IX["consensus_weight"]]
    total = cw.sum()
    F[:, _IX["consensus_weight_fraction"]] = cw / total if total > 0 else 0.0
    guard = F[:, _IX["flag_guard"]] > 0
    exit_ = F[:, _IX["flag_exit"]] > 0
    mid_w = cw * np.where(guard | exit_, 0.5, 1.0)
    F[:, _IX["middle_probability"]] = mid_w / mid_w.sum() if mid_w.sum() > 0 else 0.0
    g = cw * guard
    F[:, _IX["guard_probability"]] = g / g.sum() if g.sum() > 0 else 0.0
    e = cw * exit_
    F[:, _IX["exit_probability"]] = e / e.sum() if e.sum() > 0 else 0.0
    return F


def _frame(pop: _Population, date, load, reweight, obs_noise, cw_noise) -> WindowFrame:
    F = pop.static.copy()
    rate = pop.capacity * pop.rate_mult
    F[:, _IX["bandwidth_rate"]] = rate
    F[:, _IX["bandwidth_burst"]] = rate * pop.burst_mult
    F[:, _IX["observed_bandwidth"]] = pop.capacity * pop.utilization * load * obs_noise
    F[:, _IX["consensus_weight"]] = np.round(pop.capacity * pop.bwauth * reweight * cw_noise / 1000.0, 3)
    F[:, _IX["lifespan_days"]] = pop.lifespan
    F[:, _IX["days_since_restart"]] = pop.dsr
    derive_features(F)
    frame = WindowFrame(date=date, ids=pop.ids.copy(), features=F,
                        consensus_weight=F[:, _IX["consensus_weight"]].copy(),
                        role_probs=pop.role_probs.copy(), schema_hash=_SCHEMA.hash())
    frame.diagnostics["planted_roles"] = pop.roles.copy()
    return frame


def _step(rng, level, lo_hi, jitter, bound=0.1):
    """Bounded-magnitude step; the sign turns back toward zero once ``level`` leaves +-bound."""
    lo, hi = lo_hi
    sign = rng.choice([-1.0, 1.0])
    if abs(level) > bound:
        sign = -math.copysign(1.0, level)
    return jitter * sign * rng.uniform(lo, hi)


def _stable_steps(rng, log_load, config):
    # reweighting follows the load step at a bounded ratio, so the daily
    # displacement keeps a bounded mix of its two directions
    d_load = _step(rng, log_load, config.load_step, config.jitter)
    return d_load, d_load * rng.uniform(*config.reweight_ratio)


_NONCLEAN_CONTINUOUS = ("exit_policy_reject_count", "contact_length", "tor_version_patch",
                        "uptime_fraction_week", "uptime_fraction_month", "declared_family_size",
                        "alleged_family_size", "effective_family_size", "exit_policy_accept_count")


def generate_population(config: SyntheticConfig, seed: int | None = None) -> list[WindowFrame]:
    """Stable, event-free sequence of ``config.n_windows`` daily frames."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    pop = _build_population(config, rng)
    j = config.jitter
    n = config.n_relays
    log_load = log_rw = 0.0
    frames = []
    for t in range(config.n_windows):
        if t > 0 and j > 0:
            d_load, d_rw = _stable_steps(rng, log_load, config)
            log_load += d_load
            log_rw += d_rw
            pop.lifespan = pop.lifespan + j
            restarted = rng.random(n) < pop.restart_hazard * j
            pop.dsr = np.where(restarted, 0.0, np.minimum(pop.dsr + j, pop.lifespan))
        if j > 0:
            obs_noise = np.exp(config.relay_noise * j * rng.standard_normal(n))
            cw_noise = np.exp(config.relay_noise * j * rng.standard_normal(n))
        else:
            obs_noise = cw_noise = np.ones(n)
        frames.append(_frame(pop, config.start_date + dt.timedelta(days=t),
                             math.exp(log_load), math.exp(log_rw), obs_noise, cw_noise))
    return frames


# -- events ------------------------------------------------------------------

SCENARIO_DEFAULTS = {
    SURGE: {"influx": 1.0, "weight_scale": 0.2, "bandwidth_scale": 0.05, "max_age_days": 3.0},
    FRACTURE: {"fraction": 0.35, "shift": 1.0},
    FLEET_RESTART: {"weight_share": 0.2, "young_days": 28.0},
    FRAGMENTATION: {"fraction": 0.01, "shift": 40.0},
}


def default_script(kind: str, start: int = 20) -> ScenarioScript:
    duration = {SURGE: 4, FRACTURE: 1, FLEET_RESTART: 2, FRAGMENTATION: 4}[kind]
    return ScenarioScript(kind, start, duration, 1.0, dict(SCENARIO_DEFAULTS[kind]))


def _copy_frame(f: WindowFrame, **kw) -> WindowFrame:
    g = WindowFrame(date=f.date, ids=kw.get("ids", f.ids.copy()),
                    features=kw.get("features", f.features.copy()),
                    consensus_weight=kw.get("consensus_weight", f.consensus_weight.copy()),
                    role_probs=kw.get("role_probs", f.role_probs.copy()),
                    schema_hash=f.schema_hash)
    g.diagnostics = dict(f.diagnostics)
    if "planted_roles" in kw:
        g.diagnostics["planted_roles"] = kw["planted_roles"]
    return g


def inject_event(frames, script: ScenarioScript, seed: int = 0) -> list[WindowFrame]:
    """Copy of ``frames`` with the scripted event applied to its windows.

    Frames after the event revert to the stable sequence, so the pair that
    leaves the event is also disturbed.
    """
    frames = list(frames)
    if script.start + script.duration > len(frames):
        raise ValueError(f"event windows {script.start}..{script.start + script.duration - 1} "
                         f"outside [0, {len(frames)})")
    out = [_copy_frame(f) for f in frames]
    if script.magnitude == 0:
        warnings.warn("event magnitude is zero; frames unchanged", stacklevel=2)
        return out
    params = {**SCENARIO_DEFAULTS[script.kind], **script.params}
    rng = np.random.default_rng([seed, EVENT_KINDS.index(script.kind), script.start])
    apply = {SURGE: _surge, FRACTURE: _fracture, FLEET_RESTART: _fleet_restart,
             FRAGMENTATION: _fragmentation}[script.kind]
    return apply(out, script, params, rng)


def _surge(frames, script, p, rng):
    """New lightweight relays flood in, the population growing by ``influx`` per window."""
    base = frames[script.start]
    n0 = len(base)
    middles = np.flatnonzero(base.diagnostics.get("planted_roles", np.array([MIDDLE] * n0)) == MIDDLE)
    growth = 1.0 + script.magnitude * p["influx"]
    counts = [int(round(n0 * (growth ** (j + 1) - 1.0))) for j in range(script.duration)]
    donors = rng.choice(middles, size=counts[-1])
    ages = rng.uniform(0.0, p["max_age_days"], counts[-1])
    for j, t in enumerate(script.windows):
        f = frames[t]
        pick = donors[: counts[j]]
        new = f.features[pick].copy()
        for name in ("observed_bandwidth", "bandwidth_rate", "bandwidth_burst"):
            new[:, _IX[name]] *= p["bandwidth_scale"]
        new[:, _IX["consensus_weight"]] *= p["weight_scale"]
        new[:, _IX["lifespan_days"]] = ages[: counts[j]] + j
        new[:, _IX["days_since_restart"]] = ages[: counts[j]] + j
        new[:, _IX["measured"]] = 0.0
        new[:, _IX["flag_guard"]] = 0.0
        new[:, _IX["flag_exit"]] = 0.0
        F = derive_features(np.vstack([f.features, new]))
        P = np.vstack([f.role_probs, np.tile([0.1, 0.8, 0.1], (len(pick), 1))])
        ids = np.concatenate([f.ids, np.array([f"S{t:03d}{k:06d}" for k in range(len(pick))], dtype=object)])
        roles = np.concatenate([f.diagnostics["planted_roles"], np.array([MIDDLE] * len(pick), dtype=object)])
        frames[t] = _copy_frame(f, ids=ids, features=F, consensus_weight=F[:, _IX["consensus_weight"]].copy(),
                                role_probs=P, planted_roles=roles)
    return frames


def _fracture(frames, script, p, rng):
    """A block of relays relocates and resets along the planted stiff axes."""
    n = len(frames[script.start])
    sel = rng.random(n) < p["fraction"] * min(script.magnitude, 1.0 / p["fraction"])
    shift = p["shift"] * script.magnitude
    for t in script.windows:
        f = frames[t]
        F = f.features.copy()
        F[sel, _IX["latitude"]] = np.clip(F[sel, _IX["latitude"]] - 40.0 * shift, -89, 89)
        F[sel, _IX["days_since_restart"]] = 0.0
        F[sel, _IX["lifespan_days"]] = 0.0
        frames[t] = _copy_frame(f, features=F)
    return frames


def _fleet_restart(frames, script, p, rng):
    """The heaviest long-running guards return as a freshly restarted fleet."""
    f0 = frames[script.start]
    roles = f0.diagnostics["planted_roles"]
    dsr = f0.features[:, _IX["days_since_restart"]]
    guards = np.flatnonzero((roles == GUARD) & (dsr > 180))
    order = guards[np.argsort(-f0.consensus_weight[guards], kind="stable")]
    total = f0.consensus_weight[roles == GUARD].sum()
    cum = np.cumsum(f0.consensus_weight[order])
    share = min(p["weight_share"] * script.magnitude, 0.95)
    fleet = order[: int(np.searchsorted(cum, share * total)) + 1]
    young = p["young_days"]
    for j, t in enumerate(script.windows):
        f = frames[t]
        F = f.features.copy()
        ages = np.minimum(young * (0.5 + rng.random(len(fleet))), F[fleet, _IX["lifespan_days"]])
        F[fleet, _IX["days_since_restart"]] = ages + j
        frames[t] = _copy_frame(f, features=F)
    frames[script.start].diagnostics["fleet"] = f0.ids[fleet].copy()
    return frames


def _fragmentation(frames, script, p, rng):
    """A small group drifts far along non-clean features; clean centers stay put."""
    n = len(frames[script.start])
    group = rng.random(n) < p["fraction"]
    cols = [_IX[c] for c in _NONCLEAN_CONTINUOUS]
    for t in script.windows:
        f = frames[t]
        F = f.features.copy()
        sd = np.std(F[:, cols], axis=0) + 1e-9
        F[np.ix_(group, cols)] += p["shift"] * script.magnitude * sd
        frames[t] = _copy_frame(f, features=F)
    return frames


def add_blips(frames, level: float, seed: int = 0) -> list[WindowFrame]:
    """Copies of ``frames``, each with one window-wide random shift of the
    continuous columns only the thermodynamic view reads.

    The shift is ``level`` column standard deviations times a standard normal
    draw per column and window. Encoder inputs are untouched, so cluster
    centers do not move.
    """
    if level < 0:
        raise ValueError("blip level must be nonnegative")
    rng = np.random.default_rng([seed, 1])
    cols = [_IX[c] for c in _NONCLEAN_CONTINUOUS]
    out = []
    for f in frames:
        F = f.features.copy()
        F[:, cols] += level * F[:, cols].std(axis=0) * rng.standard_normal(len(cols))
        out.append(_copy_frame(f, features=F))
    return out


def role_recovery(frame: WindowFrame) -> float:
    """Fraction of relays whose argmax role matches the planted role."""
    from .population import role_labels
    return float(np.mean(role_labels(frame.role_probs) == frame.diagnostics["planted_roles"]))


def bandwidth_skew(frame: WindowFrame) -> tuple[float, float]:
    """(mean/median, max/median) of observed bandwidth."""
    bw = frame.features[:, _IX["observed_bandwidth"]]
    med = float(np.median(bw))
    return float(bw.mean()) / med, float(bw.max()) / med


__all__ = [
    "SyntheticConfig", "ScenarioScript", "generate_population", "inject_event", "add_blips",
    "default_script", "derive_features", "role_recovery", "bandwidth_skew", "SCENARIO_DEFAULTS",
    "SURGE", "FRACTURE", "FLEET_RESTART", "FRAGMENTATION", "EVENT_KINDS",
]
