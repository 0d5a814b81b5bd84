"""Model bundle, frozen baselines, the window sweep and the Monte Carlo null."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cca as cca_mod
from . import synthetic
from .cdae import CdaeTrainingConfig, ContractiveDenoisingAutoencoder
from .ejt import (EjtBaseline, ejt_at, ejt_zscore, fit_baseline,
                  soft_alignment, top_loading_features)
from .gates import (PRECURSOR, REGIME_E, REGIME_K_CANDIDATE, REGIME_S, ChannelVector,
                    EventClass, GateConfig, GateReport, classify_event, evaluate_gates,
                    fpr_evaluation)
from .grbm import GaussianRBM, fragmentation_cv
from .population import (EXIT, GLOBAL, GUARD, FeatureStandardizer, RobustScaler, WindowFrame,
                         cluster_centers, mass_gravity_divergence, role_labels)
from .schema import FeatureSchema, check_schema_hash

logger = logging.getLogger(__name__)

ALPHA_CLUSTERS = (GLOBAL, GUARD, EXIT)
DELTA_CHANNELS = frozenset({
    "theta_deg", "delta_rho", "alpha_global", "z_global", "alpha_guard", "z_guard",
    "alpha_exit", "z_exit", "shift_guard", "shift_exit", "shift_global",
})


@dataclass(frozen=True)
class TrainingConfig:
    cdae: CdaeTrainingConfig = CdaeTrainingConfig()
    grbm_hidden: int = 32
    grbm_learning_rate: float = 5e-3
    grbm_epochs: int = 10
    grbm_batch_size: int = 100
    seed: int = 0

    def with_seed(self, seed: int) -> TrainingConfig:
        return replace(self, seed=seed, cdae=replace(self.cdae, seed=seed))


@dataclass
class ObserverModels:
    """Frozen scaler, standardizer and the two observers, tied to one schema."""

    schema: FeatureSchema
    scaler: RobustScaler
    standardizer: FeatureStandardizer
    cdae: ContractiveDenoisingAutoencoder
    grbm: GaussianRBM
    training_dates: tuple = ()

    @property
    def schema_hash(self) -> str:
        return self.schema.hash()

    def check_frame(self, frame: WindowFrame) -> None:
        if frame.schema_hash is not None:
            check_schema_hash(self.schema_hash, frame.schema_hash, f"frame {frame.date}")

    def scaled_clean(self, frame: WindowFrame) -> np.ndarray:
        if frame.scaled_clean is None:
            frame.scale(self.scaler, self.schema)
        return frame.scaled_clean

    def standardized(self, frame: WindowFrame) -> np.ndarray:
        return self.standardizer.transform(frame.features)


def train_models(frames, config: TrainingConfig | None = None,
                 schema: FeatureSchema | None = None) -> ObserverModels:
    """Fit the scaler, standardizer, CDAE and GRBM on the stacked training frames, then freeze."""
    config = config or TrainingConfig()
    schema = schema or FeatureSchema.default()
    frames = list(frames)
    if not frames:
        raise ValueError("no training frames")
    for f in frames:
        if f.schema_hash is not None:
            check_schema_hash(schema.hash(), f.schema_hash, f"training frame {f.date}")
    raw = np.vstack([f.features for f in frames])
    clean = raw[:, list(schema.clean_indices)]
    scaler = RobustScaler().fit(clean).freeze()
    standardizer = FeatureStandardizer(flag_mask=schema.flag_mask).fit(raw).freeze()
    Xc = scaler.transform(clean)
    Xs = standardizer.transform(raw)
    cdae = ContractiveDenoisingAutoencoder.from_config(config.cdae).fit(Xc).freeze()
    grbm = GaussianRBM(n_hidden=config.grbm_hidden, learning_rate=config.grbm_learning_rate,
                       epochs=config.grbm_epochs, batch_size=config.grbm_batch_size,
                       seed=config.seed).fit(Xs).freeze()
    return ObserverModels(schema, scaler, standardizer, cdae, grbm,
                          tuple(f.date for f in frames))


# -- per-frame and per-pair computations ------------------------------------

@dataclass
class FrameState:
    """Everything the sweep needs from one frame on its own."""

    date: dt.date
    centers: object
    cca: cca_mod.CcaFit | None
    cv: float
    delta_mg: float | None
    epsilon: float
    sigma_z: float
    degenerate_cca: bool
    n_relays: int
    diagnostics: dict = field(default_factory=dict)


def frame_state(frame: WindowFrame, models: ObserverModels, cca_reg: float = 1e-6) -> FrameState:
    models.check_frame(frame)
    Xc = models.scaled_clean(frame)
    labels = role_labels(frame.role_probs)
    centers = cluster_centers(frame, labels)
    Xs = models.standardized(frame)
    frag = fragmentation_cv(models.grbm, Xs, frame.date)
    Z = models.cdae.encode(Xc)
    H = models.grbm.transform(Xs)
    fit = None
    degenerate = False
    try:
        fit = cca_mod.fit_cca(Z, H, regularization=cca_reg, date=frame.date)
        degenerate = cca_mod.degeneration_check(fit)[0]
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("%s: CCA failed: %s", frame.date, exc)
        degenerate = True
    try:
        dmg = mass_gravity_divergence(centers)
    except KeyError:
        dmg = None
    return FrameState(
        date=frame.date, centers=centers, cca=fit, cv=frag.cv, delta_mg=dmg,
        epsilon=float(models.cdae.reconstruction_error(Xc).mean()),
        sigma_z=float(Z.std(axis=0).mean()), degenerate_cca=degenerate, n_relays=len(frame),
        diagnostics={"imputed_clean": frame.diagnostics.get("imputed_clean", 0),
                     "cluster_counts": dict(centers.counts)},
    )


@dataclass
class PairGeometry:
    alignments: dict
    splits: dict

    def alpha(self, cluster):
        a = self.alignments.get(cluster)
        return None if a is None else a.alpha

    def shift(self, cluster):
        a = self.alignments.get(cluster)
        return None if a is None else a.displacement_norm


def pair_geometry(prev: FrameState, cur: FrameState, models: ObserverModels,
                  threshold: float = 0.90) -> PairGeometry:
    """Soft alignment of each cluster's center displacement, split at the earlier center."""
    alignments, splits = {}, {}
    for cluster in ALPHA_CLUSTERS:
        try:
            x0 = prev.centers.center(cluster)
            x1 = cur.centers.center(cluster)
        except KeyError:
            continue
        split = ejt_at(models.cdae, x0, threshold, label=f"{cluster}@{prev.date}")
        splits[cluster] = split
        alignments[cluster] = soft_alignment(x1 - x0, split, cluster=cluster)
    return PairGeometry(alignments, splits)


def consecutive(a: dt.date, b: dt.date) -> bool:
    return (b - a).days == 1


# -- baselines ----------------------------------------------------------------

@dataclass(frozen=True)
class Baselines:
    global_: EjtBaseline
    guard: EjtBaseline
    exit: EjtBaseline
    shift_median: dict

    def for_cluster(self, cluster: str) -> EjtBaseline:
        return {GLOBAL: self.global_, GUARD: self.guard, EXIT: self.exit}[cluster]

    def gate_config(self, **kw) -> GateConfig:
        return GateConfig(shift_median=dict(self.shift_median), **kw)


def fit_baselines(frames, models: ObserverModels, threshold: float = 0.90) -> Baselines:
    """Freeze alpha baselines and shift medians from consecutive stable frame pairs."""
    frames = list(frames)
    states = [frame_state(f, models) for f in frames]
    alphas = {c: [] for c in ALPHA_CLUSTERS}
    shifts = {c: [] for c in ALPHA_CLUSTERS}
    dates = []
    for prev, cur in zip(states, states[1:]):
        if not consecutive(prev.date, cur.date):
            continue
        geo = pair_geometry(prev, cur, models, threshold)
        dates.append(cur.date)
        for c in ALPHA_CLUSTERS:
            a = geo.alignments.get(c)
            if a is not None:
                shifts[c].append(a.displacement_norm)
                if a.alpha is not None:
                    alphas[c].append(a.alpha)
    if len(dates) < 2:
        raise ValueError("need at least 2 consecutive stable windows for baselines")
    src = (dates[0], dates[-1])
    logger.info("baselines from %d stable windows %s..%s", len(dates), *src)
    return Baselines(
        global_=fit_baseline(alphas[GLOBAL], src),
        guard=fit_baseline(alphas[GUARD], src),
        exit=fit_baseline(alphas[EXIT], src),
        shift_median={c: float(np.median(shifts[c])) for c in ALPHA_CLUSTERS if shifts[c]},
    )


# -- sweep ----------------------------------------------------------------------

@dataclass
class WindowRecord:
    channels: ChannelVector
    report: GateReport
    event: EventClass
    rho: list
    splits: dict
    top10: dict
    n_relays: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def date(self) -> dt.date:
        return self.channels.date

    @property
    def label(self) -> str:
        return self.event.label


@dataclass
class SweepResult:
    records: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def channel_vectors(self) -> list[ChannelVector]:
        return [r.channels for r in self.records]


def run_sweep(frames, models: ObserverModels, baselines: Baselines,
              gate_config: GateConfig | None = None, threshold: float = 0.90) -> SweepResult:
    """Turn a dated frame sequence into per-window channel records and labels.

    A window is a pair of consecutive frames labelled by the later date.
    Pairs spanning a calendar gap keep their per-frame channels but every
    displacement channel is absent; rotation and agreement change also need
    the previous window to end on this window's start day.
    """
    frames = sorted(frames, key=lambda f: f.date)
    for a, b in zip(frames, frames[1:]):
        if a.date == b.date:
            raise ValueError(f"duplicate frame date {a.date}")
    config = gate_config or baselines.gate_config()
    if len(frames) < 2:
        return SweepResult([], {"note": "fewer than two frames: no windows"})
    states = [frame_state(f, models) for f in frames]
    records, history = [], []
    gaps = []
    for i in range(1, len(states)):
        prev, cur = states[i - 1], states[i]
        vals = dict(cv=cur.cv, delta_mg=cur.delta_mg, epsilon=cur.epsilon, sigma_z=cur.sigma_z)
        splits, top10 = {}, {}
        if consecutive(prev.date, cur.date):
            geo = pair_geometry(prev, cur, models, threshold)
            for c, key in ((GLOBAL, "global"), (GUARD, "guard"), (EXIT, "exit")):
                a = geo.alignments.get(c)
                if a is None:
                    continue
                vals[f"shift_{key}"] = a.displacement_norm
                if a.alpha is not None:
                    vals[f"alpha_{key}"] = a.alpha
                    vals[f"z_{key}"] = ejt_zscore(a.alpha, baselines.for_cluster(c))
            splits = {c: s.as_record() for c, s in geo.splits.items()}
            top10 = {c: sorted(top_loading_features(s)) for c, s in geo.splits.items()}
            prev_window_ok = i >= 2 and consecutive(states[i - 2].date, prev.date)
            if prev_window_ok and cur.cca is not None and prev.cca is not None:
                d = cca_mod.cca_delta(cur.cca, prev.cca)
                vals["theta_deg"] = d.theta_deg
                vals["delta_rho"] = d.delta_rho
        else:
            gaps.append((prev.date, cur.date))
        vec = ChannelVector(date=cur.date, degenerate_cca=cur.degenerate_cca, **vals)
        report = evaluate_gates(vec, config)
        history.append((report, vec))
        event = classify_event(history[-(config.sustain_windows + 1):], config)
        records.append(WindowRecord(
            channels=vec, report=report, event=event,
            rho=[] if cur.cca is None else [float(r) for r in cur.cca.rho],
            splits=splits, top10=top10, n_relays=cur.n_relays, diagnostics=cur.diagnostics,
        ))
    return SweepResult(records, {"gaps": gaps})


# -- Monte Carlo null ---------------------------------------------------------------

class NullHarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class NullResult:
    iterations: int
    rho1: np.ndarray
    null_mean: float
    null_std: float
    null_max: float
    empirical_rho1: float | None
    separation_sigma: float | None
    n_degenerate: int = 0


def monte_carlo_null(models: ObserverModels, iterations: int = 1000, seed: int = 0,
                     n_samples: int = 2000, empirical_rho1: float | None = None,
                     cca_reg: float = 1e-6) -> NullResult:
    """First canonical correlation of the frozen observers on Gaussian pseudo-populations.

    Each iteration draws standardized 191-feature rows, feeds the clean
    columns to the encoder and all columns to the GRBM, and refits CCA.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    clean = list(models.schema.clean_indices)
    d = models.schema.n_features
    seeds = np.random.SeedSequence(seed).spawn(iterations)
    rho1 = np.empty(iterations)
    n_degenerate = 0
    for it, ss in enumerate(seeds):
        X = np.random.default_rng(ss).standard_normal((n_samples, d))
        Z = models.cdae.encode(X[:, clean])
        H = models.grbm.transform(X)
        try:
            fit = cca_mod.fit_cca(Z, H, regularization=cca_reg)
            rho1[it] = fit.rho1
            n_degenerate += cca_mod.degeneration_check(fit)[0]
        except (ValueError, np.linalg.LinAlgError):
            rho1[it] = np.nan
            n_degenerate += 1
    if n_degenerate > iterations / 2:
        raise NullHarnessError(
            f"null harness misconfigured: {n_degenerate}/{iterations} iterations degenerate")
    ok = rho1[np.isfinite(rho1)]
    mean, std = float(ok.mean()), float(ok.std(ddof=1)) if len(ok) > 1 else 0.0
    sep = None
    if empirical_rho1 is not None and std > 0:
        sep = (empirical_rho1 - mean) / std
    return NullResult(iterations, rho1, mean, std, float(ok.max()), empirical_rho1, sep, n_degenerate)


# -- scenario and FPR harnesses ----------------------------------------------------

SCENARIO_TARGETS = {
    synthetic.SURGE: REGIME_S,
    synthetic.FRACTURE: REGIME_E,
    synthetic.FLEET_RESTART: REGIME_K_CANDIDATE,
    synthetic.FRAGMENTATION: PRECURSOR,
}


@dataclass(frozen=True)
class ScenarioProtocol:
    """Train on the first ``n_train`` frames, freeze baselines on the first ``n_baseline``."""

    n_train: int = 8
    n_baseline: int = 15
    training: TrainingConfig = TrainingConfig()

    def __post_init__(self):
        if self.n_train < 1 or self.n_baseline < 3:
            raise ValueError("need n_train >= 1 and n_baseline >= 3")


@dataclass
class StableRun:
    frames: list
    models: ObserverModels
    baselines: Baselines
    sweep: SweepResult


def prepare_stable(config: synthetic.SyntheticConfig,
                   protocol: ScenarioProtocol = ScenarioProtocol()) -> StableRun:
    frames = synthetic.generate_population(config)
    if len(frames) < max(protocol.n_train, protocol.n_baseline):
        raise ValueError("too few windows for the training and baseline spans")
    models = train_models(frames[: protocol.n_train], protocol.training.with_seed(config.seed))
    baselines = fit_baselines(frames[: protocol.n_baseline], models)
    return StableRun(frames, models, baselines, run_sweep(frames, models, baselines))


@dataclass
class ScenarioOutcome:
    kind: str
    target: str
    event_labels: dict  # window date -> label over the affected windows
    false_positive_dates: list  # non-event windows labelled as the target, either run
    sweep: SweepResult

    @property
    def detected(self) -> bool:
        return self.target in self.event_labels.values()

    @property
    def passed(self) -> bool:
        return self.detected and not self.false_positive_dates


def run_scenario(stable: StableRun, script: synthetic.ScenarioScript, seed: int = 0) -> ScenarioOutcome:
    """Inject ``script`` into the stable frames and score its target class."""
    target = SCENARIO_TARGETS[script.kind]
    frames = synthetic.inject_event(stable.frames, script, seed=seed)
    sweep = run_sweep(frames, stable.models, stable.baselines)
    affected = {frames[t].date for t in script.affected_windows(len(frames))}
    event_labels = {r.date: r.label for r in sweep.records if r.date in affected}
    fps = [r.date for r in sweep.records if r.date not in affected and r.label == target]
    fps += [r.date for r in stable.sweep.records if r.label == target]
    return ScenarioOutcome(script.kind, target, event_labels, sorted(set(fps)), sweep)


FPR_STABLE_WINDOWS = 24
FPR_BLIP_NOISE = 30.0


@dataclass
class FprRun:
    fpr: dict
    records: list


def fpr_harness(seed: int = 0, n_windows: int = FPR_STABLE_WINDOWS,
                blip_noise: float = FPR_BLIP_NOISE,
                protocol: ScenarioProtocol = ScenarioProtocol()) -> FprRun:
    """Per-gate false-positive rates over ``n_windows`` labelled-stable windows.

    Models and baselines come from the clean head of the sequence. The scored
    tail carries window-wide blips on features only the thermodynamic view
    reads, so rotation grazes its threshold while the centers stay put.
    """
    total = protocol.n_baseline + n_windows + 1
    config = synthetic.SyntheticConfig(seed=seed, n_windows=total)
    frames = synthetic.generate_population(config)
    models = train_models(frames[: protocol.n_train], protocol.training.with_seed(seed))
    baselines = fit_baselines(frames[: protocol.n_baseline], models)
    head = protocol.n_baseline - 1
    tail = synthetic.add_blips(frames[head:], blip_noise, seed=seed)
    sweep = run_sweep(tail, models, baselines)
    scored = [r for r in sweep.records if r.channels.theta_deg is not None]
    if len(scored) < n_windows:
        raise ValueError(f"only {len(scored)} fully evaluable stable windows")
    records = scored[-n_windows:]
    return FprRun(fpr_evaluation([r.report for r in records]), records)
