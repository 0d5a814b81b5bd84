"""Relay snapshots, robust scaling, role clusters and population centers."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .schema import FeatureSchema

logger = logging.getLogger(__name__)

GUARD, MIDDLE, EXIT = "Guard", "Middle", "Exit"
ROLES = (GUARD, MIDDLE, EXIT)
GLOBAL = "GLOBAL"

# argmax tie-break priority over (guard, middle, exit) columns
_ROLE_PRIORITY = (0, 2, 1)


class FrozenError(RuntimeError):
    """Raised when a frozen model or scaler is asked to change."""


class DegenerateWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class RelayRecord:
    id: str
    features: np.ndarray
    consensus_weight: float
    role_probs: tuple[float, float, float]
    days_since_restart: float

    def __post_init__(self):
        if len(self.features) != 191:
            raise ValueError(f"relay {self.id}: expected 191 features, got {len(self.features)}")
        if self.consensus_weight < 0:
            raise ValueError(f"relay {self.id}: negative consensus weight")
        if any(not 0.0 <= p <= 1.0 for p in self.role_probs):
            raise ValueError(f"relay {self.id}: role probabilities outside [0, 1]")


@dataclass
class WindowFrame:
    """One dated population snapshot, stored column-wise.

    ``features`` holds the raw 191-vectors (NaN marks a missing value);
    ``scaled_clean`` is filled in by :meth:`scale`.
    """

    date: dt.date
    ids: np.ndarray
    features: np.ndarray
    consensus_weight: np.ndarray
    role_probs: np.ndarray
    scaled_clean: np.ndarray | None = None
    schema_hash: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=object)
        self.features = np.asarray(self.features, dtype=float)
        self.consensus_weight = np.asarray(self.consensus_weight, dtype=float)
        self.role_probs = np.asarray(self.role_probs, dtype=float).reshape(-1, 3)
        n = len(self.ids)
        if n < 1:
            raise ValueError("a frame needs at least one relay")
        if self.features.shape != (n, 191):
            raise ValueError(f"features must be ({n}, 191), got {self.features.shape}")
        if self.consensus_weight.shape != (n,) or self.role_probs.shape != (n, 3):
            raise ValueError("per-relay columns disagree in length")
        if np.any(self.consensus_weight < 0):
            raise ValueError("consensus weights must be nonnegative")
        if np.any((self.role_probs < 0) | (self.role_probs > 1)):
            raise ValueError("role probabilities must lie in [0, 1]")
        if self.scaled_clean is not None and len(self.scaled_clean) != n:
            raise ValueError("scaled_clean row count must equal relay count")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, date: dt.date, records: Sequence[RelayRecord], schema_hash=None):
        return cls(
            date=date,
            ids=[r.id for r in records],
            features=np.vstack([r.features for r in records]),
            consensus_weight=[r.consensus_weight for r in records],
            role_probs=[r.role_probs for r in records],
            schema_hash=schema_hash,
        )

    def records(self, schema: FeatureSchema | None = None) -> list[RelayRecord]:
        schema = schema or FeatureSchema.default()
        dsr = self.features[:, schema.index("days_since_restart")]
        return [
            RelayRecord(
                id=str(self.ids[i]),
                features=self.features[i],
                consensus_weight=float(self.consensus_weight[i]),
                role_probs=tuple(float(p) for p in self.role_probs[i]),
                days_since_restart=float(dsr[i]),
            )
            for i in range(len(self))
        ]

    def clean(self, schema: FeatureSchema) -> np.ndarray:
        return self.features[:, list(schema.clean_indices)]

    def scale(self, scaler: RobustScaler, schema: FeatureSchema) -> WindowFrame:
        """Attach the scaled clean view; missing values are imputed at the scaler center."""
        raw = self.clean(schema)
        n_missing = int(np.isnan(raw).sum())
        if n_missing:
            logger.info("%s: imputed %d missing clean values", self.date, n_missing)
        self.diagnostics["imputed_clean"] = n_missing
        self.scaled_clean = scaler.transform(raw)
        return self


class RobustScaler(TransformerMixin, BaseEstimator):
    """Per-feature median / interquartile-range scaling, frozen after fit.

    Features with a point mass at the median (a quartile equal to the median,
    as for a probability that is zero for three quarters of relays) widen
    their spread to the 10-90 percentile range, then fall back to the
    standard deviation if that is still zero, before the ``epsilon`` floor.
    """

    def __init__(self, epsilon: float = 1e-9):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        if getattr(self, "frozen_", False):
            raise FrozenError("scaler is frozen; refitting is not allowed")
        X = check_array(X, ensure_all_finite="allow-nan")
        q10, q25, med, q75, q90 = np.nanpercentile(X, [10, 25, 50, 75, 90], axis=0)
        spread = q75 - q25
        # a quartile sitting on the median marks a point mass (zero-inflated column)
        collapsed = (med - q25 <= self.epsilon) | (q75 - med <= self.epsilon)
        if collapsed.any():
            spread = np.where(collapsed, np.maximum(spread, q90 - q10), spread)
            spread = np.where(spread <= self.epsilon, np.nanstd(X, axis=0), spread)
        self.center_ = med
        self.spread_ = np.maximum(spread, self.epsilon)
        self.n_fallback_ = int(collapsed.sum())
        self.n_features_in_ = X.shape[1]
        self.frozen_ = False
        return self

    def freeze(self) -> RobustScaler:
        check_is_fitted(self, "center_")
        self.frozen_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "center_")
        X = check_array(X, ensure_all_finite="allow-nan", copy=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        miss = np.isnan(X)
        if miss.any():
            X[miss] = np.broadcast_to(self.center_, X.shape)[miss]
        return (X - self.center_) / self.spread_

    def inverse_transform(self, X):
        check_is_fitted(self, "center_")
        return np.asarray(X, dtype=float) * self.spread_ + self.center_


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Robust-scales the continuous columns of the full feature vector; flags pass through."""

    def __init__(self, flag_mask=None, epsilon: float = 1e-9):
        self.flag_mask = flag_mask
        self.epsilon = epsilon

    def fit(self, X, y=None):
        if getattr(self, "frozen_", False):
            raise FrozenError("standardizer is frozen")
        X = check_array(X, ensure_all_finite="allow-nan")
        mask = np.zeros(X.shape[1], bool) if self.flag_mask is None else np.asarray(self.flag_mask, bool)
        self.continuous_ = ~mask
        self.scaler_ = RobustScaler(self.epsilon).fit(X[:, self.continuous_])
        self.n_features_in_ = X.shape[1]
        self.frozen_ = False
        return self

    def freeze(self):
        check_is_fitted(self, "scaler_")
        self.scaler_.freeze()
        self.frozen_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "scaler_")
        X = check_array(X, ensure_all_finite="allow-nan", copy=True)
        out = X.copy()
        out[:, self.continuous_] = self.scaler_.transform(X[:, self.continuous_])
        flags = ~self.continuous_
        out[:, flags] = np.nan_to_num(X[:, flags], nan=0.0)
        return out


def assign_clusters(frame: WindowFrame) -> tuple[dict[str, str], int]:
    """Assign each relay to Guard/Middle/Exit by argmax of its role probabilities.

    Ties resolve Guard > Exit > Middle. Relays with all-zero probabilities
    default to Middle; their count is returned alongside the mapping.
    """
    roles = role_labels(frame.role_probs)
    n_default = int(np.sum(frame.role_probs.sum(axis=1) == 0))
    if n_default:
        logger.info("%s: %d relays with all-zero role probabilities defaulted to Middle",
                    frame.date, n_default)
    return dict(zip((str(i) for i in frame.ids), roles)), n_default


def role_labels(role_probs: np.ndarray) -> np.ndarray:
    """Vectorised argmax with the fixed tie priority; returns an array of role names."""
    P = np.asarray(role_probs, dtype=float).reshape(-1, 3)
    best = P.max(axis=1, keepdims=True)
    at_max = P == best
    choice = np.full(len(P), 1)
    # walk priorities lowest first so the highest priority wins
    for col in reversed(_ROLE_PRIORITY):
        choice = np.where(at_max[:, col], col, choice)
    choice = np.where(P.sum(axis=1) == 0, 1, choice)
    return np.array(ROLES, dtype=object)[choice]


def weighted_median(values, weights) -> float | np.ndarray:
    """Lower weighted median: smallest v whose cumulative weight reaches half the total.

    For 2-D ``values`` (N x d) the median is taken per coordinate with the
    same weights.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape[0] == 0:
        raise ValueError("weighted_median of empty input")
    if weights.shape != (values.shape[0],):
        raise ValueError("weights must have one entry per row")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    total = weights.sum()
    if total <= 0:
        raise DegenerateWeightsError("degenerate weights")
    if values.ndim == 1:
        return float(_wmedian_1d(values, weights, total))
    return np.array([_wmedian_1d(values[:, j], weights, total) for j in range(values.shape[1])])


def _wmedian_1d(v, w, total):
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    half = 0.5 * total
    # relative slack absorbs rounding in the cumulative sum
    pos = np.searchsorted(cum, half * (1.0 - 1e-12), side="left")
    return v[order][min(pos, len(v) - 1)]


@dataclass(frozen=True)
class ClusterCenters:
    per_role: Mapping[str, np.ndarray]
    global_mean: np.ndarray
    unweighted_median: np.ndarray
    counts: Mapping[str, int] = field(default_factory=dict)

    def center(self, cluster: str) -> np.ndarray:
        if cluster == GLOBAL:
            return self.global_mean
        return self.per_role[cluster]


def cluster_centers(frame: WindowFrame, clusters: Mapping[str, str] | np.ndarray) -> ClusterCenters:
    """Consensus-weight-weighted median per role, global mean and unweighted median.

    ``clusters`` is either the id -> role mapping from :func:`assign_clusters`
    or an array of role names aligned with the frame rows.
    """
    if frame.scaled_clean is None:
        raise ValueError("frame has not been scaled")
    X = frame.scaled_clean
    if isinstance(clusters, Mapping):
        labels = np.array([clusters[str(i)] for i in frame.ids], dtype=object)
    else:
        labels = np.asarray(clusters, dtype=object)
    per_role: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for role in ROLES:
        sel = labels == role
        counts[role] = int(sel.sum())
        if not sel.any():
            continue
        w = frame.consensus_weight[sel]
        if w.sum() <= 0:
            logger.warning("%s: %s cluster has zero total weight; using uniform weights",
                           frame.date, role)
            w = np.ones_like(w)
        per_role[role] = weighted_median(X[sel], w)
    return ClusterCenters(
        per_role=per_role,
        global_mean=X.mean(axis=0),
        unweighted_median=np.median(X, axis=0),
        counts=counts,
    )


def mass_gravity_divergence(centers: ClusterCenters, gravity_role: str = GUARD) -> float:
    """Distance between the traffic-weighted Guard center and the unweighted population median."""
    if gravity_role not in centers.per_role:
        raise KeyError(f"no {gravity_role} center in this frame")
    if centers.unweighted_median is None:
        raise KeyError("no unweighted median center")
    return float(np.linalg.norm(centers.per_role[gravity_role] - centers.unweighted_median))


def frames_by_date(frames: Iterable[WindowFrame]) -> list[WindowFrame]:
    frames = list(frames)
    for a, b in zip(frames, frames[1:]):
        if b.date <= a.date:
            raise ValueError(f"frame dates must strictly increase ({a.date} then {b.date})")
    return frames
