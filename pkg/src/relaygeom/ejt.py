"""Eigendecomposition of the Jacobian trace (EJT).

The metric tensor ``J^T J`` of the frozen encoder at a population center is
split into a stiff span (top-k eigenvectors holding the trace-mass threshold)
and a soft span (the rest). A center displacement is scored by the share of
its squared norm that lies in the soft span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

DISPLACEMENT_FLOOR = 1e-6
TIE_RTOL = 1e-12


class DegenerateMetricError(ValueError):
    pass


@dataclass(frozen=True)
class EjtSplit:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns, same order as eigenvalues
    k: int
    trace_mass_threshold: float = 0.90
    evaluation_point: np.ndarray | None = None
    label: str = ""

    @property
    def V_stiff(self) -> np.ndarray:
        return self.eigenvectors[:, : self.k]

    @property
    def V_soft(self) -> np.ndarray:
        return self.eigenvectors[:, self.k:]

    def as_record(self) -> dict:
        return {
            "label": self.label,
            "k": self.k,
            "spectrum": [float(x) for x in self.eigenvalues],
        }


@dataclass(frozen=True)
class EjtBaseline:
    mean: float = 0.750
    std: float = 0.113
    source_windows: tuple = ()
    frozen: bool = True

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("baseline std must be positive")


@dataclass(frozen=True)
class AlignmentResult:
    alpha: float | None
    displacement_norm: float
    zscore: float | None = None
    cluster: str = ""
    stiff_ratio: float | None = None
    note: str = ""

    @property
    def defined(self) -> bool:
        return self.alpha is not None


def metric_tensor(J) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian")
    M = J.T @ J
    return 0.5 * (M + M.T)


def _k_from_spectrum(lam, threshold):
    total = lam.sum()
    if not total > 0:
        raise DegenerateMetricError("degenerate metric: zero trace")
    frac = np.cumsum(lam) / total
    k = int(np.searchsorted(frac, threshold - 1e-12, side="left")) + 1
    k = min(k, len(lam))
    # keep a tied eigenspace together, but never empty the soft span this way
    while k < len(lam) - 1 and abs(lam[k - 1] - lam[k]) <= TIE_RTOL * max(abs(lam[k - 1]), 1e-300):
        k += 1
    return k


def eigen_split(M, threshold: float = 0.90, evaluation_point=None, label: str = "") -> EjtSplit:
    """Eigendecompose ``M`` and choose k by the trace-mass rule."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("metric must be square")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    w, V = linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order]
    k = _k_from_spectrum(w, threshold)
    ep = None if evaluation_point is None else np.asarray(evaluation_point, dtype=float)
    return EjtSplit(w, V, k, threshold, ep, label)


def ejt_at(model, point, threshold: float = 0.90, label: str = "") -> EjtSplit:
    """Split of the encoder's metric tensor at ``point`` (scaled clean units)."""
    return eigen_split(metric_tensor(model.jacobian(point)), threshold, point, label)


def soft_alignment(delta_x, split: EjtSplit, cluster: str = "",
                   floor: float = DISPLACEMENT_FLOOR) -> AlignmentResult:
    """Share of the displacement's squared norm lying in the soft span."""
    d = np.asarray(delta_x, dtype=float)
    norm = float(np.linalg.norm(d))
    if norm < floor:
        return AlignmentResult(None, norm, cluster=cluster, note="directionally undefined")
    soft = float(np.sum((split.V_soft.T @ d) ** 2))
    stiff = float(np.sum((split.V_stiff.T @ d) ** 2))
    tot = soft + stiff
    return AlignmentResult(soft / tot, norm, cluster=cluster, stiff_ratio=stiff / tot)


def ejt_zscore(alpha: float, baseline: EjtBaseline) -> float:
    if not baseline.frozen:
        raise ValueError("baseline must be frozen before scoring")
    if baseline.std <= 0:
        raise ValueError("baseline std must be positive")
    return (alpha - baseline.mean) / baseline.std


def fit_baseline(alphas, source_windows: tuple = ()) -> EjtBaseline:
    """Frozen baseline from stable-window alphas (sample mean and N-1 std)."""
    a = np.asarray([x for x in alphas if x is not None], dtype=float)
    if len(a) < 2:
        raise ValueError("need at least 2 stable windows")
    std = float(a.std(ddof=1))
    if not std > 0:
        raise ValueError("zero variance across stable windows")
    return EjtBaseline(float(a.mean()), std, tuple(source_windows), True)


def feature_loadings(split: EjtSplit) -> np.ndarray:
    Vs = split.V_stiff
    return (Vs**2) @ split.eigenvalues[: split.k]


def top_loading_features(split: EjtSplit, n: int = 10) -> frozenset[int]:
    """Indices of the ``n`` features with the largest eigenvalue-weighted stiff loading."""
    load = feature_loadings(split)
    order = sorted(range(len(load)), key=lambda i: (-load[i], i))
    return frozenset(order[:n])


def loading_similarity(a, b) -> float:
    """Top-n overlap |A & B| / n between two loading sets of equal size."""
    a, b = frozenset(a), frozenset(b)
    if len(a) != len(b):
        raise ValueError("loading sets differ in size")
    if not a:
        raise ValueError("empty loading sets")
    return len(a & b) / len(a)
