"""Per-window canonical correlation between the two observers' latent views."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy import linalg

DEGENERATE_RHO = 0.05


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CcaFit:
    date: dt.date | None
    rho: np.ndarray
    u1: np.ndarray
    v1: np.ndarray
    n_samples: int
    regularization: float

    @property
    def rho1(self) -> float:
        return float(self.rho[0])


@dataclass(frozen=True)
class CcaDelta:
    theta_deg: float | None
    delta_rho: float | None
    theta_unfolded_deg: float | None = None


def _inv_sqrt(C, reg, side):
    d = C.shape[0]
    if reg > 0:
        C = C + reg * np.trace(C) / d * np.eye(d)
    w, V = linalg.eigh(C)
    if reg == 0 and (w[0] <= 1e-12 * max(w[-1], 1e-300)):
        raise RankDeficientError(f"rank-deficient covariance in the {side} view")
    w = np.maximum(w, 1e-300)
    return (V / np.sqrt(w)) @ V.T


def fit_cca(Z_cdae, Z_rbm, regularization: float = 1e-6, date: dt.date | None = None) -> CcaFit:
    """Regularised linear CCA of two views.

    Columns are centred internally; each covariance block gets a ridge of
    ``regularization * trace / dim``. Canonical correlations are the singular
    values of the whitened cross-covariance ``Cxx^-1/2 Cxy Cyy^-1/2``.
    """
    X = np.asarray(Z_cdae, dtype=float)
    Y = np.asarray(Z_rbm, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError("views must be 2-D with equal row counts")
    n = len(X)
    if n <= 2:
        raise ValueError(f"CCA needs more than 2 samples, got {n}")
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    Cxx = X.T @ X / (n - 1)
    Cyy = Y.T @ Y / (n - 1)
    Cxy = X.T @ Y / (n - 1)
    Kx = _inv_sqrt(Cxx, regularization, "CDAE")
    Ky = _inv_sqrt(Cyy, regularization, "GRBM")
    U, s, Vt = linalg.svd(Kx @ Cxy @ Ky, full_matrices=False)
    rho = np.clip(s, 0.0, 1.0)
    a = Kx @ U[:, 0]
    b = Ky @ Vt[0]
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    if a[np.argmax(np.abs(a))] < 0:
        a, b = -a, -b
    return CcaFit(date=date, rho=rho, u1=a, v1=b, n_samples=n, regularization=regularization)


def rotation_angle(fit_t: CcaFit | None, fit_prev: CcaFit | None, folded: bool = True) -> float | None:
    """Angle in degrees between consecutive first canonical directions (CDAE side).

    Folded (default) uses ``|cos|`` and lies in [0, 90]; unfolded keeps the
    sign and lies in [0, 180].
    """
    if fit_t is None or fit_prev is None:
        return None
    c = float(np.dot(fit_t.u1, fit_prev.u1))
    if folded:
        c = abs(c)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def agreement_delta(fit_t: CcaFit | None, fit_prev: CcaFit | None) -> float | None:
    if fit_t is None or fit_prev is None:
        return None
    return fit_t.rho1 - fit_prev.rho1


def cca_delta(fit_t, fit_prev) -> CcaDelta:
    return CcaDelta(
        theta_deg=rotation_angle(fit_t, fit_prev),
        delta_rho=agreement_delta(fit_t, fit_prev),
        theta_unfolded_deg=rotation_angle(fit_t, fit_prev, folded=False),
    )


def fold_angle(theta_deg: float) -> float:
    """Map an unfolded angle in [0, 180] onto its sign-invariant equivalent in [0, 90]."""
    t = float(theta_deg) % 180.0
    return 180.0 - t if t > 90.0 else t


def degeneration_check(fit: CcaFit, threshold: float = DEGENERATE_RHO) -> tuple[bool, dict]:
    """Flag a collapsed fit (first canonical correlation below ``threshold``)."""
    flag = bool(fit.rho1 < threshold)
    return flag, {"rho": [float(r) for r in fit.rho], "threshold": threshold}
