"""Gaussian-Bernoulli RBM: the thermodynamic observer.

Energy with centred visible units::

    E(v, h) = sum_i (v_i - b_i)^2 / (2 s_i^2) - sum_j c_j h_j
              - sum_ij W_ij h_j (v_i - b_i) / s_i^2

so ``p(h_j = 1 | v) = sigmoid(c_j + sum_i W_ij (v_i - b_i) / s_i^2)`` and
``v | h ~ N(b + W h, s^2)``. Training is CD-1 on ``(b, log s^2, W, c)``.

The alarm signal never reads the hidden layer: it uses the visible free
energy ``F(x) = 0.5 * sum_i (x_i - b_i)^2 / s_i^2`` and its coefficient of
variation across a window.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cdae import TrainingDivergedError
from .population import FrozenError

logger = logging.getLogger(__name__)

SATURATION_TOL = 1e-6


class DegeneratePopulationError(ValueError):
    pass


@dataclass(frozen=True)
class ConditioningReport:
    hidden_bias_mean: float
    hidden_bias_std: float
    n_large_hidden_bias: int
    saturation_fraction: float
    n_sigma_clamped: int

    def as_dict(self) -> dict:
        return {
            "hidden_bias_mean": self.hidden_bias_mean,
            "hidden_bias_std": self.hidden_bias_std,
            "n_large_hidden_bias": self.n_large_hidden_bias,
            "saturation_fraction": self.saturation_fraction,
            "n_sigma_clamped": self.n_sigma_clamped,
        }


@dataclass(frozen=True)
class FragmentationSignal:
    date: dt.date | None
    free_energies: np.ndarray
    mean: float
    std: float
    cv: float


class GaussianRBM(TransformerMixin, BaseEstimator):
    """Gaussian visible / Bernoulli hidden RBM trained with CD-1.

    Parameters
    ----------
    n_hidden : int
        Hidden units; the CCA bridge expects 32.
    learning_rate : float
        Step size for ``W``, ``b`` and ``c``; ``log s^2`` uses a tenth of it.
    sigma_floor : float
        Lower bound on every ``s_i`` (standardized units).
    hidden_read : {"mean_field", "pre_sigmoid"}
        What :meth:`transform` returns.
    """

    def __init__(
        self,
        n_hidden: int = 32,
        learning_rate: float = 5e-3,
        epochs: int = 10,
        batch_size: int = 100,
        seed: int = 0,
        sigma_floor: float = 1e-3,
        weight_decay: float = 1e-4,
        hidden_read: str = "mean_field",
    ):
        self.n_hidden = n_hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.sigma_floor = sigma_floor
        self.weight_decay = weight_decay
        self.hidden_read = hidden_read

    def set_params(self, **params):
        if getattr(self, "frozen_", False):
            raise FrozenError("model is frozen")
        return super().set_params(**params)

    @property
    def sigma_(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var_)

    def fit(self, X, y=None):
        if getattr(self, "frozen_", False):
            raise FrozenError("model is frozen; refitting is not allowed")
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        rng = np.random.default_rng(self.seed)
        floor_lv = 2.0 * np.log(self.sigma_floor)
        self.n_features_in_ = d
        self.visible_bias_ = X.mean(axis=0)
        lv = np.log(np.maximum(X.var(axis=0), self.sigma_floor**2))
        self.log_var_ = lv
        # trained in the sigma-normalised form (W = W_std * sigma) so updates stay O(1)
        # even for columns pinned at the sigma floor; stored as W at the end
        Ws = rng.normal(0.0, 0.01, size=(d, self.n_hidden))
        self.hidden_bias_ = np.zeros(self.n_hidden)
        self.frozen_ = False
        clamped = np.zeros(d, bool)
        bs = min(self.batch_size, n)
        lr = self.learning_rate
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for bi, start in enumerate(range(0, n, bs)):
                v0 = X[order[start:start + bs]]
                b, c = self.visible_bias_, self.hidden_bias_
                sig = np.exp(0.5 * self.log_var_)

                u0 = (v0 - b) / sig
                h0 = expit(u0 @ Ws + c)
                hs = (rng.random(h0.shape) < h0).astype(float)
                u1 = hs @ Ws.T + rng.standard_normal(v0.shape)
                h1 = expit(u1 @ Ws + c)

                m = len(v0)
                r0 = h0 @ Ws.T
                r1 = h1 @ Ws.T
                gW = (u0.T @ h0 - u1.T @ h1) / m - self.weight_decay * Ws
                gc = (h0 - h1).mean(0)
                # bias step preconditioned by sigma^2
                gb = sig * ((u0 - r0).mean(0) - (u1 - r1).mean(0))
                glv = 0.5 * ((u0 * (u0 - r0)).mean(0) - (u1 * (u1 - r1)).mean(0))

                Ws = Ws + lr * gW
                self.hidden_bias_ = c + lr * gc
                self.visible_bias_ = b + lr * gb
                new_lv = self.log_var_ + 0.1 * lr * glv
                low = new_lv < floor_lv
                clamped |= low
                self.log_var_ = np.where(low, floor_lv, new_lv)
                if not (np.all(np.isfinite(Ws)) and np.all(np.isfinite(self.log_var_))
                        and np.all(np.isfinite(self.visible_bias_))):
                    raise TrainingDivergedError(
                        f"non-finite parameter update at epoch {epoch}, batch {bi}"
                    )
        self.weights_ = Ws * np.exp(0.5 * self.log_var_)[:, None]
        self.n_sigma_clamped_ = int(clamped.sum())
        self.conditioning_ = self.conditioning_report(X)
        logger.debug("GRBM trained: %s", self.conditioning_)
        return self

    def freeze(self):
        check_is_fitted(self, "weights_")
        for arr in (self.weights_, self.visible_bias_, self.log_var_, self.hidden_bias_):
            arr.setflags(write=False)
        self.frozen_ = True
        return self

    def _check_input(self, X):
        check_is_fitted(self, "weights_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.ndim != 2 or X2.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got shape {X.shape}")
        return X2, single

    def visible_free_energy(self, X):
        """0.5 * sum_i (x_i - b_i)^2 / s_i^2, per row; the sigmoid path is never touched."""
        X2, single = self._check_input(X)
        dev = X2 - self.visible_bias_
        F = 0.5 * np.sum(dev * dev * np.exp(-self.log_var_), axis=1)
        return float(F[0]) if single else F

    def hidden_input(self, X):
        X2, single = self._check_input(X)
        pre = ((X2 - self.visible_bias_) * np.exp(-self.log_var_)) @ self.weights_ + self.hidden_bias_
        return pre[0] if single else pre

    def hidden_activations(self, X):
        """Mean-field hidden probabilities and the fraction of saturated units."""
        pre = self.hidden_input(X)
        h = expit(pre)
        sat = float(np.mean((h < SATURATION_TOL) | (h > 1.0 - SATURATION_TOL)))
        return h, sat

    def transform(self, X):
        if self.hidden_read == "pre_sigmoid":
            return self.hidden_input(X)
        if self.hidden_read != "mean_field":
            raise ValueError(f"unknown hidden_read {self.hidden_read!r}")
        return self.hidden_activations(X)[0]

    def conditioning_report(self, X=None) -> ConditioningReport:
        check_is_fitted(self, "weights_")
        c = self.hidden_bias_
        sat = self.hidden_activations(X)[1] if X is not None else float("nan")
        return ConditioningReport(
            hidden_bias_mean=float(c.mean()),
            hidden_bias_std=float(c.std()),
            n_large_hidden_bias=int(np.sum(np.abs(c) > 5)),
            saturation_fraction=sat,
            n_sigma_clamped=int(getattr(self, "n_sigma_clamped_", 0)),
        )

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.visible_bias_, self.log_var_, self.weights_, self.hidden_bias_):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def coefficient_of_variation(values) -> tuple[float, float, float]:
    """(mean, population std, cv) of a vector of free energies."""
    F = np.asarray(values, dtype=float)
    mean = float(F.mean())
    if mean <= 0:
        raise DegeneratePopulationError("degenerate population: mean free energy is zero")
    std = float(F.std())
    return mean, std, std / mean


def fragmentation_cv(model: GaussianRBM, X, date: dt.date | None = None) -> FragmentationSignal:
    """Population coefficient of variation of the visible free energy for one window.

    ``X`` holds the window's standardized 191-feature rows.
    """
    F = np.atleast_1d(model.visible_free_energy(X))
    if len(F) == 0:
        raise ValueError("empty window")
    mean, std, cv = coefficient_of_variation(F)
    if len(F) == 1:
        warnings.warn("single-relay window: CV is 0 by construction", stacklevel=2)
    return FragmentationSignal(date=date, free_energies=F, mean=mean, std=std, cv=cv)
