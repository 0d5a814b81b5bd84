"""Contractive denoising autoencoder: the geometric observer.

Encoder 17 -> 64 (tanh) -> 32 (linear), decoder 32 -> 64 (tanh) -> 17 (linear).
Training minimises the batch mean of ``||x - x_hat(x + noise)||^2`` plus
``lambda_c`` times the batch mean of ``||J(x)||_F^2`` evaluated on the clean
input, using Adam with hand-derived gradients.

For a one-hidden-layer encoder ``J = W2 diag(d) W1`` with ``d = phi'(W1 x + b1)``
so the Frobenius penalty reduces to ``d^T ((W2^T W2) * (W1 W1^T)) d``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .population import FrozenError

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


class TrainingDivergedError(FloatingPointError):
    """A non-finite loss or parameter appeared during training."""


@dataclass(frozen=True)
class CdaeTrainingConfig:
    lambda_c: float = 0.001
    noise_std: float = 0.1
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 2e-3
    seed: int = 0
    n_hidden: int = 64
    n_latent: int = 32

    def __post_init__(self):
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


def _act(name):
    if name == "tanh":
        def f(a):
            return np.tanh(a)

        def df(a, fa):
            return 1.0 - fa * fa

        def d2f(a, fa, dfa):
            return -2.0 * fa * dfa
    elif name == "identity":
        def f(a):
            return a

        def df(a, fa):
            return np.ones_like(a)

        def d2f(a, fa, dfa):
            return np.zeros_like(a)
    else:
        raise ValueError(f"unknown activation {name!r}")
    return f, df, d2f


class ContractiveDenoisingAutoencoder(TransformerMixin, BaseEstimator):
    """Deterministic contractive denoising autoencoder.

    ``transform`` returns the latent embedding, ``reconstruct`` the decoded
    input and ``jacobian`` the exact encoder Jacobian ``dz/dx``.

    Attributes:
        params_: dict of layer weights and biases.
        loss_history_: per-epoch (reconstruction, contraction) means.
        final_loss_: (reconstruction, contraction) on the full training set.
        frozen_: once True, fitting and parameter edits raise FrozenError.
    """

    def __init__(
        self,
        n_hidden: int = 64,
        n_latent: int = 32,
        lambda_c: float = 0.001,
        noise_std: float = 0.1,
        epochs: int = 40,
        batch_size: int = 128,
        learning_rate: float = 2e-3,
        seed: int = 0,
        activation: str = "tanh",
    ):
        self.n_hidden = n_hidden
        self.n_latent = n_latent
        self.lambda_c = lambda_c
        self.noise_std = noise_std
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.activation = activation

    @classmethod
    def from_config(cls, config: CdaeTrainingConfig, **kw) -> ContractiveDenoisingAutoencoder:
        return cls(**asdict(config), **kw)

    def set_params(self, **params):
        if getattr(self, "frozen_", False):
            raise FrozenError("model is frozen")
        return super().set_params(**params)

    # -- training ---------------------------------------------------------

    def _init_params(self, n_in, rng):
        def glorot(fan_out, fan_in):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_out, fan_in))

        h, k = self.n_hidden, self.n_latent
        return {
            "W1": glorot(h, n_in), "b1": np.zeros(h),
            "W2": glorot(k, h), "b2": np.zeros(k),
            "W3": glorot(h, k), "b3": np.zeros(h),
            "W4": glorot(n_in, h), "b4": np.zeros(n_in),
        }

    def fit(self, X, y=None):
        if getattr(self, "frozen_", False):
            raise FrozenError("model is frozen; refitting is not allowed")
        X = check_array(X, dtype=np.float64)
        n, n_in = X.shape
        rng = np.random.default_rng(self.seed)
        self.n_features_in_ = n_in
        self.params_ = self._init_params(n_in, rng)
        self.frozen_ = False
        m = {k: np.zeros_like(v) for k, v in self.params_.items()}
        v = {k: np.zeros_like(v) for k, v in self.params_.items()}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0
        self.loss_history_ = []
        bs = min(self.batch_size, n)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            sums = np.zeros(2)
            for bi, start in enumerate(range(0, n, bs)):
                xb = X[order[start:start + bs]]
                noise = rng.standard_normal(xb.shape) * self.noise_std if self.noise_std > 0 else 0.0
                rec, con, grads = self._loss_and_grads(xb, xb + noise)
                loss = rec + self.lambda_c * con
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {bi} (rows {start}:{start + len(xb)})"
                    )
                sums += (rec * len(xb), con * len(xb))
                step += 1
                lr_t = self.learning_rate * np.sqrt(1 - beta2**step) / (1 - beta1**step)
                for k in PARAM_NAMES:
                    g = grads[k]
                    m[k] = beta1 * m[k] + (1 - beta1) * g
                    v[k] = beta2 * v[k] + (1 - beta2) * g * g
                    self.params_[k] = self.params_[k] - lr_t * m[k] / (np.sqrt(v[k]) + eps)
            self.loss_history_.append(tuple(sums / n))
        rec, con, _ = self._loss_and_grads(X, X, need_grads=False)
        self.final_loss_ = (rec, con)
        if not np.isfinite(rec + con):
            raise TrainingDivergedError("non-finite loss on the full training set")
        logger.debug("CDAE trained: recon=%.5g contraction=%.5g", rec, con)
        return self

    def _loss_and_grads(self, x, x_in, need_grads=True):
        """Loss components and gradients for one batch.

        ``x`` is the clean target (also used for the contraction term),
        ``x_in`` the corrupted encoder input.
        """
        f, df, d2f = _act(self.activation)
        p = self.params_
        B = len(x)
        W1, b1, W2, b2, W3, b3, W4, b4 = (p[k] for k in PARAM_NAMES)

        a1 = x_in @ W1.T + b1
        h = f(a1)
        z = h @ W2.T + b2
        a3 = z @ W3.T + b3
        g = f(a3)
        xh = g @ W4.T + b4
        diff = xh - x
        rec = float(np.sum(diff * diff) / B)

        a1c = x @ W1.T + b1
        hc = f(a1c)
        D = df(a1c, hc)
        A = W2.T @ W2
        Bm = W1 @ W1.T
        C = A * Bm
        DC = D @ C
        con = float(np.sum(DC * D) / B)
        if not need_grads:
            return rec, con, None

        lam = self.lambda_c
        dxh = (2.0 / B) * diff
        gW4 = dxh.T @ g
        gb4 = dxh.sum(0)
        da3 = (dxh @ W4) * df(a3, g)
        gW3 = da3.T @ z
        gb3 = da3.sum(0)
        dz = da3 @ W3
        gW2 = dz.T @ h
        gb2 = dz.sum(0)
        da1 = (dz @ W2) * df(a1, h)
        gW1 = da1.T @ x_in
        gb1 = da1.sum(0)

        if lam:
            S = (D.T @ D) / B
            gW2 = gW2 + lam * 2.0 * (W2 @ (S * Bm))
            gW1 = gW1 + lam * 2.0 * ((S * A) @ W1)
            dD = (2.0 / B) * DC
            da1c = dD * d2f(a1c, hc, D)
            gW1 = gW1 + lam * (da1c.T @ x)
            gb1 = gb1 + lam * da1c.sum(0)

        grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2,
                 "W3": gW3, "b3": gb3, "W4": gW4, "b4": gb4}
        return rec, con, grads

    # -- inference --------------------------------------------------------

    def freeze(self):
        check_is_fitted(self, "params_")
        for arr in self.params_.values():
            arr.setflags(write=False)
        self.frozen_ = True
        return self

    def _check_input(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.ndim != 2 or X2.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got shape {X.shape}")
        return X2, single

    def encode(self, X):
        X2, single = self._check_input(X)
        f, _, _ = _act(self.activation)
        p = self.params_
        z = f(X2 @ p["W1"].T + p["b1"]) @ p["W2"].T + p["b2"]
        return z[0] if single else z

    transform = encode

    def decode(self, Z):
        f, _, _ = _act(self.activation)
        p = self.params_
        Z = np.asarray(Z, dtype=np.float64)
        return f(Z @ p["W3"].T + p["b3"]) @ p["W4"].T + p["b4"]

    def reconstruct(self, X):
        X2, single = self._check_input(X)
        out = self.decode(self.encode(X2))
        return out[0] if single else out

    def reconstruction_error(self, X) -> np.ndarray:
        """Per-row squared reconstruction error ``||x - x_hat||^2``."""
        X2, _ = self._check_input(X)
        d = self.reconstruct(X2) - X2
        return np.sum(d * d, axis=1)

    def jacobian(self, x) -> np.ndarray:
        """Exact encoder Jacobian dz/dx (n_latent x n_features) at ``x``.

        A 2-D input returns a stack of Jacobians, one per row.
        """
        X2, single = self._check_input(x)
        f, df, _ = _act(self.activation)
        p = self.params_
        a1 = X2 @ p["W1"].T + p["b1"]
        D = df(a1, f(a1))
        J = (p["W2"][None, :, :] * D[:, None, :]) @ p["W1"]
        if not np.all(np.isfinite(J)):
            raise FloatingPointError("non-finite Jacobian entries")
        return J[0] if single else J

    def contraction(self, X) -> np.ndarray:
        """Per-row squared Frobenius norm of the encoder Jacobian."""
        J = self.jacobian(np.atleast_2d(X))
        return np.sum(J * J, axis=(1, 2))

    def param_hash(self) -> str:
        check_is_fitted(self, "params_")
        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params_[k], dtype="<f8").tobytes())
        return h.hexdigest()


def train_cdae(X, config: CdaeTrainingConfig | None = None) -> ContractiveDenoisingAutoencoder:
    """Fit an (unfrozen) autoencoder on scaled clean features."""
    config = config or CdaeTrainingConfig()
    return ContractiveDenoisingAutoencoder.from_config(config).fit(X)
