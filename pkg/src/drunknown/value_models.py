"""Linear value-function models and the extended regression class.

Feature maps are callables ``features(X, t) -> (..., K, p)`` acting on the
per-action context features ``X`` of shape ``(..., K, d)`` observed at step
``t``.  :class:`ExtendedRegression` adds the ``cᵀμ̇`` term that absorbs the
effect of estimating the logging policy:

    F_t(x, a; β, c) = ρ_{0:t-1} π(a|x) ψ(t, x, a)ᵀβ + γ^{-t} cᵀ μ̇(a|x)
"""
from __future__ import annotations

import numpy as np

from .core import Dataset


class ConstantFeatures:
    """Intercept only: ``ψ = (1,)``."""

    def dim(self, d: int) -> int:
        return 1

    def __call__(self, X, t: int = 0):
        X = np.asarray(X)
        return np.ones(X.shape[:-1] + (1,))

    def __repr__(self):
        return "ConstantFeatures()"


class LinearFeatures:
    """``ψ = (1, x_a)``, shared across time steps."""

    def dim(self, d: int) -> int:
        return d + 1

    def __call__(self, X, t: int = 0):
        X = np.asarray(X, dtype=float)
        return np.concatenate([np.ones(X.shape[:-1] + (1,)), X], axis=-1)

    def __repr__(self):
        return "LinearFeatures()"


class TimeAugmentedFeatures:
    """``ψ = (1, onehot(t) ⊗ x_a)``: a separate linear map per step plus a shared intercept.

    With ``horizon == 1`` this is exactly :class:`LinearFeatures`.
    """

    def __init__(self, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.horizon = int(horizon)

    def dim(self, d: int) -> int:
        return 1 + self.horizon * d

    def __call__(self, X, t: int = 0):
        X = np.asarray(X, dtype=float)
        if not 0 <= t < self.horizon:
            raise IndexError(f"step {t} outside [0, {self.horizon})")
        d = X.shape[-1]
        out = np.zeros(X.shape[:-1] + (self.dim(d),))
        out[..., 0] = 1.0
        out[..., 1 + t * d:1 + (t + 1) * d] = X
        return out

    def __repr__(self):
        return f"TimeAugmentedFeatures({self.horizon})"


def design_tensor(features, data: Dataset) -> np.ndarray:
    """``ψ(t, x_t, a)`` for every trajectory, step and action: ``(n, T, K, p)``."""
    return np.stack([features(data.features[:, t], t) for t in range(data.horizon)], axis=1)


class LinearValueModel:
    """``Q̂(t, x, a; β) = ψ(t, x, a)ᵀβ``."""

    def __init__(self, features, beta):
        self.features = features
        self.beta = np.asarray(beta, dtype=float).ravel()

    def __repr__(self):
        return f"LinearValueModel({self.features!r}, beta={self.beta!r})"

    def q_values(self, t: int, X) -> np.ndarray:
        """Q̂ for every action of the context(s) ``X``: ``(..., K)``."""
        return self.features(X, t) @ self.beta

    def q_hat(self, t: int, X, a: int) -> float:
        return float(self.q_values(t, X)[..., a])

    def v_hat(self, target, t: int, X):
        """``V̂(t, x) = Σ_a π(a|x) Q̂(t, x, a)``."""
        return np.sum(target.probs(X) * self.q_values(t, X), axis=-1)


def q_hat(model: LinearValueModel, t: int, X, a: int) -> float:
    return model.q_hat(t, X, a)


def v_hat(model: LinearValueModel, target, t: int, X):
    return model.v_hat(target, t, X)


class ExtendedRegression:
    """The regression class ``F_t`` (``F`` for bandits, where ``t = 0`` and ``ρ = 1``).

    Only the gradient matrix ``f`` is consumed by the estimating-equation
    solver; ``F`` is linear in the stacked parameter ``(β, c)``.
    """

    def __init__(self, features, target, logging, gamma: float = 1.0, beta=None, c=None, d: int | None = None):
        self.features = features
        self.target = target
        self.logging = logging
        self.gamma = float(gamma)
        self.beta = None if beta is None else np.asarray(beta, dtype=float).ravel()
        self.c = np.zeros(logging.n_params) if c is None else np.asarray(c, dtype=float).ravel()

    @property
    def value_model(self) -> LinearValueModel:
        return LinearValueModel(self.features, self.beta)

    def _time_weight(self, t):
        with np.errstate(divide="ignore"):
            return np.power(self.gamma, -float(t)) if t > 0 else 1.0

    def f_matrix(self, t: int, X, ratio=1.0) -> np.ndarray:
        """Rows ``[ρ_{0:t-1} π(a|x) ψ(t,x,a)ᵀ, γ^{-t} μ̇(a|x)ᵀ]``: shape ``(..., K, p + q)``."""
        ratio = np.asarray(ratio, dtype=float)
        pi = self.target.probs(X)
        left = (ratio[..., None] * pi)[..., None] * self.features(X, t)
        right = self._time_weight(t) * self.logging.score(X)
        return np.concatenate([left, right], axis=-1)

    def values(self, t: int, X, ratio=1.0, beta=None, c=None) -> np.ndarray:
        """``F⃗_t(x; β, c)``: shape ``(..., K)``."""
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        c = self.c if c is None else np.asarray(c, dtype=float)
        return self.f_matrix(t, X, ratio) @ np.concatenate([beta, c])

    def extended_q(self, t: int, X, beta=None, c=None) -> np.ndarray:
        """``Q̃ = Q̂ + cᵀμ̇/π`` (requires π > 0 everywhere), so that ``F = π·Q̃`` at ``ρ = 1``."""
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        c = self.c if c is None else np.asarray(c, dtype=float)
        pi = self.target.probs(X)
        q = self.features(X, t) @ beta
        return q + self._time_weight(t) * (self.logging.score(X) @ c) / pi
