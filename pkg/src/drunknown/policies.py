"""Policy families: action probabilities, score vectors and parameter fitting.

Every policy evaluates batches of contexts.  ``X`` has shape ``(..., K, d)``
(one feature vector per action); ``probs(X)`` returns ``(..., K)`` and
``score(X)`` returns ``(..., K, q)`` with ``q = n_params``, the gradient of
each action probability (not of its logarithm) with respect to the
parameters.

Fitting happens on an unconstrained scale ``θ`` (identity for the softmax
family, logit for the mixture weight); scores are always reported on the
natural parameter scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logit

from .core import ActionDistribution, Context, Dataset, decode_tabular, taken
from .errors import NonConvergence, NumericalOverflow, SingularInformation


class Policy:
    """Base class.  Subclasses implement ``probs``, ``score`` and the parameter plumbing."""

    n_params = 0

    @property
    def params(self) -> np.ndarray:
        return np.zeros(0)

    def with_params(self, params) -> "Policy":
        return self

    def initial_params(self) -> np.ndarray:
        return self.params

    def to_free(self, params) -> np.ndarray:
        return np.asarray(params, dtype=float)

    def from_free(self, theta) -> "Policy":
        return self.with_params(theta)

    def free_jacobian(self, theta) -> np.ndarray:
        """Diagonal of ``dφ/dθ``."""
        return np.ones(self.n_params)

    def probs(self, X) -> np.ndarray:
        raise NotImplementedError

    def score(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.zeros(X.shape[:-1] + (self.n_params,))

    def distribution(self, context) -> ActionDistribution:
        x = context.per_action_features if isinstance(context, Context) else context
        return ActionDistribution(self.probs(x))

    def frozen(self) -> "FixedPolicy":
        return FixedPolicy(self)


def quadratic_expand(X):
    """Feature transform ``[x, x**2]`` (used to build misspecified logging policies)."""
    X = np.asarray(X, dtype=float)
    return np.concatenate([X, X ** 2], axis=-1)


class SoftmaxLinearPolicy(Policy):
    """``μ(a|x) = exp(z_aᵀφ) / Σ_i exp(z_iᵀφ)`` with ``z = transform(x)``."""

    def __init__(self, phi, transform: Optional[Callable] = None):
        self.phi = np.asarray(phi, dtype=float).ravel()
        self.transform = transform
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("softmax parameters must be finite")

    def __repr__(self):
        return f"SoftmaxLinearPolicy(phi={self.phi!r})"

    @property
    def n_params(self):
        return self.phi.size

    @property
    def params(self):
        return self.phi

    def with_params(self, params):
        return SoftmaxLinearPolicy(params, self.transform)

    def initial_params(self):
        return np.zeros_like(self.phi)

    def _z(self, X):
        X = np.asarray(X, dtype=float)
        return X if self.transform is None else self.transform(X)

    def probs(self, X):
        logits = self._z(X) @ self.phi
        logits = logits - logits.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(logits)) or np.any(logits < -np.inf):
            raise NumericalOverflow("non-finite logits")
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def score(self, X):
        z = self._z(X)
        p = self.probs(X)
        centered = z - np.einsum("...k,...kd->...d", p, z)[..., None, :]
        return p[..., None] * centered


class MixturePolicy(Policy):
    """``μ = α·μ₀ + (1-α)·uniform`` with the mixing weight ``α`` as the only parameter."""

    def __init__(self, alpha: float, base: Policy):
        alpha = float(alpha)
        if not 0.0 < alpha < 1.0:
            raise ValueError("mixing weight must lie strictly inside (0, 1)")
        self.alpha = alpha
        self.base = base

    def __repr__(self):
        return f"MixturePolicy(alpha={self.alpha!r}, base={self.base!r})"

    n_params = 1

    @property
    def params(self):
        return np.array([self.alpha])

    def with_params(self, params):
        return MixturePolicy(float(np.ravel(params)[0]), self.base)

    def initial_params(self):
        return np.array([0.5])

    def to_free(self, params):
        return logit(np.asarray(params, dtype=float))

    def from_free(self, theta):
        alpha = float(expit(np.ravel(theta)[0]))
        if not 0.0 < alpha < 1.0:
            raise NonConvergence("mixing weight left (0, 1) on the logit scale")
        return MixturePolicy(alpha, self.base)

    def free_jacobian(self, theta):
        a = expit(np.ravel(theta)[0])
        return np.array([a * (1.0 - a)])

    def probs(self, X):
        p0 = self.base.probs(X)
        return self.alpha * p0 + (1.0 - self.alpha) / p0.shape[-1]

    def score(self, X):
        p0 = self.base.probs(X)
        return (p0 - 1.0 / p0.shape[-1])[..., None]


class FixedPolicy(Policy):
    """Zero-parameter view of another policy (e.g. a known logging policy)."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def __repr__(self):
        return f"FixedPolicy({self.policy!r})"

    def probs(self, X):
        return self.policy.probs(X)


class ConstantPolicy(Policy):
    """The same action distribution in every context."""

    def __init__(self, probs):
        self.table = ActionDistribution(probs).probs

    def __repr__(self):
        return f"ConstantPolicy({self.table.tolist()!r})"

    def probs(self, X):
        X = np.asarray(X)
        return np.broadcast_to(self.table, X.shape[:-1]).copy()


class UniformPolicy(Policy):
    def probs(self, X):
        X = np.asarray(X)
        K = X.shape[-2]
        return np.full(X.shape[:-1], 1.0 / K)


class TabularPolicy(Policy):
    """Per-observation action table for tabular contexts built by ``encode_tabular``."""

    def __init__(self, table):
        table = np.asarray(table, dtype=float)
        for row in table:
            ActionDistribution(row)
        self.table = table

    def __repr__(self):
        return f"TabularPolicy({self.table.tolist()!r})"

    def probs(self, X):
        obs = decode_tabular(X, self.table.shape[0])
        return self.table[obs]


def prob(model: Policy, x) -> ActionDistribution:
    return model.distribution(x)


def score(model: Policy, x, a: int) -> np.ndarray:
    """``μ̇(a|x;φ)`` for a single context."""
    feats = x.per_action_features if isinstance(x, Context) else np.asarray(x)
    return model.score(feats)[a]


# --------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitResult:
    policy: Policy
    phi_hat: np.ndarray
    iterations: int
    final_score_norm: float
    fisher: np.ndarray
    converged: bool = True

    @property
    def stderr(self) -> np.ndarray:
        """Fisher-based standard errors of ``phi_hat``."""
        if self.fisher.size == 0:
            return np.zeros(0)
        return np.sqrt(np.diag(np.linalg.pinv(self.fisher)))


def fisher_information(policy: Policy, X) -> np.ndarray:
    """``Σ μ̇ μ̇ᵀ / μ`` summed over every context in ``X`` and every action."""
    mu = policy.probs(X)
    sc = policy.score(X)
    q = sc.shape[-1]
    sc = sc.reshape(-1, q)
    w = 1.0 / np.maximum(mu.reshape(-1), 1e-300)
    return (sc * w[:, None]).T @ sc


def mle_score(policy: Policy, data: Dataset) -> np.ndarray:
    """``U_n(φ) = Σ_{i,t} μ̇(a_t|x_t)/μ(a_t|x_t)``."""
    mu = taken(policy.probs(data.features), data.actions)
    sc = np.take_along_axis(policy.score(data.features), data.actions[..., None, None], axis=-2)[..., 0, :]
    return np.einsum("ntq,nt->q", sc, 1.0 / mu)


def _log_likelihood(policy, data, l2):
    mu = taken(policy.probs(data.features), data.actions)
    return float(np.sum(np.log(np.maximum(mu, 1e-300))) - 0.5 * l2 * policy.params @ policy.params)


def _ridged_solve(matrix, rhs, what):
    dim = matrix.shape[0]
    tr = float(np.trace(matrix))
    if not np.isfinite(tr) or abs(tr) <= 1e-300:
        raise SingularInformation(f"{what} is zero or non-finite")
    reg = matrix + 1e-8 * abs(tr) / dim * np.eye(dim)
    if np.linalg.cond(reg) > 1e14:
        raise SingularInformation(f"{what} is numerically singular after ridge")
    return np.linalg.solve(reg, rhs)


def fit_mle(family: Policy, data: Dataset, *, tol: float = 1e-10, max_iter: int = 100,
            max_halvings: int = 30, l2: float = 0.0) -> FitResult:
    """Maximum-likelihood fit of ``family`` to the logged actions of ``data``.

    Fisher-scoring Newton steps with step-halving on the log-likelihood,
    started from ``family.initial_params()``.  Converged when
    ``‖U_n‖∞ ≤ tol·n·T``.  ``l2`` adds an optional ridge penalty
    ``-½·l2·‖φ‖²`` (used when training classifiers, 0 for logging-policy fits).
    """
    if family.n_params == 0:
        return FitResult(family, np.zeros(0), 0, 0.0, np.zeros((0, 0)))
    threshold = tol * data.n * data.horizon
    theta = family.to_free(family.initial_params())
    policy = family.from_free(theta)
    ll = _log_likelihood(policy, data, l2)
    for it in range(max_iter + 1):
        U = mle_score(policy, data) - l2 * policy.params
        unorm = float(np.max(np.abs(U)))
        if not np.isfinite(unorm):
            raise NonConvergence("score became non-finite")
        if unorm <= threshold:
            fisher = fisher_information(policy, data.features)
            return FitResult(policy, policy.params.copy(), it, unorm, fisher)
        if it == max_iter:
            break
        J = policy.free_jacobian(theta)
        info = fisher_information(policy, data.features) + l2 * np.eye(policy.n_params)
        step = _ridged_solve(J[:, None] * info * J[None, :], J * U, "Fisher information")
        scale = 1.0
        slack = 1e-12 * max(1.0, abs(ll))  # rounding noise of the summed log-likelihood
        for _ in range(max_halvings + 1):
            try:
                cand_theta = theta + scale * step
                cand = family.from_free(cand_theta)
                cand_ll = _log_likelihood(cand, data, l2)
            except (NonConvergence, NumericalOverflow):
                cand_ll = -np.inf
            if cand_ll >= ll - slack:
                break
            scale *= 0.5
        else:
            raise NonConvergence(f"line search failed at iteration {it} (‖U‖∞={unorm:.3g})")
        theta, policy, ll = cand_theta, cand, cand_ll
        if np.max(np.abs(theta)) > 1e4 or (l2 == 0 and ll > -1e-9 * data.n * data.horizon):
            raise NonConvergence("parameter estimates diverge (separated or boundary data)")
    raise NonConvergence(f"no convergence after {max_iter} iterations (‖U‖∞={unorm:.3g})")


def mle_weights(policy: Policy, X) -> np.ndarray:
    """Weight function ``μ̇/μ`` reproducing the likelihood score in :func:`fit_general`."""
    return policy.score(X) / policy.probs(X)[..., None]


def target_weighted(target: Policy) -> Callable:
    """Weight function ``π(a|x)·μ̇/μ``: emphasizes actions the target policy favours."""

    def h(policy, X):
        return target.probs(X)[..., None] * mle_weights(policy, X)

    return h


def general_score(policy: Policy, data: Dataset, h: Callable) -> np.ndarray:
    """``Σ_{i,t,a} (Δ_{a,t} - μ(a|x_t))·h(x_t, a; φ)``."""
    mu = policy.probs(data.features)
    delta = np.zeros_like(mu)
    np.put_along_axis(delta, data.actions[..., None], 1.0, axis=-1)
    return np.einsum("ntk,ntkq->q", delta - mu, h(policy, data.features))


def fit_general(family: Policy, data: Dataset, h: Callable, *, jacobian: Optional[Callable] = None,
                tol: float = 1e-10, max_iter: int = 100, max_halvings: int = 30,
                fd_step: float = 1e-6) -> FitResult:
    """Solve the estimating equation ``Σ (Δ - μ)·h = 0`` by damped Newton.

    ``h(policy, X)`` returns weights of shape ``(..., K, q)``.  The Jacobian
    of the equation with respect to the free parameters is taken from
    ``jacobian(policy, data)`` when supplied, otherwise from central finite
    differences.  Step-halving keeps ``‖U‖`` decreasing.
    """
    if family.n_params == 0:
        return FitResult(family, np.zeros(0), 0, 0.0, np.zeros((0, 0)))
    threshold = tol * data.n * data.horizon
    theta = family.to_free(family.initial_params())
    policy = family.from_free(theta)
    U = general_score(policy, data, h)
    q = theta.size
    for it in range(max_iter + 1):
        unorm = float(np.max(np.abs(U)))
        if not np.isfinite(unorm):
            raise NonConvergence("estimating equation became non-finite")
        # the Jacobian is checked even at a root: a zero Jacobian means φ is not identified
        if jacobian is not None:
            jac = np.asarray(jacobian(policy, data), dtype=float)
        else:
            jac = np.empty((q, q))
            for j in range(q):
                hj = fd_step * max(1.0, abs(theta[j]))
                e = np.zeros(q)
                e[j] = hj
                up = general_score(family.from_free(theta + e), data, h)
                dn = general_score(family.from_free(theta - e), data, h)
                jac[:, j] = (up - dn) / (2 * hj)
        if not np.all(np.isfinite(jac)) or np.max(np.abs(jac), initial=0.0) == 0.0:
            raise SingularInformation("estimating-equation Jacobian is zero or non-finite")
        if np.linalg.cond(jac) > 1e14:
            raise SingularInformation("estimating-equation Jacobian is numerically singular")
        if unorm <= threshold:
            fisher = fisher_information(policy, data.features)
            return FitResult(policy, policy.params.copy(), it, unorm, fisher)
        if it == max_iter:
            break
        step = -np.linalg.solve(jac, U)
        scale = 1.0
        base = np.linalg.norm(U)
        for _ in range(max_halvings + 1):
            try:
                cand_theta = theta + scale * step
                cand = family.from_free(cand_theta)
                cand_U = general_score(cand, data, h)
                ok = np.all(np.isfinite(cand_U)) and np.linalg.norm(cand_U) < base
            except (NonConvergence, NumericalOverflow):
                ok = False
            if ok:
                break
            scale *= 0.5
        else:
            raise NonConvergence(f"line search failed at iteration {it} (‖U‖∞={unorm:.3g})")
        theta, policy, U = cand_theta, cand, cand_U
        if np.max(np.abs(theta)) > 1e4:
            raise NonConvergence("parameter estimates diverge")
    raise NonConvergence(f"no convergence after {max_iter} iterations (‖U‖∞={unorm:.3g})")
