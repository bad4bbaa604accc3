"""Policy-value estimators: DM, IPW, MLIPW, DR, MRDR and DRUnknown.

DRUnknown fits the logging policy by maximum likelihood, then chooses the
value-model parameters ``β`` together with an auxiliary vector ``c`` by
minimizing the empirical asymptotic-variance criterion

    Σ_{i,t} γ^{2t} ‖F⃗_t(β, c) - ρ̂_{0:t-1} diag(π) r⃗_{t:T-1}‖²_{M_t},
    M_t = diag(1/μ̂(·|x_t)) - J_K,

and plugs ``β̂`` into the standard doubly-robust formula.  For a linear value
model ``F⃗_t`` is linear in ``(β, c)`` so the stationarity condition is the
normal-equation system ``A·(β, c) = b`` built here.  MRDR is the same solve
with the ``c`` block removed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .core import PROPENSITY_FLOOR, Dataset, discount_weights, prefix_ratios, returns_to_go, step_ratios, taken
from .errors import AbsoluteContinuityViolation, MissingPropensity, SingularSystem, UnsupportedHorizon
from .policies import FitResult, Policy, fit_mle
from .value_models import ExtendedRegression, LinearValueModel, design_tensor

RIDGE = 1e-8
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    value: float
    stderr: float
    ci_low: float
    ci_high: float
    diagnostics: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class SolvedParameters:
    beta_hat: np.ndarray
    c_hat: np.ndarray
    objective_value: float
    residual_norm: float
    residual_scale: float
    condition_number: float
    pseudo_inverse: bool


@dataclass(frozen=True)
class InfluenceValues:
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


# --------------------------------------------------------------------------
# shared preparation


@dataclass
class _Prepared:
    pi: np.ndarray        # (n, T, K) target probabilities
    mu: np.ndarray        # (n, T, K) logging probabilities (floored where π = 0)
    pi_a: np.ndarray      # (n, T)
    mu_a: np.ndarray      # (n, T)
    rho: np.ndarray       # (n, T) step ratios
    rho_prev: np.ndarray  # (n, T) ρ_{0:t-1}
    disc: np.ndarray      # (T,) γ^t
    clipped: int


def _prepare(data: Dataset, target: Policy, logging: Policy, floor: float = PROPENSITY_FLOOR) -> _Prepared:
    pi = target.probs(data.features)
    mu = logging.probs(data.features)
    low = mu <= floor
    if np.any(low & (pi > 0)):
        i, t, a = np.argwhere(low & (pi > 0))[0]
        raise AbsoluteContinuityViolation(
            f"logging probability {mu[i, t, a]:.3g} <= floor {floor:g} at trajectory {i}, step {t}, "
            f"action {a} where the target probability is {pi[i, t, a]:.3g}"
        )
    clipped = int(np.count_nonzero(low))
    mu = np.maximum(mu, floor)
    rho = step_ratios(data, target, logging, floor)
    return _Prepared(
        pi=pi,
        mu=mu,
        pi_a=taken(pi, data.actions),
        mu_a=taken(mu, data.actions),
        rho=rho,
        rho_prev=prefix_ratios(rho),
        disc=discount_weights(data.discount, data.horizon),
        clipped=clipped,
    )


def _dr_terms(data: Dataset, prep: _Prepared, q_values: np.ndarray) -> np.ndarray:
    """Per-trajectory doubly-robust terms with action values ``q_values`` of shape (n, T, K)."""
    v = np.sum(prep.pi * q_values, axis=-1)
    q_a = taken(q_values, data.actions)
    inner = prep.rho * (data.rewards - q_a) + v
    return np.sum(prep.disc * prep.rho_prev * inner, axis=1)


def variance_and_ci(values, alpha: float = 0.05, center: float | None = None):
    """Influence-function standard error and normal ``1 - alpha`` interval.

    ``σ̂² = (1/n) Σ (η_i - η̄)²``, ``stderr = σ̂/√n`` and the interval is
    ``center ± z_{α/2}·stderr`` (``center`` defaults to ``η̄``).

    Returns
    -------
    (stderr, (ci_low, ci_high), degenerate)
        ``degenerate`` is True when ``σ̂² = 0`` and the interval is a point.
    """
    eta = np.asarray(values.values if isinstance(values, InfluenceValues) else values, dtype=float)
    if eta.size < 2:
        raise ValueError("need at least two influence values")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    sigma2 = float(np.mean((eta - eta.mean()) ** 2))
    stderr = float(np.sqrt(sigma2 / eta.size))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    c = float(eta.mean()) if center is None else float(center)
    return stderr, (c - z * stderr, c + z * stderr), sigma2 == 0.0


def _report(name, value, terms, alpha, diagnostics, center=None):
    diagnostics = dict(diagnostics)
    if np.size(terms) < 2:
        # no variance estimate from a single trajectory
        diagnostics["degenerate_variance"] = True
        return EstimateReport(name, float(value), float("nan"), float("nan"), float("nan"), diagnostics)
    stderr, (lo, hi), degenerate = variance_and_ci(terms, alpha, center=value if center is None else center)
    diagnostics["degenerate_variance"] = degenerate
    return EstimateReport(name, float(value), stderr, lo, hi, diagnostics)


# --------------------------------------------------------------------------
# baselines


def fit_value_least_squares(data: Dataset, features, ridge: float = 1e-10) -> LinearValueModel:
    """Least-squares fit of ``ψ(t, x_t, a_t)ᵀβ`` to the observed returns-to-go ``R_{t:T-1}``."""
    psi = design_tensor(features, data)
    psi_a = np.take_along_axis(psi, data.actions[..., None, None], axis=-2)[..., 0, :]
    X = psi_a.reshape(-1, psi.shape[-1])
    y = returns_to_go(data.rewards, data.discount).reshape(-1)
    gram = X.T @ X
    lam = ridge * max(np.trace(gram) / gram.shape[0], 1e-300)
    beta = np.linalg.lstsq(gram + lam * np.eye(gram.shape[0]), X.T @ y, rcond=None)[0]
    return LinearValueModel(features, beta)


def dm_estimate(data: Dataset, target: Policy, value_model: LinearValueModel, alpha: float = 0.05) -> EstimateReport:
    """Direct method ``(1/n) Σ_i V̂(x_i)``; only defined for one-step data."""
    if data.horizon != 1:
        raise UnsupportedHorizon("the direct method is only provided for horizon T = 1")
    terms = value_model.v_hat(target, 0, data.features[:, 0])
    return _report("dm", terms.mean(), terms, alpha, {})


def ipw_estimate(data: Dataset, target: Policy, alpha: float = 0.05) -> EstimateReport:
    """Known-propensity IPW ``(1/n) Σ_i Σ_t γ^t ρ_{0:t} r_t`` using the logged propensities."""
    if data.propensities is None:
        raise MissingPropensity("IPW with a known logging policy needs logged propensities")
    pi_a = taken(target.probs(data.features), data.actions)
    rho = pi_a / data.propensities
    terms = np.sum(discount_weights(data.discount, data.horizon) * np.cumprod(rho, axis=1) * data.rewards, axis=1)
    return _report("ipw", terms.mean(), terms, alpha, {})


def _ipw_with_policy(name, data, target, policy, alpha, diagnostics):
    prep = _prepare(data, target, policy)
    terms = np.sum(prep.disc * prep.rho_prev * prep.rho * data.rewards, axis=1)
    diagnostics = dict(diagnostics, clipped_propensities=prep.clipped)
    return _report(name, terms.mean(), terms, alpha, diagnostics)


def mlipw_estimate(data: Dataset, target: Policy, logging_family: Policy, alpha: float = 0.05,
                   fit: FitResult | None = None) -> EstimateReport:
    """IPW with the maximum-likelihood logging policy in place of the true one."""
    fit = fit_mle(logging_family, data) if fit is None else fit
    return _ipw_with_policy("mlipw", data, target, fit.policy, alpha,
                            {"phi_hat": fit.phi_hat.tolist(), "mle_iterations": fit.iterations})


def dr_estimate(data: Dataset, target: Policy, logging: Policy, value_model: LinearValueModel,
                alpha: float = 0.05, name: str = "dr") -> EstimateReport:
    """Standard doubly-robust estimate with a fixed ``β`` and the given (known or fitted) logging policy."""
    prep = _prepare(data, target, logging)
    q = np.stack([value_model.q_values(t, data.features[:, t]) for t in range(data.horizon)], axis=1)
    terms = _dr_terms(data, prep, q)
    return _report(name, terms.mean(), terms, alpha,
                   {"beta": value_model.beta.tolist(), "clipped_propensities": prep.clipped})


# --------------------------------------------------------------------------
# the joint (β, c) estimating equation


@dataclass(frozen=True)
class EstimatingEquation:
    """``S_n(θ) = A θ - b`` for the stacked parameter ``θ = (β, c)``.

    ``objective(θ) = θᵀAθ - 2bᵀθ + const`` equals the empirical weighted
    seminorm criterion.
    """

    A: np.ndarray
    b: np.ndarray
    const: float
    p: int
    q: int

    def residual(self, theta) -> np.ndarray:
        return self.A @ theta - self.b

    def objective(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(theta @ self.A @ theta - 2.0 * self.b @ theta + self.const)

    def restricted(self) -> "EstimatingEquation":
        """The system with the ``c`` block deleted (``c`` fixed at zero)."""
        p = self.p
        return EstimatingEquation(self.A[:p, :p], self.b[:p], self.const, p, 0)


def pseudo_returns(data: Dataset, prep: _Prepared) -> np.ndarray:
    """``R̄_{t:T-1} = r_t + Σ_{τ>t} γ^{τ-t} ρ̂_{t+1:τ} r_τ`` for every t: (n, T)."""
    gamma = data.discount
    out = np.zeros_like(data.rewards)
    acc = np.zeros(data.n)
    for t in range(data.horizon - 1, -1, -1):
        nxt = prep.rho[:, t + 1] if t + 1 < data.horizon else np.zeros(data.n)
        acc = data.rewards[:, t] + gamma * nxt * acc
        out[:, t] = acc
    return out


def _scaled_gradient(data: Dataset, prep: _Prepared, logging: Policy, features) -> np.ndarray:
    """``γ^t f_t`` for every (i, t): shape (n, T, K, p + q).

    The ``γ^{-t}`` of the ``c`` columns cancels against the ``γ^t`` scaling,
    which keeps γ = 0 well defined.
    """
    psi = design_tensor(features, data)
    left = (prep.disc[None, :, None] * prep.rho_prev[..., None] * prep.pi)[..., None] * psi
    right = logging.score(data.features)
    return np.concatenate([left, right], axis=-1)


def build_estimating_equation(data: Dataset, target: Policy, logging: Policy, features) -> EstimatingEquation:
    """Assemble ``A = Σ γ^{2t} f_tᵀ M_t f_t`` and ``b = Σ γ^{2t} f_tᵀ M_t ρ̂_{0:t-1} diag(π) r⃗_{t:T-1}``."""
    prep = _prepare(data, target, logging)
    return _build(data, prep, logging, features)


def _build(data, prep, logging, features):
    G = _scaled_gradient(data, prep, logging, features)
    D = G.shape[-1]
    p = D - logging.n_params
    # the scaled target vector is nonzero only at the taken action: γ^t ρ̂_{0:t} R̄_t
    y_a = prep.disc * prep.rho_prev * prep.rho * pseudo_returns(data, prep)
    inv_mu = 1.0 / prep.mu
    Gw = (G * np.sqrt(inv_mu)[..., None]).reshape(-1, D)
    S = G.sum(axis=2).reshape(-1, D)
    A = Gw.T @ Gw - S.T @ S
    G_a = np.take_along_axis(G, data.actions[..., None, None], axis=2)[:, :, 0, :]
    b = np.einsum("ntd,nt->d", G_a, y_a / prep.mu_a) - np.einsum("ntd,nt->d", G.sum(axis=2), y_a)
    const = float(np.sum(y_a ** 2 / prep.mu_a - y_a ** 2))
    A = 0.5 * (A + A.T)
    return EstimatingEquation(A, b, const, p, logging.n_params)


def solve_linear_system(eq: EstimatingEquation) -> SolvedParameters:
    """Ridge-stabilized solve of ``Aθ = b`` with minimal-norm fallback for ill-conditioned systems."""
    A, b = eq.A, eq.b
    D = A.shape[0]
    if D == 0:
        raise SingularSystem("empty parameter vector")
    cond = float(np.linalg.cond(A)) if np.all(np.isfinite(A)) else np.inf
    pinv = False
    theta = None
    if cond <= MAX_CONDITION:
        lam = RIDGE * abs(np.trace(A)) / D
        reg = A + lam * np.eye(D)
        try:
            theta = np.linalg.solve(reg, b)
            for _ in range(2):
                theta = theta + np.linalg.solve(reg, b - A @ theta)
        except np.linalg.LinAlgError:
            theta = None
    if theta is None or not np.all(np.isfinite(theta)):
        pinv = True
        try:
            theta = np.linalg.lstsq(A, b, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"minimal-norm solve failed: {exc}") from exc
        if not np.all(np.isfinite(theta)):
            raise SingularSystem("minimal-norm solve produced non-finite parameters")
    resid = eq.residual(theta)
    scale = float(np.max(np.abs(b), initial=0.0) + np.max(np.abs(A), initial=0.0) * np.max(np.abs(theta), initial=0.0))
    return SolvedParameters(
        beta_hat=theta[:eq.p].copy(),
        c_hat=theta[eq.p:].copy(),
        objective_value=eq.objective(theta),
        residual_norm=float(np.max(np.abs(resid), initial=0.0)),
        residual_scale=max(scale, 1.0),
        condition_number=cond,
        pseudo_inverse=pinv,
    )


def solve_estimating_equation(data: Dataset, target: Policy, logging: Policy, features,
                              constrain_c_to_zero: bool = False, path: str = "sequential") -> SolvedParameters:
    """Solve ``S_n(β, c) = 0`` for a fitted logging policy.

    ``path="sequential"`` is the general multi-step assembly (bandits are the
    ``T = 1`` case); ``path="bandit"`` is a separate one-step implementation
    built from explicit ``K x K`` matrices, kept as a cross-check.
    """
    if path == "bandit":
        eq = _build_bandit(data, target, logging, features)
    elif path == "sequential":
        eq = build_estimating_equation(data, target, logging, features)
    else:
        raise ValueError(f"unknown path {path!r}")
    if constrain_c_to_zero:
        solved = solve_linear_system(eq.restricted())
        return SolvedParameters(solved.beta_hat, np.zeros(eq.q), solved.objective_value, solved.residual_norm,
                                solved.residual_scale, solved.condition_number, solved.pseudo_inverse)
    return solve_linear_system(eq)


def _build_bandit(data, target, logging, features):
    if data.horizon != 1:
        raise UnsupportedHorizon("the bandit path needs horizon T = 1")
    X = data.features[:, 0]
    a = data.actions[:, 0]
    r = data.rewards[:, 0]
    prep = _prepare(data, target, logging)
    mu = prep.mu[:, 0]
    reg = ExtendedRegression(features, target, logging)
    f = reg.f_matrix(0, X)
    K = mu.shape[-1]
    M = np.einsum("nk,kl->nkl", 1.0 / mu, np.eye(K)) - 1.0
    pseudo = np.zeros_like(mu)
    pseudo[np.arange(data.n), a] = r / mu[np.arange(data.n), a]
    y = prep.pi[:, 0] * pseudo
    A = np.einsum("nkd,nkl,nle->de", f, M, f)
    b = np.einsum("nkd,nkl,nl->d", f, M, y)
    const = float(np.einsum("nk,nkl,nl->", y, M, y))
    q = logging.n_params
    return EstimatingEquation(0.5 * (A + A.T), b, const, f.shape[-1] - q, q)


def influence_values(data: Dataset, target: Policy, logging: Policy, features, beta, c) -> InfluenceValues:
    """Per-trajectory ``η = Σ_t γ^t {[ρ̂_{0:t-1} π_t r_t - F_t(a_t)]/μ̂_t + Σ_a F_t(a)}``."""
    prep = _prepare(data, target, logging)
    return InfluenceValues(_influence(data, prep, logging, features, beta, c))


def _influence(data, prep, logging, features, beta, c):
    G = _scaled_gradient(data, prep, logging, features)
    theta = np.concatenate([np.asarray(beta, dtype=float), np.asarray(c, dtype=float)])
    F = G @ theta  # γ^t F_t(x_t, a) for every action
    F_a = taken(F, data.actions)
    first = prep.disc * prep.rho_prev * prep.rho * data.rewards - F_a / prep.mu_a
    return np.sum(first + F.sum(axis=-1), axis=1)


def _variance_optimal(name, data, target, logging_family, features, alpha, constrain, fit):
    fit = fit_mle(logging_family, data) if fit is None else fit
    policy = fit.policy
    prep = _prepare(data, target, policy)
    eq = _build(data, prep, policy, features)
    solved = solve_linear_system(eq.restricted() if constrain else eq)
    beta = solved.beta_hat
    c = np.zeros(policy.n_params) if constrain else solved.c_hat
    q = design_tensor(features, data) @ beta
    value = float(np.mean(_dr_terms(data, prep, q)))
    eta = _influence(data, prep, policy, features, beta, c)
    diagnostics = {
        "phi_hat": fit.phi_hat.tolist(),
        "mle_iterations": fit.iterations,
        "beta_hat": beta.tolist(),
        "c_hat": c.tolist(),
        "objective_value": solved.objective_value,
        "residual_norm": solved.residual_norm,
        "residual_scale": solved.residual_scale,
        "condition_number": solved.condition_number,
        "pseudo_inverse": solved.pseudo_inverse,
        "clipped_propensities": prep.clipped,
    }
    return _report(name, value, eta, alpha, diagnostics)


def drunknown_estimate(data: Dataset, target: Policy, logging_family: Policy, features,
                       alpha: float = 0.05, fit: FitResult | None = None) -> EstimateReport:
    """Doubly-robust estimate with an estimated logging policy and variance-optimal ``(β, c)``.

    The standard error and interval use the influence values including the
    ``c`` correction for the logging-policy estimation.
    """
    return _variance_optimal("drunknown", data, target, logging_family, features, alpha, False, fit)


def mrdr_estimate(data: Dataset, target: Policy, logging_family: Policy, features,
                  alpha: float = 0.05, fit: FitResult | None = None) -> EstimateReport:
    """Variance-minimizing DR with ``c`` fixed at zero (no correction for the fitted propensities)."""
    return _variance_optimal("mrdr", data, target, logging_family, features, alpha, True, fit)
