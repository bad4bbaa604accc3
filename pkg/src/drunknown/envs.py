"""Data-generating environments and exact value oracles.

* synthetic contextual bandit with Gaussian rewards around ``exp(x_aᵀβ)``
* classification table -> bandit (reward 1 for the correct class)
* ModelWin / ModelFail tabular MDPs, rollouts and backward induction
* the canonical delimited dataset file (one row per trajectory step)
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, encode_tabular
from .errors import SchemaError
from .policies import MixturePolicy, Policy, SoftmaxLinearPolicy, TabularPolicy, fit_mle, quadratic_expand

# --------------------------------------------------------------------------
# synthetic contextual bandit


@dataclass(frozen=True)
class SyntheticCBConfig:
    """Synthetic bandit description.

    ``coef_seed`` fixes the reward/policy coefficients (shared by all
    replicates); ``seed`` drives the sampled contexts, actions and rewards.
    ``reward_link="linear"`` makes the mean reward ``x_aᵀβ`` (a linear value
    model is then correct); ``logging_link="quadratic"`` logs with a softmax
    over ``[x, x²]`` so that a linear-softmax logging model is misspecified.
    """

    n: int = 1000
    n_actions: int = 10
    dim: int = 5
    seed: int = 0
    coef_seed: int = 0
    reward_link: str = "exp"
    logging_link: str = "linear"
    quadratic_scale: float = 3.0
    oracle_samples: int = 1_000_000
    oracle_seed: int = 987_654_321

    def __post_init__(self):
        if self.n < 1 or self.n_actions < 1 or self.dim < 1:
            raise ValueError("n, n_actions and dim must be positive")
        if self.reward_link not in ("exp", "linear"):
            raise ValueError(f"unknown reward_link {self.reward_link!r}")
        if self.logging_link not in ("linear", "quadratic"):
            raise ValueError(f"unknown logging_link {self.logging_link!r}")


class SyntheticCB:
    """Environment object behind :func:`gen_synthetic_cb`."""

    def __init__(self, cfg: SyntheticCBConfig):
        self.cfg = cfg
        d = cfg.dim
        rng = np.random.default_rng(cfg.coef_seed)
        half = 1.0 / np.sqrt(d)
        self.beta = rng.uniform(-half, half, d)
        self.phi_mu = rng.uniform(-half, half, d)
        self.phi_pi = rng.uniform(-2 * half, 2 * half, d)
        self.target = SoftmaxLinearPolicy(self.phi_pi)
        if cfg.logging_link == "linear":
            self.logging = SoftmaxLinearPolicy(self.phi_mu)
        else:
            quad = rng.uniform(0.5, 1.0, d) * cfg.quadratic_scale * np.sqrt(d)
            self.logging = SoftmaxLinearPolicy(np.concatenate([self.phi_mu, quad]), transform=quadratic_expand)
        self._true_value = None

    def mean_reward(self, X):
        lin = np.asarray(X) @ self.beta
        return np.exp(lin) if self.cfg.reward_link == "exp" else lin

    def contexts(self, n, rng):
        half = 1.0 / np.sqrt(self.cfg.dim)
        return rng.uniform(-half, half, (n, self.cfg.n_actions, self.cfg.dim))

    def sample(self, n: int, seed: int) -> Dataset:
        rng = np.random.default_rng(seed)
        X = self.contexts(n, rng)
        mu = self.logging.probs(X)
        actions = _sample_categorical(mu, rng)
        mean = self.mean_reward(X)[np.arange(n), actions]
        rewards = mean + rng.standard_normal(n)
        props = mu[np.arange(n), actions]
        return Dataset(X[:, None], actions[:, None], rewards[:, None], 1.0, props[:, None])

    def true_value(self, samples: int | None = None, seed: int | None = None, chunk: int = 200_000) -> float:
        """Monte-Carlo ``E_x[Σ_a π(a|x) E[r|x,a]]`` over fresh contexts (exact inner sum)."""
        default = samples is None and seed is None
        if default and self._true_value is not None:
            return self._true_value
        samples = self.cfg.oracle_samples if samples is None else samples
        rng = np.random.default_rng(self.cfg.oracle_seed if seed is None else seed)
        total, done = 0.0, 0
        while done < samples:
            m = min(chunk, samples - done)
            X = self.contexts(m, rng)
            total += float(np.sum(self.target.probs(X) * self.mean_reward(X)))
            done += m
        value = total / samples
        if default:
            self._true_value = value
        return value


def _sample_categorical(probs, rng):
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def gen_synthetic_cb(cfg: SyntheticCBConfig):
    """Return ``(dataset, true_value)`` for the configuration (pure function of ``cfg``)."""
    env = SyntheticCB(cfg)
    return env.sample(cfg.n, cfg.seed), env.true_value()


# --------------------------------------------------------------------------
# classification -> bandit


@dataclass(frozen=True)
class LabeledTable:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    columns: tuple = field(default=(), compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] == 0:
            raise SchemaError("features must be a non-empty 2-d table")
        if y.shape != (x.shape[0],):
            raise SchemaError("one label per row is required")
        if not np.all(y == np.round(y)) or np.any(y < 0) or np.any(y >= self.n_classes):
            raise SchemaError(f"labels must be integers in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]

    def standardized(self) -> "LabeledTable":
        sd = self.features.std(axis=0)
        x = (self.features - self.features.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        return LabeledTable(x, self.labels, self.n_classes, self.columns)

    def split(self, fraction: float, seed: int):
        perm = np.random.default_rng(seed).permutation(len(self))
        k = int(round(fraction * len(self)))
        a, b = perm[:k], perm[k:]
        return (LabeledTable(self.features[a], self.labels[a], self.n_classes, self.columns),
                LabeledTable(self.features[b], self.labels[b], self.n_classes, self.columns))


def load_labeled_table(path, n_classes: Optional[int] = None, standardize: bool = True) -> LabeledTable:
    """Read delimiter-separated numeric features with a final integer label column.

    The delimiter is detected among comma, tab and semicolon; a non-numeric
    first row is treated as a header.  Features are standardized to zero mean
    and unit variance unless ``standardize`` is False.
    """
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty file")
    try:
        delim = csv.Sniffer().sniff(lines[0] if len(lines) == 1 else "\n".join(lines[:5]), delimiters=",\t;").delimiter
    except csv.Error:
        delim = ","
    rows = list(csv.reader(io.StringIO("\n".join(lines)), delimiter=delim))
    header = ()
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = tuple(rows[0]), rows[1:]
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise SchemaError(f"{path}: need at least one feature column and a label column")
    for k, row in enumerate(rows):
        if len(row) != width:
            raise SchemaError(f"{path}: row {k + 1} has {len(row)} fields, expected {width}")
    try:
        values = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric field ({exc})") from exc
    labels = values[:, -1]
    if not np.all(labels == np.round(labels)) or np.any(labels < 0):
        raise SchemaError(f"{path}: labels must be non-negative integers")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    table = LabeledTable(values[:, :-1], labels.astype(np.int64), k, header)
    return table.standardized() if standardize else table


def synthetic_classification_table(n_rows: int = 600, n_features: int = 4, n_classes: int = 3,
                                   separation: float = 1.5, seed: int = 0) -> LabeledTable:
    """Gaussian-cluster classification table (hermetic stand-in for real files)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, (n_classes, n_features))
    labels = rng.integers(0, n_classes, n_rows)
    feats = centers[labels] + rng.standard_normal((n_rows, n_features))
    return LabeledTable(feats, labels, n_classes)


def bandit_contexts(features: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-action features ``onehot(a) ⊗ x``: shape ``(m, K, K·d)``."""
    x = np.asarray(features, dtype=float)
    m, d = x.shape
    out = np.zeros((m, n_classes, n_classes * d))
    for a in range(n_classes):
        out[:, a, a * d:(a + 1) * d] = x
    return out


def train_base_policy(table: LabeledTable, l2: float = 1.0) -> SoftmaxLinearPolicy:
    """Multinomial logistic classifier fitted on ``table`` (ridge-penalized MLE)."""
    X = bandit_contexts(table.features, table.n_classes)
    data = Dataset(X[:, None], table.labels[:, None], np.zeros((len(table), 1)))
    family = SoftmaxLinearPolicy(np.zeros(X.shape[-1]))
    return fit_mle(family, data, l2=l2).policy


def random_target_policy(table_dim: int, n_classes: int, seed: int) -> SoftmaxLinearPolicy:
    rng = np.random.default_rng(seed)
    half = 2.0 / np.sqrt(table_dim)
    return SoftmaxLinearPolicy(rng.uniform(-half, half, n_classes * table_dim))


def classification_to_bandit(table: LabeledTable, base: Policy, alpha: float, target: Policy,
                             n: int, seed: int) -> Dataset:
    """Sample ``n`` rows with replacement and log actions from ``α·μ₀ + (1-α)·uniform``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, len(table), n)
    X = bandit_contexts(table.features[rows], table.n_classes)
    logging = MixturePolicy(alpha, base)
    mu = logging.probs(X)
    actions = _sample_categorical(mu, rng)
    rewards = (actions == table.labels[rows]).astype(float)
    return Dataset(X[:, None], actions[:, None], rewards[:, None], 1.0, mu[np.arange(n), actions][:, None])


def classification_true_value(table: LabeledTable, target: Policy) -> float:
    """Exact ``V^π`` when contexts are drawn uniformly from the table rows."""
    X = bandit_contexts(table.features, table.n_classes)
    p = target.probs(X)
    return float(np.mean(p[np.arange(len(table)), table.labels]))


# --------------------------------------------------------------------------
# tabular MDPs


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with rewards ``R(s, a, s')`` and an observation map ``state -> obs``.

    ``decision_obs`` lists the observations where the preset policies act;
    elsewhere the action has no consequence and they choose uniformly.
    ``None`` means every observation is a decision point.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial_state: int
    horizon: int
    discount: float = 1.0
    observations: Optional[np.ndarray] = None
    name: str = "mdp"
    decision_obs: Optional[tuple] = None

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        R = np.asarray(self.rewards, dtype=float)
        S, K, S2 = P.shape
        if S != S2 or R.shape != P.shape:
            raise ValueError("transitions and rewards must have shape (S, K, S)")
        if np.any(P < 0) or not np.allclose(P.sum(axis=-1), 1.0, atol=1e-12):
            raise ValueError("each transition row must be a probability distribution")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        obs = np.arange(S) if self.observations is None else np.asarray(self.observations, dtype=np.int64)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "observations", obs)

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @property
    def n_actions(self):
        return self.transitions.shape[1]

    @property
    def n_obs(self):
        return int(self.observations.max()) + 1

    def is_decision(self, obs: int) -> bool:
        return self.decision_obs is None or obs in self.decision_obs

    def state_features(self) -> np.ndarray:
        """Learner-visible per-action features of every state: ``(S, K, n_obs·K)``."""
        return encode_tabular(self.observations, self.n_obs, self.n_actions)

    def policy_table(self, policy: Policy) -> np.ndarray:
        """Action probabilities of ``policy`` in every state: ``(S, K)``."""
        return policy.probs(self.state_features())


def modelwin(horizon: int = 20) -> TabularMDP:
    """Three states; from s1, a1 reaches s2 (+1) w.p. 0.6 and s3 (-1) w.p. 0.4, a2 the reverse."""
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0.0, 0.6, 0.4]
    P[0, 1] = [0.0, 0.4, 0.6]
    P[1, :, 0] = 1.0
    P[2, :, 0] = 1.0
    R = np.zeros_like(P)
    R[0, :, 1] = 1.0
    R[0, :, 2] = -1.0
    return TabularMDP(P, R, 0, horizon, 1.0, None, "modelwin")


def modelfail(policy_scope: str = "first") -> TabularMDP:
    """Four states, two steps; a1 takes the upper path (+1 on leaving it), a2 the lower (-1).

    The start state has its own observation.  The upper and lower states (and
    the terminal) share a second one, so the learner cannot tell which path
    it took.  Only the first action matters, so by default policies act only
    there.  ``policy_scope="every"`` instead hides the start state too (one
    observation everywhere), so the same action probabilities apply at both
    steps.
    """
    P = np.zeros((4, 2, 4))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1:, :, 3] = 1.0
    R = np.zeros_like(P)
    R[1, :, 3] = 1.0
    R[2, :, 3] = -1.0
    if policy_scope == "first":
        return TabularMDP(P, R, 0, 2, 1.0, np.array([0, 1, 1, 1]), "modelfail", decision_obs=(0,))
    if policy_scope == "every":
        return TabularMDP(P, R, 0, 2, 1.0, np.zeros(4, dtype=np.int64), "modelfail")
    raise ValueError(f"policy_scope must be 'first' or 'every', got {policy_scope!r}")


def constant_logistic_policy(mdp: TabularMDP, first_action_prob: float) -> SoftmaxLinearPolicy:
    """Linear-logistic policy choosing action 0 with ``first_action_prob`` at every decision observation (K = 2)."""
    if mdp.n_actions != 2:
        raise ValueError("constant_logistic_policy assumes two actions")
    phi = np.zeros((mdp.n_obs, 2))
    for obs in range(mdp.n_obs):
        if mdp.is_decision(obs):
            phi[obs, 0] = np.log(first_action_prob / (1.0 - first_action_prob))
    return SoftmaxLinearPolicy(phi.ravel())


def optimal_policy(mdp: TabularMDP) -> TabularPolicy:
    """Deterministic DP-optimal first-step policy per observation (ties -> lowest action).

    Non-decision observations get the uniform distribution.
    """
    P, R = mdp.transitions, mdp.rewards
    V = np.zeros(mdp.n_states)
    Q = None
    for _ in range(mdp.horizon):
        Q = np.einsum("skz,skz->sk", P, R + mdp.discount * V[None, None, :])
        V = Q.max(axis=1)
    best = np.argmax(Q, axis=1)
    table = np.zeros((mdp.n_obs, mdp.n_actions))
    for obs in range(mdp.n_obs):
        if not mdp.is_decision(obs):
            table[obs] = 1.0 / mdp.n_actions
            continue
        s = int(np.flatnonzero(mdp.observations == obs)[0])
        table[obs, best[s]] = 1.0
    return TabularPolicy(table)


def default_logging_policy(mdp: TabularMDP, alpha: float = 0.5) -> MixturePolicy:
    """Optimal policy mixed with uniform at rate ``alpha`` (0.5 gives 0.75 / 0.25)."""
    return MixturePolicy(alpha, optimal_policy(mdp))


def rollout(mdp: TabularMDP, logging: Policy, n: int, seed: int, horizon: Optional[int] = None) -> Dataset:
    """``n`` trajectories under ``logging`` with logged propensities and hidden state ids."""
    T = mdp.horizon if horizon is None else horizon
    rng = np.random.default_rng(seed)
    feats = mdp.state_features()
    table = mdp.policy_table(logging)
    cdf_next = np.cumsum(mdp.transitions, axis=-1)
    states = np.full(n, mdp.initial_state, dtype=np.int64)
    S_hist = np.zeros((n, T), dtype=np.int64)
    A = np.zeros((n, T), dtype=np.int64)
    Rw = np.zeros((n, T))
    Pr = np.zeros((n, T))
    for t in range(T):
        S_hist[:, t] = states
        probs = table[states]
        a = _sample_categorical(probs, rng)
        u = rng.random(n)
        nxt = (u[:, None] > cdf_next[states, a]).sum(axis=-1)
        nxt = np.minimum(nxt, mdp.n_states - 1)
        A[:, t] = a
        Pr[:, t] = probs[np.arange(n), a]
        Rw[:, t] = mdp.rewards[states, a, nxt]
        states = nxt
    return Dataset(feats[S_hist], A, Rw, mdp.discount, Pr, S_hist)


def true_value_dp(mdp: TabularMDP, target: Policy, horizon: Optional[int] = None,
                  gamma: Optional[float] = None) -> float:
    """Exact ``Σ_t γ^t E_π[r_t]`` by backward induction."""
    T = mdp.horizon if horizon is None else horizon
    g = mdp.discount if gamma is None else gamma
    pi = mdp.policy_table(target)
    expected_r = np.einsum("skz,skz->sk", mdp.transitions, mdp.rewards)
    V = np.zeros(mdp.n_states)
    for _ in range(T):
        Q = expected_r + g * mdp.transitions @ V
        V = np.sum(pi * Q, axis=1)
    return float(V[mdp.initial_state])


# --------------------------------------------------------------------------
# canonical dataset file


def write_dataset(data: Dataset, path) -> None:
    """One row per (trajectory, step): id, t, action, reward, propensity, then K·d features.

    A leading ``#`` line records horizon, action count, feature dimension and
    discount; feature column ``f{a}_{j}`` is coordinate ``j`` of action ``a``.
    """
    K, d = data.action_count, data.dim
    cols = ["trajectory_id", "t", "action", "reward", "logged_propensity"]
    cols += [f"f{a}_{j}" for a in range(K) for j in range(d)]
    with open(path, "w", newline="") as fh:
        fh.write(f"# horizon={data.horizon} actions={K} dim={d} discount={data.discount!r}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(data.n):
            for t in range(data.horizon):
                prop = "" if data.propensities is None else repr(float(data.propensities[i, t]))
                w.writerow([i, t, int(data.actions[i, t]), repr(float(data.rewards[i, t])), prop]
                           + [repr(float(v)) for v in data.features[i, t].ravel()])


def read_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("#"):
            raise SchemaError(f"{path}: missing '# horizon=... actions=... dim=... discount=...' line")
        meta = dict(item.split("=", 1) for item in meta_line[1:].split())
        try:
            T, K, d = int(meta["horizon"]), int(meta["actions"]), int(meta["dim"])
            gamma = float(meta["discount"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{path}: bad metadata line ({exc})") from exc
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 5 + K * d:
            raise SchemaError(f"{path}: header has {len(header)} columns, expected {5 + K * d}")
        rows = list(reader)
    if not rows or len(rows) % T:
        raise SchemaError(f"{path}: row count {len(rows)} is not a multiple of the horizon {T}")
    n = len(rows) // T
    feats = np.zeros((n, T, K, d))
    acts = np.zeros((n, T), dtype=np.int64)
    rews = np.zeros((n, T))
    props = np.zeros((n, T))
    have_props = True
    index = {}
    for row in rows:
        if len(row) != len(header):
            raise SchemaError(f"{path}: ragged row")
        tid, t = int(row[0]), int(row[1])
        i = index.setdefault(tid, len(index))
        if i >= n or not 0 <= t < T:
            raise SchemaError(f"{path}: bad trajectory/step index ({tid}, {t})")
        acts[i, t] = int(row[2])
        rews[i, t] = float(row[3])
        if row[4] == "":
            have_props = False
        else:
            props[i, t] = float(row[4])
        feats[i, t] = np.array([float(v) for v in row[5:]]).reshape(K, d)
    return Dataset(feats, acts, rews, gamma, props if have_props else None)
