"""Logged trajectory data, importance ratios, returns and assumption checks.

A :class:`Dataset` stores ``n`` trajectories of fixed length ``T`` as dense
arrays so that every estimator can work vectorized:

* ``features``      shape ``(n, T, K, d)``: one feature vector per action
* ``actions``       shape ``(n, T)``
* ``rewards``       shape ``(n, T)``
* ``propensities``  shape ``(n, T)`` or ``None`` (true logging probability
  of the taken action, only present when the logging policy is known)

The record-level types (:class:`Context`, :class:`StepRecord`,
:class:`Trajectory`) are convenience views used for construction and for the
per-trajectory helpers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AbsoluteContinuityViolation, SchemaError

PROPENSITY_FLOOR = 1e-6
PROB_SUM_TOL = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ActionDistribution:
    """A probability vector over the ``K`` actions."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty 1-d vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > max(PROB_SUM_TOL, 4 * p.size * np.finfo(float).eps):
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen(p))

    def __len__(self):
        return self.probs.size

    def __getitem__(self, a):
        return self.probs[a]


@dataclass(frozen=True)
class Context:
    per_action_features: np.ndarray
    state: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.per_action_features, dtype=float)
        if x.ndim != 2:
            raise ValueError("per_action_features must have shape (K, d)")
        if not np.all(np.isfinite(x)):
            raise ValueError("context features must be finite")
        object.__setattr__(self, "per_action_features", _frozen(x))

    @property
    def n_actions(self) -> int:
        return self.per_action_features.shape[0]


@dataclass(frozen=True)
class StepRecord:
    context: Context
    action: int
    reward: float
    logged_propensity: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.action < self.context.n_actions:
            raise ValueError(f"action {self.action} outside [0, {self.context.n_actions})")
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        p = self.logged_propensity
        if p is not None and not 0.0 < p <= 1.0:
            raise ValueError(f"logged propensity {p} not in (0, 1]")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a trajectory needs at least one step")

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=float)


@dataclass(frozen=True)
class Dataset:
    """``n`` logged trajectories of common length ``T`` (array storage)."""

    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discount: float = 1.0
    propensities: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        a = np.asarray(self.actions)
        r = np.asarray(self.rewards, dtype=float)
        if x.ndim != 4:
            raise ValueError("features must have shape (n, T, K, d)")
        n, T, K, _ = x.shape
        if n < 1:
            raise ValueError("a dataset needs at least one trajectory")
        if a.shape != (n, T) or r.shape != (n, T):
            raise ValueError("actions and rewards must have shape (n, T)")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise ValueError("actions must be integers")
        a = a.astype(np.int64)
        if np.any(a < 0) or np.any(a >= K):
            raise ValueError(f"actions must lie in [0, {K})")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise ValueError("features and rewards must be finite")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "rewards", _frozen(r))
        object.__setattr__(self, "discount", float(self.discount))
        if self.propensities is not None:
            p = np.asarray(self.propensities, dtype=float)
            if p.shape != (n, T):
                raise ValueError("propensities must have shape (n, T)")
            if np.any(~(p > 0)) or np.any(p > 1):
                raise ValueError("logged propensities must lie in (0, 1]")
            object.__setattr__(self, "propensities", _frozen(p))
        if self.states is not None:
            s = np.asarray(self.states, dtype=np.int64)
            if s.shape != (n, T):
                raise ValueError("states must have shape (n, T)")
            object.__setattr__(self, "states", _frozen(s))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def horizon(self) -> int:
        return self.features.shape[1]

    @property
    def action_count(self) -> int:
        return self.features.shape[2]

    @property
    def dim(self) -> int:
        return self.features.shape[3]

    def __len__(self):
        return self.n

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], discount: float = 1.0) -> "Dataset":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        T = len(trajectories[0])
        if any(len(tr) != T for tr in trajectories):
            raise ValueError("all trajectories must share the same length")
        shape0 = trajectories[0].steps[0].context.per_action_features.shape
        feats, acts, rews, props, states = [], [], [], [], []
        for tr in trajectories:
            for s in tr.steps:
                if s.context.per_action_features.shape != shape0:
                    raise ValueError("all contexts must share the same (K, d) shape")
            feats.append([s.context.per_action_features for s in tr.steps])
            acts.append([s.action for s in tr.steps])
            rews.append([s.reward for s in tr.steps])
            props.append([s.logged_propensity for s in tr.steps])
            states.append([s.context.state for s in tr.steps])
        flat_props = [p for row in props for p in row]
        if all(p is None for p in flat_props):
            prop_arr = None
        elif any(p is None for p in flat_props):
            raise ValueError("logged propensities must be present for all steps or none")
        else:
            prop_arr = np.array(props, dtype=float)
        flat_states = [s for row in states for s in row]
        state_arr = None if any(s is None for s in flat_states) else np.array(states)
        return cls(np.array(feats), np.array(acts), np.array(rews), discount, prop_arr, state_arr)

    def trajectory(self, i: int) -> Trajectory:
        steps = []
        for t in range(self.horizon):
            state = None if self.states is None else int(self.states[i, t])
            prop = None if self.propensities is None else float(self.propensities[i, t])
            steps.append(
                StepRecord(Context(self.features[i, t], state), int(self.actions[i, t]), float(self.rewards[i, t]), prop)
            )
        return Trajectory(tuple(steps))

    def trajectories(self):
        return [self.trajectory(i) for i in range(self.n)]

    def take(self, index) -> "Dataset":
        """Sub-dataset (or permutation) of trajectories selected by ``index``."""
        index = np.asarray(index)
        return Dataset(
            self.features[index],
            self.actions[index],
            self.rewards[index],
            self.discount,
            None if self.propensities is None else self.propensities[index],
            None if self.states is None else self.states[index],
        )

    def without_propensities(self) -> "Dataset":
        return Dataset(self.features, self.actions, self.rewards, self.discount, None, self.states)

    def with_rewards(self, rewards) -> "Dataset":
        return Dataset(self.features, self.actions, rewards, self.discount, self.propensities, self.states)


def taken(values: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Select ``values[..., a]`` for the taken action of each (trajectory, step)."""
    return np.take_along_axis(values, actions[..., None], axis=-1)[..., 0]


def encode_tabular(obs, n_obs: int, n_actions: int) -> np.ndarray:
    """Per-action features ``onehot(obs) ⊗ onehot(a)`` for discrete observations.

    Returns an array of shape ``obs.shape + (n_actions, n_obs * n_actions)``.
    """
    obs = np.asarray(obs, dtype=np.int64)
    out = np.zeros(obs.shape + (n_actions, n_obs * n_actions))
    for a in range(n_actions):
        np.put_along_axis(out[..., a, :], (obs * n_actions + a)[..., None], 1.0, axis=-1)
    return out


def decode_tabular(features: np.ndarray, n_obs: int) -> np.ndarray:
    """Inverse of :func:`encode_tabular`: recover observation ids."""
    features = np.asarray(features)
    n_actions = features.shape[-2]
    block = features[..., 0, :].reshape(features.shape[:-2] + (n_obs, n_actions))
    return np.argmax(block[..., 0], axis=-1)


def step_ratios(data: Dataset, target, logging, floor: float = PROPENSITY_FLOOR) -> np.ndarray:
    """Per-step importance ratios ``π(a_t|x_t) / μ(a_t|x_t)``, shape ``(n, T)``.

    Raises
    ------
    AbsoluteContinuityViolation
        If a taken action has positive target probability but a logging
        probability at or below ``floor``.
    """
    pi = taken(target.probs(data.features), data.actions)
    mu = taken(logging.probs(data.features), data.actions)
    bad = (mu <= floor) & (pi > 0)
    if np.any(bad):
        i, t = np.argwhere(bad)[0]
        raise AbsoluteContinuityViolation(
            f"logging probability {mu[i, t]:.3g} <= floor {floor:g} for taken action "
            f"{data.actions[i, t]} (trajectory {i}, step {t}) with target probability {pi[i, t]:.3g}"
        )
    return np.where(pi > 0, pi / np.maximum(mu, floor), 0.0)


def prefix_ratios(step: np.ndarray) -> np.ndarray:
    """``ρ_{0:t-1}`` for every t (exclusive cumulative product along the last axis)."""
    out = np.ones_like(step)
    if step.shape[-1] > 1:
        out[..., 1:] = np.cumprod(step[..., :-1], axis=-1)
    return out


def cumulative_importance_ratio(traj: Trajectory, target, logging, t1: int, t2: int,
                                floor: float = PROPENSITY_FLOOR) -> float:
    """``ρ_{t1:t2} = Π_{t=t1}^{t2} π(a_t|x_t)/μ(a_t|x_t)``; exactly 1 when ``t1 > t2``."""
    T = len(traj)
    if t1 > t2:
        return 1.0
    if not (0 <= t1 < T and 0 <= t2 < T):
        raise IndexError(f"step range ({t1}, {t2}) outside [0, {T})")
    ratio = 1.0
    for t in range(t1, t2 + 1):
        step = traj.steps[t]
        x = step.context.per_action_features
        pi = float(target.probs(x)[step.action])
        mu = float(logging.probs(x)[step.action])
        if pi > 0 and mu <= floor:
            raise AbsoluteContinuityViolation(
                f"logging probability {mu:.3g} <= floor at step {t} (target probability {pi:.3g})"
            )
        if pi == 0:
            return 0.0
        ratio *= pi / mu
    return ratio


def discounted_return(traj, t1: int, t2: int, gamma: float) -> float:
    """``R_{t1:t2} = Σ_{t=t1}^{t2} γ^{t-t1} r_t``."""
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    T = len(rewards)
    if not (0 <= t1 <= t2 < T):
        raise IndexError(f"step range ({t1}, {t2}) invalid for horizon {T}")
    seg = rewards[t1:t2 + 1]
    return float(np.dot(np.power(float(gamma), np.arange(seg.size)), seg))


def discount_weights(gamma: float, horizon: int) -> np.ndarray:
    """``γ^t`` for t = 0..T-1 with the convention ``0^0 = 1``."""
    return np.power(float(gamma), np.arange(horizon, dtype=float))


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``R_{t:T-1}`` for every t, shape ``(n, T)``."""
    out = np.zeros_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        out[:, t] = acc
    return out


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple
    ratio_second_moments: np.ndarray
    floor: float = PROPENSITY_FLOOR

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(data: Dataset, target, logging, floor: float = PROPENSITY_FLOOR) -> ValidationReport:
    """Report absolute-continuity violations and empirical ``E[ρ_{0:t}^2]`` per step.

    Every action of every visited context is checked, not only the taken one.
    Violations are ``(trajectory, step, action)`` triples.  Never raises.
    """
    pi = target.probs(data.features)
    mu = logging.probs(data.features)
    bad = (pi > 0) & (mu <= floor)
    violations = tuple(tuple(int(v) for v in idx) for idx in np.argwhere(bad))
    pi_a = taken(pi, data.actions)
    mu_a = taken(mu, data.actions)
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(pi_a > 0, pi_a / np.maximum(mu_a, floor), 0.0)
    cum = np.cumprod(step, axis=1)
    return ValidationReport(violations, np.mean(cum ** 2, axis=0), floor)
