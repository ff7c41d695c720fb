"""Finite MDPs and exact (regularized) Bellman machinery.

Shapes used throughout:

* transition ``P[s, a, s']``
* reward ``r[s, a]``
* policy ``pi[s, a]`` (rows on the simplex)
* Q-functions ``q[s, a]`` and V-functions ``v[s]``

Everything is a plain float64 ``numpy`` array; ``TabularMdp`` freezes its
arrays so that an MDP can be shared between threads and runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from implicitq._numerics import NumericDomainError, logsumexp, softmax

STOCHASTIC_ATOL = 1e-12
FIXED_POINT_TOL = 1e-12
MAX_ITERS = 100_000


class ParameterError(ValueError):
    """Invalid argument shape or value."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = field(default=None)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ParameterError(f"transition must be (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ParameterError(f"reward shape {r.shape} does not match transition {P.shape}")
        if np.any(P < 0) or not np.allclose(P.sum(-1), 1.0, rtol=0, atol=STOCHASTIC_ATOL):
            raise ParameterError("transition rows must be probability vectors")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if np.any(np.abs(r) > r_max):
            raise ParameterError("reward exceeds r_max")
        if r_max <= 0:
            r_max = 1.0
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def expected_next(self, v):
        """(P v)(s, a) = sum_s' P(s'|s,a) v(s')."""
        return self.transition @ v

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        mdp = cls(np.asarray(doc["transition"]), np.asarray(doc["reward"]),
                  doc["gamma"], doc.get("r_max"))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ParameterError("declared sizes disagree with array shapes")
        return mdp

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_garnet(n_states, n_actions, branching_factor, seed, gamma=0.9):
    """Random Garnet MDP.

    Each (s, a) gets ``branching_factor`` distinct successors whose
    probabilities are a normalized uniform draw; rewards are uniform in
    [-1, 1].
    """
    if n_states < 1 or n_actions < 1:
        raise ParameterError("n_states and n_actions must be >= 1")
    if not 1 <= branching_factor <= n_states:
        raise ParameterError(f"branching_factor must be in [1, {n_states}], got {branching_factor}")
    rng = np.random.default_rng(seed)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching_factor, replace=False)
            w = 1.0 - rng.random(branching_factor)  # in (0, 1]
            P[s, a, succ] = w / w.sum()
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(P, r, gamma=gamma, r_max=1.0)


def with_gamma(mdp, gamma):
    return TabularMdp(mdp.transition, mdp.reward, gamma, mdp.r_max)


def _check_shapes(mdp, *arrays):
    for a in arrays:
        if np.shape(a) != (mdp.n_states, mdp.n_actions):
            raise ParameterError(f"expected shape {(mdp.n_states, mdp.n_actions)}, got {np.shape(a)}")


def policy_log(policy, tau):
    """ln pi, raising when a zero-probability action would carry weight tau > 0."""
    policy = np.asarray(policy, dtype=float)
    if tau > 0 and np.any(policy <= 0.0):
        raise NumericDomainError("zero-probability action with tau > 0: ln(pi) undefined")
    with np.errstate(divide="ignore"):
        return np.where(policy > 0, np.log(np.where(policy > 0, policy, 1.0)), 0.0)


def regularized_values(policy, q, tau):
    """<pi, q - tau ln pi> for each state."""
    policy = np.asarray(policy, dtype=float)
    if tau == 0:
        return np.sum(policy * q, axis=1)
    return np.sum(policy * (q - tau * policy_log(policy, tau)), axis=1)


def bellman_operator(mdp, policy, q):
    """T_pi q = r + gamma P <pi, q>."""
    _check_shapes(mdp, policy, q)
    return mdp.reward + mdp.gamma * mdp.expected_next(np.sum(policy * q, axis=1))


def regularized_bellman_operator(mdp, policy, q, tau):
    """T_pi^tau q = r + gamma P <pi, q - tau ln pi>."""
    if tau < 0:
        raise ParameterError("tau must be >= 0")
    _check_shapes(mdp, policy, q)
    return mdp.reward + mdp.gamma * mdp.expected_next(regularized_values(policy, q, tau))


def exact_q_of_policy(mdp, policy, tau=0.0, method="solve", max_iters=MAX_ITERS):
    """Regularized Q-value of ``policy``: the fixed point of T_pi^tau.

    ``method="solve"`` uses a linear solve on the state values,
    ``method="iterate"`` runs the operator until the sup-norm change drops
    below 1e-12.
    """
    if tau < 0:
        raise ParameterError("tau must be >= 0")
    policy = np.asarray(policy, dtype=float)
    _check_shapes(mdp, policy)
    if method == "solve":
        bonus = -tau * np.sum(policy * policy_log(policy, tau), axis=1) if tau > 0 else 0.0
        r_pi = np.sum(policy * mdp.reward, axis=1) + bonus
        P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
        v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
        return mdp.reward + mdp.gamma * mdp.expected_next(v)
    if method == "iterate":
        q = np.zeros_like(mdp.reward)
        residual = np.inf
        for _ in range(max_iters):
            q_new = regularized_bellman_operator(mdp, policy, q, tau)
            residual = np.max(np.abs(q_new - q))
            q = q_new
            if residual < FIXED_POINT_TOL:
                return q
        raise ConvergenceError("policy evaluation did not converge", residual)
    raise ParameterError(f"unknown method {method!r}")


def soft_value(q, tau):
    """tau * logsumexp(q / tau) over actions; the hard max when tau == 0."""
    if tau == 0:
        return np.max(q, axis=-1)
    return tau * logsumexp(np.asarray(q) / tau, axis=-1)


def greedy_policy(q):
    """Deterministic greedy policy; ties go to the lowest action index."""
    pi = np.zeros_like(q, dtype=float)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def exact_optimal_regularized(mdp, tau=0.0, max_iters=MAX_ITERS):
    """(pi_*^tau, Q_*^tau) by soft value iteration to residual < 1e-12."""
    if tau < 0:
        raise ParameterError("tau must be >= 0")
    q = np.zeros_like(mdp.reward)
    residual = np.inf
    for _ in range(max_iters):
        q_new = mdp.reward + mdp.gamma * mdp.expected_next(soft_value(q, tau))
        residual = np.max(np.abs(q_new - q))
        q = q_new
        if residual < FIXED_POINT_TOL:
            break
    else:
        raise ConvergenceError("soft value iteration did not converge", residual)
    policy = greedy_policy(q) if tau == 0 else softmax(q / tau, axis=1)
    return policy, q
