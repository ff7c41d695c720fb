"""IQ-DP, its mirror-descent VI twin, and error-propagation experiments.

One IQ-DP step solves

    tau ln pi_{k+2} + V_{k+1} = r + alpha tau ln pi_{k+1} + gamma P V_k + eps_{k+1}

for the pair (pi_{k+2}, V_{k+1}) by splitting the right-hand side into
its softmax and its scaled logsumexp.  MD-VI with KL weight alpha*tau and
entropy weight (1 - alpha)*tau computes the same policies through the
closed-form maximizer pi_{k+2} ~ pi_{k+1}^alpha exp((r + gamma P V_k) / tau).

Index convention: ``eps_{k+1}`` is the error of the step that produces
``(pi_{k+2}, V_{k+1})``.  The initial iterate holds ``(pi_1, V_0)`` with
``step_index=0``; after ``k`` steps the iterate holds ``(pi_{k+1}, V_k)``
and the errors ``eps_1, ..., eps_k`` have been injected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from implicitq._numerics import (
    LOG_POLICY_FLOOR,
    check_finite,
    floored_log,
    logsumexp,
)
from implicitq.tabular import (
    ParameterError,
    exact_optimal_regularized,
    exact_q_of_policy,
)

NOISE_KINDS = ("none", "iid_gaussian", "iid_uniform", "constant_bias")


@dataclass(frozen=True)
class RegularizationConfig:
    alpha: float
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")

    @property
    def kl_weight(self):
        return self.alpha * self.tau

    @property
    def entropy_weight(self):
        return (1.0 - self.alpha) * self.tau


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        if self.scale < 0:
            raise ParameterError("noise scale must be >= 0")

    def stream(self, shape):
        """Infinite, seed-deterministic generator of error matrices."""
        rng = np.random.default_rng(self.seed)
        while True:
            if self.kind == "none":
                yield np.zeros(shape)
            elif self.kind == "iid_gaussian":
                yield self.scale * rng.standard_normal(shape)
            elif self.kind == "iid_uniform":
                yield rng.uniform(-self.scale, self.scale, size=shape)
            else:
                yield np.full(shape, float(self.scale))


@dataclass(frozen=True)
class DpIterate:
    """(pi_{k+1}, V_k) after ``step_index = k`` steps.

    ``prev_policy`` holds pi_k when known (needed by the Munchausen check).
    """

    policy: np.ndarray
    value: np.ndarray
    step_index: int = 0
    prev_policy: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.policy < 1e-300 * (1 - 1e-12)):
            raise ParameterError("DpIterate policy must be floored at 1e-300")


def _floored_policy(log_pi):
    """exp of a clamped log-policy, renormalized."""
    pi = np.exp(np.maximum(log_pi, LOG_POLICY_FLOOR))
    return pi / pi.sum(axis=1, keepdims=True)


def initial_iterate(mdp):
    """Uniform pi_1 and V_0 = 0."""
    return DpIterate(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions),
                     np.zeros(mdp.n_states), 0)


def random_iterate(mdp, seed, value_scale=1.0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(mdp.n_states, mdp.n_actions))
    pi = np.exp(logits - logsumexp(logits, axis=1)[:, None])
    return DpIterate(_floored_policy(np.log(pi)),
                     value_scale * rng.normal(size=mdp.n_states), 0)


def iq_target(mdp, iterate, config):
    """r + alpha tau ln pi_{k+1} + gamma P V_k (without the error term)."""
    return (mdp.reward + config.alpha * config.tau * floored_log(iterate.policy)
            + mdp.gamma * mdp.expected_next(iterate.value))


def iq_dp_step(mdp, iterate, config, eps=None):
    """One IQ-DP update; ``eps`` is the error added to the regression target."""
    target = iq_target(mdp, iterate, config)
    if eps is not None:
        target = target + eps
    check_finite(target, "IQ-DP target")
    z = target / config.tau
    lse = logsumexp(z, axis=1)
    policy = _floored_policy(z - lse[:, None])
    value = config.tau * lse
    return DpIterate(policy, check_finite(value, "IQ-DP value"),
                     iterate.step_index + 1, iterate.policy)


def md_vi_step(mdp, iterate, config):
    """One MD-VI(alpha*tau, (1-alpha)*tau) update in closed form.

    pi_{k+2} ~ pi_{k+1}^alpha exp(q / tau) and
    V_{k+1} = tau ln <pi_{k+1}^alpha, exp(q / tau)>, with q = r + gamma P V_k.
    Evaluated in the log domain so that very peaked policies keep their
    relative masses.
    """
    q = mdp.reward + mdp.gamma * mdp.expected_next(iterate.value)
    q_max = q.max(axis=1, keepdims=True)
    log_w = config.alpha * floored_log(iterate.policy) + (q - q_max) / config.tau
    w_max = log_w.max(axis=1, keepdims=True)
    mass = np.exp(log_w - w_max).sum(axis=1, keepdims=True)
    policy = _floored_policy(log_w - w_max - np.log(mass))
    value = config.tau * (np.log(mass) + w_max)[:, 0] + q_max[:, 0]
    check_finite(value, "MD-VI value")
    return DpIterate(policy, value, iterate.step_index + 1, iterate.policy)


def mdvi_objective(pi, q, prior, config):
    """<pi, q> + (1-alpha) tau H(pi) - alpha tau KL(pi || prior), per state."""
    log_pi = floored_log(pi)
    entropy = -np.sum(pi * log_pi, axis=-1)
    kl = np.sum(pi * (log_pi - floored_log(prior)), axis=-1)
    return np.sum(pi * q, axis=-1) + config.entropy_weight * entropy - config.kl_weight * kl


def reconstruction_residual(mdp, before, after, config, eps=None):
    """tau ln pi_{k+2} + V_{k+1} - target, on entries above the policy floor.

    Floored entries are reported as 0: for them tau ln pi is clamped by design.
    """
    target = iq_target(mdp, before, config)
    if eps is not None:
        target = target + eps
    resid = config.tau * np.log(after.policy) + after.value[:, None] - target
    return np.where(after.policy > 1e-290, resid, 0.0)


@dataclass
class ErrorTrace:
    """Per-step record of an (approximate) IQ-DP run.

    Row ``k`` (1-based in exports) holds eps_k, E_k, the distance
    ||Q_*^{(1-alpha)tau} - Q_{pi_{k+1}}^{(1-alpha)tau}||_inf of the policy
    produced by that step, and the explicit part of the matching error bound
    (asymptotic remainder terms excluded).
    """

    config: RegularizationConfig
    gamma: float
    eps: np.ndarray  # (n_steps, S, A)
    moving_average: np.ndarray  # E_k, same shape
    distance: np.ndarray
    bound_explicit: np.ndarray
    initial_distance: float = 0.0
    final_iterate: DpIterate | None = field(default=None, repr=False)

    @property
    def n_steps(self):
        return len(self.distance)

    def recompute_moving_average(self):
        """E_k = (1-alpha) sum_{j<=k} alpha^{k-j} eps_j, evaluated directly."""
        a = self.config.alpha
        n = self.n_steps
        out = np.empty_like(self.eps)
        for k in range(n):
            w = (1 - a) * a ** (k - np.arange(k + 1))
            out[k] = np.tensordot(w, self.eps[: k + 1], axes=1)
        return out

    def rows(self):
        for k in range(self.n_steps):
            yield {
                "step": k + 1,
                "eps_sup": float(np.max(np.abs(self.eps[k]))),
                "E_sup": float(np.max(np.abs(self.moving_average[k]))),
                "distance": float(self.distance[k]),
                "bound_explicit": float(self.bound_explicit[k]),
            }

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "eps_sup", "E_sup", "distance",
                                                    "bound_explicit"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})
        return path


def evaluation_temperature(config):
    """Temperature of the regularized MDP IQ-DP(alpha, tau) optimizes: (1-alpha) tau."""
    return 0.0 if config.alpha == 1.0 else config.entropy_weight


def run_scheme(mdp, config, noise=None, n_steps=100, init=None, distance_every=1):
    """Iterate approximate IQ-DP and track suboptimality against the bound.

    The bound column is 2/(1-gamma) * sum_j gamma^{k-j} ||E_j|| for alpha < 1
    and 2/(1-gamma) * ||(1/k) sum_j eps_j|| for alpha = 1.
    """
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    noise = noise or NoiseModel()
    temp = evaluation_temperature(config)
    _, q_star = exact_optimal_regularized(mdp, temp)
    it = init or initial_iterate(mdp)
    shape = (mdp.n_states, mdp.n_actions)
    stream = noise.stream(shape)
    g, a = mdp.gamma, config.alpha

    def distance(pi):
        return float(np.max(np.abs(q_star - exact_q_of_policy(mdp, pi, temp))))

    eps_all = np.empty((n_steps,) + shape)
    E_all = np.empty_like(eps_all)
    dist = np.full(n_steps, np.nan)
    bound = np.empty(n_steps)
    E = np.zeros(shape)
    eps_sum = np.zeros(shape)
    discounted = 0.0
    d0 = distance(it.policy)
    for k in range(n_steps):
        eps = next(stream)
        it = iq_dp_step(mdp, it, config, None if noise.kind == "none" else eps)
        E = a * E + (1 - a) * eps
        eps_sum += eps
        discounted = g * discounted + np.max(np.abs(E))
        eps_all[k], E_all[k] = eps, E
        if a < 1.0:
            bound[k] = 2.0 / (1 - g) * discounted
        else:
            bound[k] = 2.0 / (1 - g) * np.max(np.abs(eps_sum / (k + 1)))
        if (k + 1) % distance_every == 0 or k == n_steps - 1:
            dist[k] = distance(it.policy)
    if np.any(np.isnan(dist)):
        # keep the trace rectangular: carry the last measured value forward
        for k in range(n_steps):
            if np.isnan(dist[k]):
                dist[k] = dist[k - 1] if k else d0
    return ErrorTrace(config, g, eps_all, E_all, dist, bound, d0, it)


def theorem1_equivalence_check(mdp, config, n_steps=200, seed=None, mdvi_config=None):
    """Max |pi^IQ - pi^MDVI| over ``n_steps`` noiseless steps from a shared init.

    ``seed=None`` starts from the default (uniform, zero) init; an integer seed
    draws a random strictly positive policy and random values instead.
    ``mdvi_config`` lets a caller run MD-VI with different (e.g. corrupted)
    parameters, for sensitivity checks.
    """
    mdvi_config = mdvi_config or config
    init = initial_iterate(mdp) if seed is None else random_iterate(mdp, seed)
    a = b = init
    worst = 0.0
    for _ in range(n_steps):
        a = iq_dp_step(mdp, a, config)
        b = md_vi_step(mdp, b, mdvi_config)
        worst = max(worst, float(np.max(np.abs(a.policy - b.policy))))
    return worst


def munchausen_targets(mdp, iterate, config):
    """Four algebraic forms of the IQ regression target, each (S, A).

    * ``iq``: r + alpha tau ln pi_{k+1} + gamma P V_k
    * ``mdqn``: M-DQN target on Qbar = tau ln pi_{k+1} + V_k,
      r + alpha tau ln pi_{k+1} + gamma P <pi_{k+1}, Qbar - tau ln pi_{k+1}>
    * ``mdqn_lse``: same with the next-state term written as
      tau logsumexp(Qbar / tau)
    * ``kl_q``: Q-based MD-VI form on Q_k = tau ln pi_{k+1} - alpha tau ln pi_k + V_k,
      r + alpha tau ln pi_{k+1}
        + gamma P (<pi_{k+1}, Q_k> + (1-alpha) tau H(pi_{k+1}) - alpha tau KL(pi_{k+1}||pi_k))
    """
    if iterate.prev_policy is None:
        raise ParameterError("Munchausen check needs the previous policy pi_k")
    tau, a = config.tau, config.alpha
    pi, pi_prev, v = iterate.policy, iterate.prev_policy, iterate.value
    log_pi, log_prev = floored_log(pi), floored_log(pi_prev)
    bonus = mdp.reward + a * tau * log_pi
    q_bar = tau * log_pi + v[:, None]
    q_kl = tau * log_pi - a * tau * log_prev + v[:, None]
    soft_next = np.sum(pi * (q_bar - tau * log_pi), axis=1)
    lse_next = tau * logsumexp(q_bar / tau, axis=1)
    kl_next = mdvi_objective(pi, q_kl, pi_prev, config)
    return {
        "iq": bonus + mdp.gamma * mdp.expected_next(v),
        "mdqn": bonus + mdp.gamma * mdp.expected_next(soft_next),
        "mdqn_lse": bonus + mdp.gamma * mdp.expected_next(lse_next),
        "kl_q": bonus + mdp.gamma * mdp.expected_next(kl_next),
    }


def munchausen_loss_identity_check(mdp, iterate, config):
    """Largest disagreement between the equivalent target forms."""
    forms = munchausen_targets(mdp, iterate, config)
    ref = forms.pop("iq")
    return max(float(np.max(np.abs(f - ref))) for f in forms.values())


def with_previous_policy(iterate, prev_policy):
    return replace(iterate, prev_policy=prev_policy)
