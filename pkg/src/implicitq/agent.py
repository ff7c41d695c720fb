"""Deep IQ agent: replay buffer, the single IQ regression loss and its training loop.

The implicit Q-value is ``tau ln pi_theta(a|s) + V_phi(s)``; the loss regresses it on

    r + alpha tau ln pi_target(a|s) + gamma V_target(s')

with both target networks tracking the online ones by Polyak averaging.
Variants:

======================  =====================================================
``iq``                  alpha forced to 0, multicategorical policy
``m_iq``                alpha from the config (Munchausen term on)
``pcl`` / ``trust_pcl``  residual: online V at s', gradient through it
``iq_gaussian``         ``iq`` with a squashed Gaussian policy
``m_iq_gaussian``       ``m_iq`` with a squashed Gaussian policy
======================  =====================================================
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from implicitq._numerics import log_softmax, softmax
from implicitq.envs import rollout_returns, wrap_tabular
from implicitq.nn import MlpParams, MlpSpec, adam_step, backward, forward, polyak_update
from implicitq.policies import (
    GaussianHead,
    discretize,
    gaussian_mean_action,
    gaussian_sample,
    squash_log_std,
    squash_log_std_grad,
    unsquash,
    log_abs_det_squash,
)
from implicitq.tabular import ParameterError, exact_optimal_regularized

log = logging.getLogger(__name__)

VARIANTS = ("iq", "m_iq", "pcl", "trust_pcl", "iq_gaussian", "m_iq_gaussian")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    alpha: float = 0.9
    tau: float = 0.01
    gamma: float = 0.99
    batch_size: int = 256
    polyak: float = 0.05
    lr: float = 3e-4
    n_bins: int = 11
    variant: str = "iq"
    hidden: tuple = (512, 512)
    buffer_capacity: int = 1_000_000
    learning_starts: int = 0
    eval_interval: int = 10_000
    eval_episodes: int = 10
    eval_mode: str = "mean"
    epsilon: float = 0.0
    polyak_convention: str = "prose"
    munchausen_clip: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if not self.tau > 0:
            raise ParameterError("tau must be > 0")
        if self.batch_size < 1 or self.n_bins < 1:
            raise ParameterError("batch_size and n_bins must be >= 1")
        if not 0.0 < self.polyak <= 1.0:
            raise ParameterError("polyak coefficient must lie in (0, 1]")
        if self.eval_mode not in ("mean", "mode"):
            raise ParameterError("eval_mode must be 'mean' or 'mode'")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def effective_alpha(self):
        return 0.0 if self.variant in ("iq", "pcl", "iq_gaussian") else self.alpha

    @property
    def residual(self):
        return self.variant in ("pcl", "trust_pcl")

    @property
    def gaussian(self):
        return self.variant.endswith("gaussian")

    @property
    def reported_tau(self):
        """Temperature used when reporting runs with alpha > 0: tau / (1 - alpha)."""
        a = self.effective_alpha
        return self.tau if a == 0 or a == 1 else self.tau / (1.0 - a)

    @property
    def target_temperature(self):
        """Temperature (1 - alpha) tau of the regularized MDP the agent solves."""
        return (1.0 - self.effective_alpha) * self.tau

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Transition:
    state: np.ndarray
    action_indices: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity, obs_dim, act_dim):
        if capacity < 1:
            raise ParameterError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.idx = np.zeros((capacity, act_dim), dtype=np.int64)
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        i = self.inserted % self.capacity
        self.obs[i], self.next_obs[i] = t.state, t.next_state
        self.idx[i], self.act[i] = t.action_indices, t.action
        self.rew[i], self.done[i] = t.reward, float(t.done)
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self.size == 0:
            raise ParameterError("cannot sample from an empty buffer")
        j = rng.integers(self.size, size=batch_size)
        return self.batch(j)

    def batch(self, j):
        return Batch(self.obs[j], self.idx[j], self.act[j], self.rew[j], self.next_obs[j],
                     self.done[j])

    def contents(self):
        """Stored transitions, oldest first."""
        start = self.inserted % self.capacity if self.size == self.capacity else 0
        return self.batch((start + np.arange(self.size)) % self.capacity)


@dataclass
class Batch:
    obs: np.ndarray
    action_indices: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.reward)


@dataclass
class LossBatchReport:
    loss: float
    mean_target: float
    mean_abs_tau_log_pi: float
    policy_grad_norm: float
    value_grad_norm: float

    @property
    def grad_norm(self):
        return float(np.hypot(self.policy_grad_norm, self.value_grad_norm))


# -- policy head plumbing -------------------------------------------------------

def _categorical_log_prob(out, idx, n_bins):
    """log pi(a|s) for network outputs (B, d*n) and indices (B, d); also returns d/d out."""
    B = out.shape[0]
    logits = out.reshape(B, -1, n_bins)
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    value = np.sum(lp * onehot, axis=(1, 2))
    dvalue = (onehot - np.exp(lp)).reshape(B, -1)
    return value, dvalue


def _gaussian_log_prob(out, action, box):
    d = out.shape[1] // 2
    mean, raw = out[:, :d], out[:, d:]
    log_std = squash_log_std(raw)
    u = unsquash(action, box)
    inv_var = np.exp(-2.0 * log_std)
    diff = u - mean
    value = np.sum(-0.5 * diff**2 * inv_var - log_std - 0.5 * np.log(2 * np.pi)
                   - log_abs_det_squash(u, box), axis=1)
    d_mean = diff * inv_var
    d_log_std = diff**2 * inv_var - 1.0
    dvalue = np.concatenate([d_mean, d_log_std * squash_log_std_grad(raw)], axis=1)
    return value, dvalue


class Agent:
    """Owns the four networks, their optimizer state and the replay buffer."""

    def __init__(self, obs_dim, box, config, seed=0):
        self.config = config
        self.box = box
        self.space = discretize(box, config.n_bins)
        self.rng = np.random.default_rng(seed)
        d = box.dim
        out = 2 * d if config.gaussian else d * config.n_bins
        dtype = np.dtype(config.dtype)
        self.policy = MlpParams(MlpSpec(obs_dim, out, config.hidden), self.rng, dtype)
        self.value = MlpParams(MlpSpec(obs_dim, 1, config.hidden), self.rng, dtype)
        self.target_policy = self.policy.copy()
        self.target_value = self.value.copy()
        self.buffer = ReplayBuffer(config.buffer_capacity, obs_dim, d)

    # acting
    def policy_outputs(self, obs, target=False):
        net = self.target_policy if target else self.policy
        return forward(net, obs)[0]

    def act(self, obs, mode="sample"):
        """Returns (bin indices, continuous action)."""
        cfg = self.config
        out = self.policy_outputs(obs).astype(float)
        d = self.box.dim
        if cfg.gaussian:
            head = GaussianHead.from_outputs(out)
            if mode == "sample":
                a = gaussian_sample(head, self.box, self.rng)
            else:
                a = gaussian_mean_action(head, self.box)
            return np.zeros(d, dtype=np.int64), a
        logits = out.reshape(d, cfg.n_bins)
        p = softmax(logits, axis=-1)
        if mode == "sample":
            if cfg.epsilon > 0:
                p = (1 - cfg.epsilon) * p + cfg.epsilon / cfg.n_bins
            u = self.rng.random((d, 1))
            idx = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), cfg.n_bins - 1)
            return idx, self.space.to_continuous(idx)
        if mode == "mean":
            return np.argmax(p, axis=-1), np.sum(p * self.space.bins, axis=-1)
        idx = np.argmax(logits, axis=-1)
        return idx, self.space.to_continuous(idx)

    def policy_probs(self, obs):
        out = self.policy_outputs(obs).astype(float)
        return softmax(out.reshape(out.shape[:-1] + (self.box.dim, self.config.n_bins)), axis=-1)

    # learning
    def update(self, batch):
        report = iq_loss(batch, self.policy, self.value, self.target_policy, self.target_value,
                         self.config, box=self.box)
        adam_step(self.policy, self.config.lr)
        adam_step(self.value, self.config.lr)
        lam, conv = self.config.polyak, self.config.polyak_convention
        polyak_update(self.target_policy, self.policy, lam, conv)
        polyak_update(self.target_value, self.value, lam, conv)
        return report


def _log_pi(out, batch, config, box):
    if config.gaussian:
        return _gaussian_log_prob(out, batch.action, box)
    return _categorical_log_prob(out, batch.action_indices, config.n_bins)


def iq_loss(batch, policy, value, target_policy, target_value, config, box=None, residual=None):
    """Mean squared IQ residual; gradients accumulate into ``policy.grads`` / ``value.grads``.

    Target networks only enter the regression constant.  With
    ``residual=True`` (the config's pcl/trust_pcl variants) the online value
    network replaces the target one at s' and receives gradient there too.
    Terminal transitions (``done``) drop the bootstrap term.
    """
    if len(batch) == 0:
        raise ParameterError("empty batch")
    residual = config.residual if residual is None else residual
    tau, gamma, alpha = config.tau, config.gamma, config.effective_alpha
    B = len(batch)
    policy.zero_grad()
    value.zero_grad()

    out, tape_pi = forward(policy, batch.obs)
    log_pi, dlog_pi = _log_pi(out, batch, config, box)
    v, tape_v = forward(value, batch.obs)
    v = v[:, 0]
    not_done = 1.0 - batch.done

    target = batch.reward.astype(float)
    if alpha > 0:
        bar_log_pi, _ = _log_pi(forward(target_policy, batch.obs)[0], batch, config, box)
        if config.munchausen_clip is not None:
            bar_log_pi = np.clip(bar_log_pi, config.munchausen_clip, 0.0)
        target = target + alpha * tau * bar_log_pi
    if residual:
        v_next, tape_vn = forward(value, batch.next_obs)
    else:
        v_next = forward(target_value, batch.next_obs)[0]
    target = target + gamma * not_done * v_next[:, 0]

    delta = target - tau * log_pi - v
    loss = float(np.mean(delta**2))
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite IQ loss (|target| max {np.max(np.abs(target))})")

    g = -2.0 * delta / B
    backward(tape_pi, (g * tau)[:, None] * dlog_pi)
    backward(tape_v, g[:, None])
    if residual:
        backward(tape_vn, (-gamma * not_done * g)[:, None])
    return LossBatchReport(
        loss=loss,
        mean_target=float(np.mean(target)),
        mean_abs_tau_log_pi=float(np.mean(np.abs(tau * log_pi))),
        policy_grad_norm=policy.grad_norm(),
        value_grad_norm=value.grad_norm(),
    )


def residual_loss(batch, policy, value, target_policy, config, box=None):
    """PCL (alpha = 0) / Trust-PCL (alpha > 0): IQ with the online value at s'."""
    return iq_loss(batch, policy, value, target_policy, None, config, box=box, residual=True)


# -- training -------------------------------------------------------------------

@dataclass
class TrainingLog:
    config: AgentConfig
    seed: int
    rows: list = field(default_factory=list)
    agent: Agent | None = field(default=None, repr=False)
    wall_time: float = 0.0

    FIELDS = ("env_step", "eval_return_mean", "eval_return_std", "loss", "grad_norm")

    @property
    def final_return(self):
        return self.rows[-1]["eval_return_mean"]

    def returns(self):
        return np.array([r["eval_return_mean"] for r in self.rows])

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                            for k, v in row.items()})
        return path


def evaluate(agent, env, n_episodes, seed, mode="mean"):
    rets = rollout_returns(env, lambda o: agent.act(o, mode)[1], n_episodes, seed)
    return float(rets.mean()), float(rets.std())


def train(env, config, total_steps, seed=0, eval_env=None, eval_seed=None, on_eval=None):
    """Online IQ: one env step, one Adam step and one Polyak update per iteration."""
    agent = Agent(env.spec.observation_dim, env.spec.action_box, config, seed)
    eval_env = eval_env or copy.deepcopy(env)
    eval_seed = 10_000 + seed if eval_seed is None else eval_seed
    out = TrainingLog(config, seed, agent=agent)
    start = time.perf_counter()

    def record(step, losses, norms):
        mean, std = evaluate(agent, eval_env, config.eval_episodes, eval_seed, config.eval_mode)
        row = {"env_step": step, "eval_return_mean": mean, "eval_return_std": std,
               "loss": float(np.mean(losses)) if losses else float("nan"),
               "grad_norm": float(np.mean(norms)) if norms else float("nan")}
        out.rows.append(row)
        log.info("step %d return %.2f +- %.2f loss %.4g", step, mean, std, row["loss"])
        if on_eval is not None:
            on_eval(row, agent)

    record(0, [], [])
    obs = env.reset(seed)
    losses, norms = [], []
    for t in range(1, total_steps + 1):
        idx, action = agent.act(obs, "sample")
        next_obs, reward, terminated, truncated = env.step(action)
        agent.buffer.add(Transition(obs, idx, action, reward, next_obs, terminated))
        obs = env.reset() if (terminated or truncated) else next_obs
        if len(agent.buffer) > config.learning_starts:
            report = agent.update(agent.buffer.sample(config.batch_size, agent.rng))
            losses.append(report.loss)
            norms.append(report.grad_norm)
        if t % config.eval_interval == 0 or t == total_steps:
            record(t, losses, norms)
            losses, norms = [], []
    out.wall_time = time.perf_counter() - start
    return out


def agent_policy_table(agent, n_states):
    """pi_agent[s, a] read off one-hot observations."""
    return agent.policy_probs(np.eye(n_states))[:, 0, :]


def tabular_sanity_train(mdp, config, total_steps, seed=0, epsilon=0.1, return_log=False,
                         max_episode_steps=50):
    """Train the deep agent on a one-hot wrapped MDP; sup-norm distance to pi_*^{(1-alpha)tau}.

    The agent's discount is replaced by the MDP's.
    """
    config = replace(config, gamma=mdp.gamma, n_bins=mdp.n_actions, epsilon=epsilon,
                     eval_interval=max(total_steps, 1), eval_episodes=1)
    env = wrap_tabular(mdp, seed, max_episode_steps)
    result = train(env, config, total_steps, seed)
    pi_star, _ = exact_optimal_regularized(mdp, config.target_temperature)
    pi_agent = agent_policy_table(result.agent, mdp.n_states)
    dev = float(np.max(np.abs(pi_agent - pi_star)))
    return (dev, result, pi_agent, pi_star) if return_log else dev


def implicit_q(agent, obs):
    """tau ln pi(.|s) + V(s) for a 1-d multicategorical agent, rows over bins."""
    lp = np.log(agent.policy_probs(obs))[..., 0, :]
    v = forward(agent.value, obs)[0].astype(float)
    return agent.config.tau * lp + v
