"""Small self-contained environments for the deep agent.

``step`` returns ``(observation, reward, terminated, truncated)``.  None of
the continuous-control tasks terminate on their own; episodes end by time
limit only, and ``truncated`` marks that so learners keep bootstrapping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from implicitq.policies import ActionBox, discretize
from implicitq.tabular import ParameterError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    observation_dim: int
    action_box: ActionBox
    max_episode_steps: int
    reward_range: tuple

    def __post_init__(self):
        if self.observation_dim < 1 or self.max_episode_steps < 1:
            raise ParameterError("observation_dim and max_episode_steps must be >= 1")


class _Env:
    spec: EnvSpec

    def __init__(self, seed=None):
        self._rng = np.random.default_rng(seed)
        self.t = 0
        self.clamped_actions = 0

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.t = 0
        self._reset_state()
        return self.observation()

    def _clamp(self, action):
        action = np.asarray(action, dtype=float).reshape(self.spec.action_box.dim)
        if np.any(np.isnan(action)):
            raise ParameterError("NaN action")
        clipped = self.spec.action_box.clip(action)
        if np.any(clipped != action):
            if self.clamped_actions == 0:
                log.warning("%s: action %s outside the box, clamping", self.spec.name, action)
            self.clamped_actions += 1
        return clipped

    def step(self, action):
        action = self._clamp(action)
        reward = self._advance(action)
        self.t += 1
        truncated = self.t >= self.spec.max_episode_steps
        return self.observation(), float(reward), False, truncated


def angle_normalize(x):
    """Wrap to (-pi, pi]."""
    y = np.mod(x + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


class PendulumEnv(_Env):
    """Torque-limited swing-up; theta = 0 is upright, starts hanging near the bottom.

    theta'' = 3 g / (2 l) sin(theta) + 3 u / (m l^2), semi-implicit Euler with
    fixed ``dt``; omega clamped to [-8, 8].
    """

    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    def __init__(self, seed=None, gravity=10.0, mass=1.0, length=1.0, dt=0.05,
                 max_episode_steps=200, init_noise=0.25):
        super().__init__(seed)
        self.gravity, self.mass, self.length, self.dt = gravity, mass, length, dt
        self.init_noise = init_noise
        self.spec = EnvSpec("pendulum", 3, ActionBox.uniform(-self.MAX_TORQUE, self.MAX_TORQUE, 1),
                            max_episode_steps, (-(np.pi**2 + 6.4 + 0.004), 0.0))
        self.theta, self.omega = np.pi, 0.0

    def _reset_state(self):
        e = self.init_noise
        self.theta = float(angle_normalize(np.pi + self._rng.uniform(-e, e)))
        self.omega = float(self._rng.uniform(-e, e))

    def set_state(self, theta, omega):
        self.theta, self.omega = float(angle_normalize(theta)), float(omega)

    def observation(self):
        return np.array([np.cos(self.theta), np.sin(self.theta), self.omega])

    def _advance(self, action):
        u = float(action[0])
        th = float(angle_normalize(self.theta))
        reward = -(th**2 + 0.1 * self.omega**2 + 0.001 * u**2)
        acc = 3 * self.gravity / (2 * self.length) * np.sin(self.theta) \
            + 3.0 / (self.mass * self.length**2) * u
        self.omega = float(np.clip(self.omega + acc * self.dt, -self.MAX_SPEED, self.MAX_SPEED))
        self.theta = float(angle_normalize(self.theta + self.omega * self.dt))
        return reward


class PointMassEnv(_Env):
    """2-D damped point mass pushed toward the origin.

    v' = v + (f / m - damping v) dt, p' = p + v' dt, p clamped to [-5, 5]^2
    (the velocity component into a wall is zeroed).
    """

    BOUND = 5.0

    def __init__(self, seed=None, mass=1.0, damping=0.25, dt=0.1, max_episode_steps=100,
                 init_radius=4.0):
        super().__init__(seed)
        self.mass, self.damping, self.dt, self.init_radius = mass, damping, dt, init_radius
        worst = np.sqrt(2) * self.BOUND + 0.02
        self.spec = EnvSpec("point_mass", 4, ActionBox.uniform(-1.0, 1.0, 2), max_episode_steps,
                            (-worst, 0.0))
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _reset_state(self):
        self.pos = self._rng.uniform(-self.init_radius, self.init_radius, size=2)
        self.vel = np.zeros(2)

    def observation(self):
        return np.concatenate([self.pos, self.vel])

    def _advance(self, action):
        self.vel = self.vel + (action / self.mass - self.damping * self.vel) * self.dt
        pos = self.pos + self.vel * self.dt
        hit = np.abs(pos) > self.BOUND
        self.vel = np.where(hit, 0.0, self.vel)
        self.pos = np.clip(pos, -self.BOUND, self.BOUND)
        return -np.linalg.norm(self.pos) - 0.01 * float(action @ action)


class TabularEnv(_Env):
    """A finite MDP behind one-hot observations.

    Actions live in the 1-d box [0, n_actions]; with ``n_actions`` bins the
    bin centers are j + 1/2, so a continuous action maps back to
    ``floor(a)``.  Each episode starts in a uniformly drawn state.
    """

    def __init__(self, mdp, seed=None, max_episode_steps=50):
        super().__init__(seed)
        self.mdp = mdp
        self.spec = EnvSpec("tabular", mdp.n_states, ActionBox.uniform(0.0, mdp.n_actions, 1),
                            max_episode_steps, (-mdp.r_max, mdp.r_max))
        self.action_space = discretize(self.spec.action_box, mdp.n_actions)
        self.state = 0

    def _reset_state(self):
        self.state = int(self._rng.integers(self.mdp.n_states))

    def observation(self):
        obs = np.zeros(self.mdp.n_states)
        obs[self.state] = 1.0
        return obs

    def action_index(self, action):
        return int(min(np.floor(action[0]), self.mdp.n_actions - 1))

    def _advance(self, action):
        a = self.action_index(action)
        reward = self.mdp.reward[self.state, a]
        self.state = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self.state, a]))
        return reward


def wrap_tabular(mdp, seed=None, max_episode_steps=50):
    return TabularEnv(mdp, seed, max_episode_steps)


ENVS = {"pendulum": PendulumEnv, "point_mass": PointMassEnv}


def make_env(name, seed=None, **params):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ParameterError(f"unknown environment {name!r}") from None
    return cls(seed=seed, **params)


def rollout_returns(env, policy_fn, n_episodes, seed):
    """Undiscounted episode returns of ``policy_fn(obs) -> action``."""
    returns = []
    env.reset(seed)
    for _ in range(n_episodes):
        obs = env.reset()
        total, done = 0.0, False
        while not done:
            obs, r, term, trunc = env.step(policy_fn(obs))
            total += r
            done = term or trunc
        returns.append(total)
    return np.array(returns)


@lru_cache(maxsize=None)
def _random_baseline(name, params_items, n_episodes, seed):
    env = make_env(name, **dict(params_items))
    rng = np.random.default_rng(seed + 1)
    box = env.spec.action_box
    rets = rollout_returns(env, lambda _: rng.uniform(box.low, box.high), n_episodes, seed)
    return float(rets.mean()), float(rets.std(ddof=1)), tuple(rets.tolist())


def random_policy_baseline(name, n_episodes=100, seed=12345, **params):
    """(mean, std) of the uniform-random policy's episode return; cached per env config."""
    mean, std, _ = _random_baseline(name, tuple(sorted(params.items())), n_episodes, seed)
    return mean, std
