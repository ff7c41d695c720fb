"""Policy heads for the deep agent.

The main head is multicategorical: every action dimension is discretized
into ``n`` bins and gets its own softmax, so the joint policy is the
product of ``d`` categorical marginals and the n**d joint actions are
never enumerated.  A squashed diagonal Gaussian head is kept as the
ablation.  All heads accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from implicitq._numerics import log_softmax, logsumexp, softmax
from implicitq.tabular import ParameterError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_ATANH_CLIP = 1.0 - 1e-6


@dataclass(frozen=True)
class ActionBox:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or low.ndim != 1:
            raise ParameterError("low/high must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
            raise ParameterError("action bounds must be finite")
        if np.any(low >= high):
            raise ParameterError("every dimension needs a_min < a_max")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def uniform(cls, a_min, a_max, dim):
        return cls(np.full(dim, float(a_min)), np.full(dim, float(a_max)))

    @property
    def dim(self):
        return len(self.low)

    def clip(self, action):
        return np.clip(action, self.low, self.high)


def bin_values(a_min, a_max, n):
    """delta_0 = a_min + (a_max - a_min)/(2n), delta_j = delta_0 + j (a_max - a_min)/n.

    Works on any numeric type, so ``Fraction`` arguments give exact bins.
    """
    if n < 1:
        raise ParameterError("n_bins must be >= 1")
    if not a_min < a_max:
        raise ParameterError("a_min must be < a_max")
    width = a_max - a_min
    d0 = a_min + width / (2 * n)
    return [d0 + j * width / n for j in range(n)]


@dataclass(frozen=True)
class DiscretizedActionSpace:
    box: ActionBox
    n_bins: int
    bins: np.ndarray  # (d, n)

    @property
    def dim(self):
        return self.box.dim

    def to_continuous(self, indices):
        """Map bin indices (..., d) to bin values (..., d)."""
        indices = np.asarray(indices)
        return np.take_along_axis(
            np.broadcast_to(self.bins, indices.shape + (self.n_bins,)),
            indices[..., None], axis=-1)[..., 0]

    def describe(self):
        return {"n_bins": self.n_bins, "low": self.box.low.tolist(),
                "high": self.box.high.tolist(), "bins": self.bins.tolist()}


def discretize(box, n):
    if n < 1:
        raise ParameterError("n_bins must be >= 1")
    bins = np.array([bin_values(lo, hi, n) for lo, hi in zip(box.low, box.high)])
    return DiscretizedActionSpace(box, int(n), bins)


def exact_bins(a_min, a_max, n):
    return bin_values(Fraction(a_min), Fraction(a_max), n)


@dataclass(frozen=True)
class MulticategoricalHead:
    """logits (..., d, n); per-dimension softmax of the raw network outputs."""

    logits: np.ndarray
    tau: float = 1.0

    @property
    def probs(self):
        return softmax(self.logits, axis=-1)

    @property
    def log_probs(self):
        return log_softmax(self.logits, axis=-1)


def log_prob(head, action_indices):
    """sum_j log softmax(F^j)(a^j) for indices (..., d)."""
    idx = np.asarray(action_indices)
    n = head.logits.shape[-1]
    if not np.issubdtype(idx.dtype, np.integer) or np.any((idx < 0) | (idx >= n)):
        raise ParameterError(f"bin indices must be integers in [0, {n})")
    lp = np.take_along_axis(head.log_probs, idx[..., None], axis=-1)[..., 0]
    return lp.sum(axis=-1)


def sample(head, space, rng):
    """Independent categorical draw per dimension; returns (indices, continuous action)."""
    p = head.probs
    u = rng.random(p.shape[:-1] + (1,))
    idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    idx = np.minimum(idx, p.shape[-1] - 1)
    return idx, space.to_continuous(idx)


def mean_action(head, space):
    """Per-dimension expected bin value."""
    return np.sum(head.probs * space.bins, axis=-1)


def mode_action(head, space):
    idx = np.argmax(head.logits, axis=-1)
    return space.to_continuous(idx)


def softmax_consistency_roundtrip(q_row, tau):
    """Split q into (softmax(q/tau), tau logsumexp(q/tau)).

    tau ln pi + v reproduces q.
    """
    if not tau > 0:
        raise ParameterError("tau must be > 0")
    z = np.asarray(q_row, dtype=float) / tau
    return softmax(z, axis=-1), tau * logsumexp(z, axis=-1)


def soft_advantage(logits_row, tau):
    """tau ln softmax(F / tau) = F - tau logsumexp(F / tau).

    Tends to the hard advantage F - max F as tau -> 0, with
    ||soft - hard||_inf <= tau ln n.
    """
    if not tau > 0:
        raise ParameterError("tau must be > 0")
    f = np.asarray(logits_row, dtype=float)
    return tau * log_softmax(f / tau, axis=-1)


# -- Gaussian ablation ------------------------------------------------------

def squash_log_std(raw):
    """Smooth map of an unbounded output onto [LOG_STD_MIN, LOG_STD_MAX]."""
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def squash_log_std_grad(raw):
    return 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal normal on pre-squash actions u; a = box map of tanh(u)."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if np.any(self.log_std < LOG_STD_MIN - 1e-12) or np.any(self.log_std > LOG_STD_MAX + 1e-12):
            raise ParameterError("log_std outside its clamp range")

    @classmethod
    def from_outputs(cls, out):
        """Network output (..., 2d) -> head, first half mean, second half raw log-std."""
        d = out.shape[-1] // 2
        return cls(out[..., :d], squash_log_std(out[..., d:]))

    @property
    def std(self):
        return np.exp(self.log_std)


def squash(u, box):
    return box.low + 0.5 * (box.high - box.low) * (np.tanh(u) + 1.0)


def unsquash(a, box):
    y = 2.0 * (np.asarray(a) - box.low) / (box.high - box.low) - 1.0
    return np.arctanh(np.clip(y, -_ATANH_CLIP, _ATANH_CLIP))


def log_abs_det_squash(u, box):
    """log |da/du| per dimension, computed stably."""
    half_width = np.log(0.5 * (box.high - box.low))
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return half_width + 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def gaussian_log_prob(head, action, box):
    """Log-density of squashed actions (..., d) under the head."""
    u = unsquash(action, box)
    z = (u - head.mean) / head.std
    logn = -0.5 * z**2 - head.log_std - 0.5 * np.log(2 * np.pi)
    return np.sum(logn - log_abs_det_squash(u, box), axis=-1)


def gaussian_sample(head, box, rng):
    u = head.mean + head.std * rng.standard_normal(np.shape(head.mean))
    return squash(u, box)


def gaussian_mean_action(head, box):
    return squash(head.mean, box)
