"""Stabilized softmax / logsumexp helpers shared across modules."""

import numpy as np

# Smallest probability kept before taking logs.
POLICY_FLOOR = 1e-300
LOG_POLICY_FLOOR = float(np.log(POLICY_FLOOR))


class NumericDomainError(ArithmeticError):
    """Raised when a computation leaves the finite domain (NaN, log of 0, ...)."""


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def floored_log(p):
    """ln(max(p, POLICY_FLOOR)) so KL terms stay finite."""
    return np.log(np.maximum(np.asarray(p, dtype=float), POLICY_FLOOR))


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"non-finite entries in {what}")
    return x
