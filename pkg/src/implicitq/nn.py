"""Dense ReLU networks with hand-written reverse mode, Adam and Polyak targets.

Only what the agent needs: batched affine + rectifier stacks.  A forward
pass returns the output together with a :class:`Tape`; ``backward`` walks
the tape and accumulates parameter gradients.  Updating the parameters
(Adam, Polyak, loading) bumps a version counter so a tape recorded before
the update cannot be replayed against the new weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from implicitq.tabular import ParameterError

CHECKPOINT_FORMAT = "implicitq-mlp"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    """Backward called with a tape recorded against older parameters."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple = (512, 512)

    def __post_init__(self):
        sizes = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(s) < 1 for s in sizes):
            raise ParameterError(f"all layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def sizes(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self):
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "hidden": list(self.hidden)}


class MlpParams:
    """Weights ``W[i]`` (fan_in, fan_out) and biases ``b[i]`` with gradients and Adam slots.

    All tensors are views into one flat buffer (``data``), gradients into
    ``grad_data``, so optimizer updates are single vectorized operations.
    """

    def __init__(self, spec, rng=None, dtype=np.float64, weights=None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        shapes = []
        for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights = []
            for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                weights.append(np.zeros(fan_out))
        if [np.shape(w) for w in weights] != shapes:
            raise ParameterError("weight shapes do not match the spec")
        self.data = np.concatenate([np.ravel(w) for w in weights]).astype(self.dtype)
        self.grad_data = np.zeros_like(self.data)
        self.tensors = self._views(self.data, shapes)
        self.grads = self._views(self.grad_data, shapes)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.version = 0

    @staticmethod
    def _views(buf, shapes):
        out, i = [], 0
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(buf[i:i + n].reshape(shape))
            i += n
        return out

    @property
    def n_layers(self):
        return len(self.tensors) // 2

    @property
    def size(self):
        return self.data.size

    def copy(self):
        """Fresh parameter set with the same weights (optimizer state reset)."""
        return MlpParams(self.spec, dtype=self.dtype, weights=[t.copy() for t in self.tensors])

    def zero_grad(self):
        self.grad_data.fill(0.0)

    def grad_norm(self):
        return float(np.sqrt(np.dot(self.grad_data, self.grad_data)))

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Tape:
    params: MlpParams
    version: int
    inputs: list  # input to each layer
    masks: list  # rectifier masks of hidden layers
    batched: bool


def forward(params, x):
    """Affine / ReLU stack; the last layer is linear."""
    x = np.asarray(x, dtype=params.dtype)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != params.spec.input_dim:
        raise ParameterError(f"input dim {h.shape[1]} != {params.spec.input_dim}")
    inputs, masks = [], []
    n = params.n_layers
    for i in range(n):
        inputs.append(h)
        h = h @ params.tensors[2 * i] + params.tensors[2 * i + 1]
        if i < n - 1:
            mask = h > 0
            masks.append(mask)
            h = h * mask
    tape = Tape(params, params.version, inputs, masks, batched)
    return (h if batched else h[0]), tape


def backward(tape, output_grad, need_input_grad=False):
    """Accumulate d(loss)/d(params) given d(loss)/d(output)."""
    params = tape.params
    if tape.version != params.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    g = np.asarray(output_grad, dtype=params.dtype)
    if not tape.batched:
        g = g[None, :]
    for i in reversed(range(params.n_layers)):
        if i < params.n_layers - 1:
            g = g * tape.masks[i]
        params.grads[2 * i] += tape.inputs[i].T @ g
        params.grads[2 * i + 1] += g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params.tensors[2 * i].T
    if need_input_grad:
        return g if tape.batched else g[0]
    return None


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on the accumulated gradients, which are then cleared."""
    params.step += 1
    c1 = 1.0 - beta1**params.step
    c2 = 1.0 - beta2**params.step
    g, m, v = params.grad_data, params.m, params.v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    params.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    g.fill(0.0)
    params.version += 1


def polyak_update(target, source, lam, convention="prose"):
    """Move target weights toward source.

    ``convention="prose"``: target <- (1 - lam) target + lam source (slow tracking
    for small lam).  ``convention="pseudocode"``: target <- lam target + (1 - lam) source.
    """
    if [t.shape for t in target.tensors] != [s.shape for s in source.tensors]:
        raise ParameterError("target and source shapes differ")
    if convention == "prose":
        keep = 1.0 - lam
    elif convention == "pseudocode":
        keep = lam
    else:
        raise ParameterError(f"unknown Polyak convention {convention!r}")
    target.data *= keep
    target.data += (1.0 - keep) * source.data
    target.version += 1


def save_checkpoint(params, path):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "dtype": params.dtype.name,
        "tensors": [{"shape": list(t.shape), "data": t.ravel().tolist()} for t in params.tensors],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ParameterError("unrecognized checkpoint format")
    s = doc["spec"]
    spec = MlpSpec(s["input_dim"], s["output_dim"], tuple(s["hidden"]))
    weights = [np.asarray(t["data"]).reshape(t["shape"]) for t in doc["tensors"]]
    return MlpParams(spec, dtype=doc["dtype"], weights=weights)
