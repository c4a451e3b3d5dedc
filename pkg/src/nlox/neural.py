"""Tanh multilayer perceptrons with hand-written reverse mode.

Hidden layers use ``tanh``; the last layer is affine.  Inputs may be a
single vector ``(d,)`` or a batch ``(B, d)``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelEvaluationError, ModelFileError

MODEL_MAGIC = "nlox-mlp"
MODEL_VERSION = 1


@dataclass
class MlpParams:
    weights: list
    biases: list
    seed: int = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"bias of length {b.shape[0]} does not match weight {W.shape}")
        for W_prev, W in zip(self.weights, self.weights[1:]):
            if W.shape[1] != W_prev.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.seed)

    def arrays(self):
        """Parameter arrays in layer order ``W1, b1, W2, b2, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vector):
        pos = 0
        for a in self.arrays():
            a[...] = vector[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def zeros_like(self):
        return MlpParams([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def frobenius_norms(self):
        return [float(np.linalg.norm(W)) for W in self.weights], [float(np.linalg.norm(b)) for b in self.biases]

    def output_bound(self):
        """Upper bound on ``||N(x)||`` over all inputs, using ``|tanh| < 1``."""
        if len(self.weights) == 1:
            return np.inf
        width = self.weights[-1].shape[1]
        return float(np.linalg.norm(self.weights[-1], 2) * np.sqrt(width) + np.linalg.norm(self.biases[-1]))

    def lipschitz_bound(self):
        """Product of layer spectral norms (tanh is 1-Lipschitz)."""
        return float(np.prod([np.linalg.norm(W, 2) for W in self.weights]))


def init_params(layer_dims, seed):
    """Glorot-uniform weights and zero biases."""
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dimensions")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases, seed if isinstance(seed, (int, np.integer)) else None)


def mlp_forward(params, x):
    """Evaluate the network; returns ``(output, cache)``.

    ``cache`` holds the input of every layer: the network input followed by
    each hidden activation.
    """
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(f"input dimension {h.shape[-1]} != {params.weights[0].shape[1]}")
    cache = [h]
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W.T + b
        if i < last:
            h = np.tanh(a)
            cache.append(h)
        else:
            h = a
    return h, cache


def mlp_backward(params, cache, output_grad):
    """Vector-Jacobian product of the network.

    Returns ``(input_grad, grads)`` for the scalar ``<output_grad, output>``.
    For batched caches the parameter gradients are summed over the batch.
    """
    if len(cache) != len(params.weights):
        raise ValueError("cache does not belong to this network")
    delta = np.asarray(output_grad, dtype=float)
    batched = delta.ndim == 2
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        h_in = cache[i]
        if h_in.shape[-1] != params.weights[i].shape[1]:
            raise ValueError("stale cache: shape mismatch")
        if batched:
            gw[i] = delta.T @ h_in
            gb[i] = delta.sum(axis=0)
        else:
            gw[i] = np.outer(delta, h_in)
            gb[i] = delta.copy()
        delta = delta @ params.weights[i]
        if i > 0:
            delta = delta * (1.0 - h_in * h_in)
    return delta, MlpParams(gw, gb)


# ----------------------------------------------------------------- RMSprop


@dataclass
class RmspropState:
    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-8
    square_avg: list = field(default_factory=list)
    steps: int = 0
    rejected: int = 0

    @classmethod
    def for_params(cls, params, learning_rate, decay=0.9, epsilon=1e-8):
        return cls(learning_rate, decay, epsilon, [np.zeros_like(a) for a in params.arrays()])


def rmsprop_update(params, grads, state):
    """Apply one RMSprop step in place; returns ``(params, state)``.

    A gradient with non-finite entries leaves both untouched and increments
    ``state.rejected``.
    """
    g_arrays = grads.arrays()
    if not all(np.all(np.isfinite(g)) for g in g_arrays):
        state.rejected += 1
        return params, state
    if not state.square_avg:
        state.square_avg = [np.zeros_like(a) for a in params.arrays()]
    d, lr, eps = state.decay, state.learning_rate, state.epsilon
    for p, g, s in zip(params.arrays(), g_arrays, state.square_avg):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        s *= d
        s += (1.0 - d) * g * g
        p -= lr * g / (np.sqrt(s) + eps)
    state.steps += 1
    return params, state


# ------------------------------------------------------------- persistence


def save_params(params, path, **extra):
    """Write a text header line followed by the raw little-endian float64 parameters."""
    header = {
        "format": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "dims": params.dims,
        "activation": "tanh",
        "seed": None if params.seed is None else int(params.seed),
    }
    header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path):
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt model header") from exc
    if not isinstance(header, dict) or header.get("format") != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not an MLP model file")
    if header.get("version") != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported model version {header.get('version')!r}")
    dims = header["dims"]
    n = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(payload) != 8 * n:
        raise ModelFileError(f"{path}: expected {n} parameters, found {len(payload) // 8}")
    params = init_params(dims, 0)
    params.set_flat(np.frombuffer(payload, dtype="<f8"))
    params.seed = header.get("seed")
    return params


def check_finite(params, name="network"):
    if not np.all(np.isfinite(params.flat())):
        raise ModelEvaluationError(f"{name} has non-finite parameters")
