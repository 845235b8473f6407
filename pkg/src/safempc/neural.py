"""Minimal dense-network engine with reverse-mode gradients.

Everything here is float64 numpy: dense feedforward nets with hand-written
backprop, a Gaussian-head probabilistic network (mean + soft-clamped
log-variance), a Lipschitz-bounded scalar barrier network whose weight
matrices are projected to certified spectral-norm budgets after every
optimizer step, a sigmoid safety classifier, and Adam.

No generic autodiff: the backward passes cover exactly the feedforward graphs
used by the training losses, and every gradient is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

from .streams import RandomStream

LOG_2PI = float(np.log(2.0 * np.pi))

# Soft clamp range for predicted log-variances (in normalized target units).
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 0.5


# ---------------------------------------------------------------------------
# activations


def _sigmoid(z):
    # tanh form: overflow-safe and a single C-level ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _act_forward(name: str, z):
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "swish":
        return z * _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z, y):
    """Derivative of the activation, given pre-activation z and output y."""
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "swish":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation {name!r}")


ACTIVATION_LIPSCHITZ = {"identity": 1.0, "tanh": 1.0, "sigmoid": 0.25, "swish": 1.1}


# ---------------------------------------------------------------------------
# dense network


class DenseNet:
    """Fully connected net; forward is X @ W + b per layer.

    Parameters live in ``self.weights`` / ``self.biases`` (float64). The
    cached forward pass stores per-layer inputs and pre-activations so the
    backward pass can produce parameter gradients and input gradients.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        hidden_activation: str = "swish",
        output_activation: str = "identity",
        stream: RandomStream | None = None,
    ):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(int(s) for s in sizes)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        stream = stream if stream is not None else RandomStream(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = stream.child("W", i).normal(size=(n_in, n_out)) / np.sqrt(n_in)
            self.weights.append(np.asarray(w, dtype=np.float64))
            self.biases.append(np.zeros(n_out, dtype=np.float64))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _activation(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            X = _act_forward(self._activation(i), X @ w + b)
        return X

    def forward_cached(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        inputs, preacts, outputs = [], [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(X)
            z = X @ w + b
            preacts.append(z)
            X = _act_forward(self._activation(i), z)
            outputs.append(X)
        return X, (inputs, preacts, outputs)

    def backward(self, cache, d_out: np.ndarray, d_out_is_preact: bool = False):
        """Backprop; returns ({param name: grad}, d_input).

        ``d_out_is_preact`` treats d_out as the gradient w.r.t. the final
        pre-activation, which lets losses fold the output nonlinearity into a
        numerically stable combined expression (e.g. sigmoid + BCE).
        """
        inputs, preacts, outputs = cache
        grads = {}
        d = np.asarray(d_out, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            if i == self.n_layers - 1 and d_out_is_preact:
                dz = d
            else:
                dz = d * _act_grad(self._activation(i), preacts[i], outputs[i])
            grads[f"W{i}"] = inputs[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            d = dz @ self.weights[i].T
        return grads, d

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for i in range(self.n_layers):
            self.weights[i] = np.asarray(params[f"W{i}"], dtype=np.float64)
            self.biases[i] = np.asarray(params[f"b{i}"], dtype=np.float64)

    # flat views, used by finite-difference gradient checks
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._ordered()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self._ordered():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def flat_grad(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        parts = []
        for i in range(self.n_layers):
            parts.append(grads[f"W{i}"].ravel())
            parts.append(grads[f"b{i}"].ravel())
        return np.concatenate(parts)

    def _ordered(self):
        out = []
        for i in range(self.n_layers):
            out.append(self.weights[i])
            out.append(self.biases[i])
        return out


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction. Mutates params/state in place.

    ``state`` is a dict; pass {} on the first call.
    """
    b1, b2 = betas
    if not state:
        state["t"] = 0
        state["m"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.items()}
    state["t"] += 1
    t = state["t"]
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, params, grads):
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------------------
# input/target normalization


class Normalizer:
    """Per-dimension shift/scale with a std floor of 1e-6."""

    STD_FLOOR = 1e-6

    def __init__(self, dim: int):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.std = np.ones(dim, dtype=np.float64)

    def fit(self, X: np.ndarray) -> None:
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), self.STD_FLOOR)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def inverse(self, X: np.ndarray) -> np.ndarray:
        return X * self.std + self.mean


# ---------------------------------------------------------------------------
# probabilistic network (Gaussian head)


def soft_clamp_log_var(raw, lo: float = LOG_VAR_MIN, hi: float = LOG_VAR_MAX):
    """Smoothly squash raw log-variances to approximately [lo, hi].

    Double-softplus clamp; the output can exceed hi by at most
    softplus(lo - hi) (~3e-5 for the default range), which is harmless for a
    variance ceiling."""
    u = hi - _softplus(hi - raw)
    return lo + _softplus(u - lo)


def _soft_clamp_grad(raw, lo: float = LOG_VAR_MIN, hi: float = LOG_VAR_MAX):
    u = hi - _softplus(hi - raw)
    return _sigmoid(u - lo) * _sigmoid(hi - raw)


def gaussian_nll(mean, log_var, target):
    """Diagonal-Gaussian negative log likelihood, averaged over the batch.

    loss = mean_B 0.5 * sum_d [(t - m)^2 / v + log v + log 2pi]
    Returns (loss, d_mean, d_log_var).
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    B = mean.shape[0]
    inv_var = np.exp(-log_var)
    diff = mean - target
    loss = 0.5 * float(np.sum(diff * diff * inv_var + log_var + LOG_2PI)) / B
    d_mean = diff * inv_var / B
    d_log_var = 0.5 * (1.0 - diff * diff * inv_var) / B
    return loss, d_mean, d_log_var


class Pnn:
    """Probabilistic net: one trunk predicting mean and log-variance.

    The trunk output has 2 * out_dim units; the second half is soft-clamped
    into [LOG_VAR_MIN, LOG_VAR_MAX] so the NLL cannot collapse.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int], stream: RandomStream):
        self.out_dim = out_dim
        self.net = DenseNet(
            [in_dim, *hidden, 2 * out_dim], hidden_activation="swish", stream=stream
        )

    def forward(self, X: np.ndarray):
        raw = self.net.forward(X)
        mean = raw[:, : self.out_dim]
        log_var = soft_clamp_log_var(raw[:, self.out_dim :])
        if not np.all(np.isfinite(mean)):
            raise FloatingPointError("non-finite PNN activations")
        return mean, log_var

    def nll_loss(self, X: np.ndarray, target: np.ndarray):
        """NLL of the batch plus gradients w.r.t. all trunk parameters."""
        raw, cache = self.net.forward_cached(X)
        mean = raw[:, : self.out_dim]
        raw_lv = raw[:, self.out_dim :]
        log_var = soft_clamp_log_var(raw_lv)
        loss, d_mean, d_lv = gaussian_nll(mean, log_var, target)
        d_raw = np.concatenate([d_mean, d_lv * _soft_clamp_grad(raw_lv)], axis=1)
        grads, _ = self.net.backward(cache, d_raw)
        return loss, grads


# ---------------------------------------------------------------------------
# Lipschitz-bounded barrier network


def power_iteration(W: np.ndarray, u: np.ndarray, n_iter: int):
    """Estimate the spectral norm of W; returns (sigma, updated u)."""
    v = None
    for _ in range(max(n_iter, 1)):
        v = u @ W
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u
        v /= nv
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, u
        u /= nu
    return float(u @ W @ v), u


class LipschitzCbf:
    """Scalar barrier net with a certified global Lipschitz bound.

    Hidden and final activations are tanh (1-Lipschitz), so the product of
    the per-layer weight operator norms bounds the network's global Lipschitz
    constant. After every optimizer step ``renormalize`` projects each weight
    matrix onto its spectral-norm budget; the budgets multiply to the target
    bound. Output lies in (-1, 1), so the barrier is bounded by C_h = 1.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: Sequence[int] = (128, 128, 128),
        lipschitz_bound: float = 1.0,
        stream: RandomStream | None = None,
    ):
        stream = stream if stream is not None else RandomStream(0)
        self.lipschitz_bound = float(lipschitz_bound)
        self.output_bound = 1.0
        self.net = DenseNet(
            [in_dim, *hidden, 1],
            hidden_activation="tanh",
            output_activation="tanh",
            stream=stream.child("net"),
        )
        n = self.net.n_layers
        self.layer_budget = self.lipschitz_bound ** (1.0 / n)
        self._u = [
            np.asarray(stream.child("u", i).normal(size=w.shape[0]), dtype=np.float64)
            for i, w in enumerate(self.net.weights)
        ]
        for u in self._u:
            u /= np.linalg.norm(u)
        self.certified_norms = self.renormalize()

    def renormalize(self, n_iter: int = 30) -> np.ndarray:
        """Project every weight matrix onto its spectral-norm budget.

        Power iteration converges to the true norm from below, so after the
        first rescale the estimate is re-run and the scaling repeated until
        the measured norm sits within the budget. Returns the certified
        per-layer norms (each <= layer_budget).
        """
        certified = np.empty(self.net.n_layers)
        for i, W in enumerate(self.net.weights):
            u = self._u[i]
            sigma, u = power_iteration(W, u, n_iter)
            for _ in range(8):
                if sigma <= self.layer_budget:
                    break
                W *= self.layer_budget / sigma
                sigma, u = power_iteration(W, u, 10)
            else:
                # pathological non-convergence: force the budget
                W *= self.layer_budget / max(sigma, self.layer_budget)
                sigma = self.layer_budget
            self._u[i] = u
            certified[i] = sigma
        self.certified_norms = certified
        return certified

    def value(self, X: np.ndarray) -> np.ndarray:
        return self.net.forward(X)[:, 0]

    def value_cached(self, X: np.ndarray):
        out, cache = self.net.forward_cached(X)
        return out[:, 0], cache

    def backward(self, cache, d_value: np.ndarray):
        return self.net.backward(cache, np.asarray(d_value)[:, None])


# ---------------------------------------------------------------------------
# binary safety classifier


def bce_loss_from_prob(prob, labels):
    """Binary cross entropy, averaged; returns (loss, d_preact).

    d_preact is the gradient w.r.t. the sigmoid pre-activation, which is the
    numerically stable form (p - y) / B.
    """
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    B = prob.shape[0]
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    loss = -float(np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))) / B
    d_preact = (prob - labels)[:, None] / B
    return loss, d_preact


class SafetyClassifier:
    """Sigmoid-output net predicting the probability a state is unsafe.

    Label convention: 1 = unsafe, 0 = safe, so a thresholded output can be
    used directly as a collision-penalty trigger.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int] = (64, 64), stream=None):
        self.net = DenseNet(
            [in_dim, *hidden, 1],
            hidden_activation="swish",
            output_activation="sigmoid",
            stream=stream if stream is not None else RandomStream(0),
        )

    def prob(self, X: np.ndarray) -> np.ndarray:
        return self.net.forward(X)[:, 0]

    def bce(self, X: np.ndarray, labels: np.ndarray):
        out, cache = self.net.forward_cached(X)
        loss, d_pre = bce_loss_from_prob(out[:, 0], labels)
        grads, _ = self.net.backward(cache, d_pre, d_out_is_preact=True)
        return loss, grads


# ---------------------------------------------------------------------------
# checkpoint format
#
# Binary layout (little endian):
#   magic   4 bytes  b"SMCK"
#   version uint32   currently 1
#   hlen    uint32   header length in bytes
#   header  JSON     {"kind": ..., "meta": {...},
#                     "arrays": [[name, [shape...]], ...]}
#   body             float64 little-endian arrays, concatenated in header order

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    order = sorted(arrays)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [[k, list(arrays[k].shape)] for k in order],
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        f.write(raw)
        for k in order:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return header["kind"], header["meta"], arrays
