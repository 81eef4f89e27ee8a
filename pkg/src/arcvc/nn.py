"""Small dense networks with hand-written backprop and an Adam optimizer.

The networks here are deliberately tiny: a stack of affine layers with ReLU
between them and either a linear or a softmax head.  Parameters live in one
flat float64 vector so optimizers, gradient checks and checkpoints can treat
them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = "arcvc-mlp-params"
SNAPSHOT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised for malformed network, environment or run configuration."""


class TrainingError(RuntimeError):
    """Raised when optimisation produces non-finite values."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MLP:
    """Feed-forward network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ReLU. ``head`` is ``"linear"`` or ``"softmax"``.
    Inputs may be a single vector or a 2-D batch (one row per sample).
    """

    def __init__(self, sizes, head: str = "linear", params: np.ndarray | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigurationError(f"invalid layer sizes {sizes}")
        if head not in ("linear", "softmax"):
            raise ConfigurationError(f"unknown head {head!r}")
        self.sizes = sizes
        self.head = head
        n = self.num_params(sizes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {params.shape}")
        self.params = params.copy()

    @staticmethod
    def num_params(sizes) -> int:
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    @classmethod
    def initialized(cls, sizes, head: str = "linear", rng: np.random.Generator | None = None) -> MLP:
        """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        net = cls(sizes, head)
        chunks = []
        for a, b in zip(net.sizes[:-1], net.sizes[1:]):
            bound = 1.0 / np.sqrt(a)
            chunks.append(rng.uniform(-bound, bound, size=(a + 1) * b))
        net.params = np.concatenate(chunks)
        return net

    def copy(self) -> MLP:
        return MLP(self.sizes, self.head, self.params)

    def layers(self, params: np.ndarray | None = None):
        """Yield ``(W, b)`` views into the flat vector; W has shape (in, out)."""
        p = self.params if params is None else params
        offset = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = p[offset:offset + a * b].reshape(a, b)
            offset += a * b
            bias = p[offset:offset + b]
            offset += b
            yield W, bias

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ConfigurationError(
                f"input of shape {x.shape} does not match input size {self.sizes[0]}"
            )
        return X, single

    def _forward(self, X: np.ndarray):
        acts = [X]
        h = X
        layers = list(self.layers())
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            if i < len(layers) - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            acts.append(h)
        return acts

    def logits(self, x) -> np.ndarray:
        X, single = self._check_input(x)
        out = self._forward(X)[-1]
        return out[0] if single else out

    def forward(self, x) -> np.ndarray:
        X, single = self._check_input(x)
        out = self._forward(X)[-1]
        if self.head == "softmax":
            out = softmax(out)
        return out[0] if single else out

    __call__ = forward

    def backward(self, x, output_gradient, wrt: str = "output") -> np.ndarray:
        """Gradient of ``sum(output * output_gradient)`` w.r.t. the parameters.

        For a batch the per-row contributions are summed.  With ``wrt="logits"``
        the cotangent is applied to the pre-softmax logits instead, which is the
        cheap route for log-softmax scores.
        """
        X, single = self._check_input(x)
        G = np.asarray(output_gradient, dtype=np.float64)
        G = G[None, :] if single else G
        if G.shape != (X.shape[0], self.sizes[-1]):
            raise ConfigurationError(f"output gradient shape {G.shape} does not match output")
        acts = self._forward(X)
        if self.head == "softmax" and wrt == "output":
            p = softmax(acts[-1])
            G = p * (G - (G * p).sum(axis=1, keepdims=True))
        layers = list(self.layers())
        grads = []
        delta = G
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in = acts[i]
            grads.append((h_in.T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W.T) * (acts[i] > 0.0)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat)


@dataclass
class AdamState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam *descent* step; returns new params, updates state in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape):
        raise ConfigurationError("params, grad and optimizer state differ in length")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient passed to Adam")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_params(net: MLP, path) -> None:
    """Text snapshot: magic/version line, sizes, head, then one value per line."""
    lines = [
        f"# {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}",
        "sizes " + " ".join(str(s) for s in net.sizes),
        f"head {net.head}",
        f"count {net.params.size}",
    ]
    lines.extend(repr(float(v)) for v in net.params)
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> MLP:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}":
        raise ConfigurationError(f"{path}: not a v{SNAPSHOT_VERSION} parameter snapshot")
    sizes = [int(s) for s in lines[1].split()[1:]]
    head = lines[2].split()[1]
    count = int(lines[3].split()[1])
    values = np.array([float(v) for v in lines[4:4 + count]])
    return MLP(sizes, head, values)
