"""Per-term feedforward networks: triangle widths, forward pass, backprop.

Hidden widths shrink linearly from the first hidden layer toward the
single output neuron: layer l of L has width round(first * (L-l+1) / L).
Gradients are exact analytic expressions; there is no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericOverflowError

ACTIVATIONS = ("leaky_relu", "linear")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 1
    hidden_layers: int = 2
    first_hidden_width: int = 20
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_layers < 0 or self.first_hidden_width < 1:
            raise ConfigError("mlp dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def hidden_widths(self) -> list[int]:
        n = self.hidden_layers
        # round half up so the published (first, first/2, ...) patterns hold
        return [
            max(1, int(np.floor(self.first_hidden_width * (n - l + 1) / n + 0.5)))
            for l in range(1, n + 1)
        ]


@dataclass
class MlpParams:
    """Weights/biases per layer; the final layer is linear with one unit."""

    weights: list = field(default_factory=list)  # (out, in) matrices
    biases: list = field(default_factory=list)  # (out,) vectors
    activations: list = field(default_factory=list)  # per layer id
    leaky_slope: float = 0.01

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            leaky_slope=self.leaky_slope,
        )


def init_glorot(cfg: MlpConfig) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic for a given seed."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    widths = [cfg.input_dim] + cfg.hidden_widths() + [1]
    params = MlpParams(leaky_slope=cfg.leaky_slope)
    n_layers = len(widths) - 1
    for l in range(n_layers):
        fan_in, fan_out = widths[l], widths[l + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params.weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        params.biases.append(np.zeros(fan_out))
        params.activations.append(cfg.activation if l < n_layers - 1 else "linear")
    return params


def _activate(z: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "linear":
        return z
    out = z.copy()
    out[z < 0.0] *= slope
    return out


def _activate_grad(z: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "linear":
        return np.ones_like(z)
    # the kink at exactly zero takes the positive branch
    grad = np.ones_like(z)
    grad[z < 0.0] = slope
    return grad


def forward(params: MlpParams, x: np.ndarray):
    """Evaluate a batch; returns (outputs (n,), cache for backward)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, params.input_dim)
    inputs = [a]
    pre = []
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericOverflowError(f"non-finite value in layer {l}")
        pre.append(z)
        a = _activate(z, params.activations[l], params.leaky_slope)
        inputs.append(a)
    return a[:, 0], (inputs, pre)


def backward(params: MlpParams, cache, upstream: np.ndarray):
    """Backpropagate dL/doutput through the cached forward pass.

    Returns (weight grads, bias grads, input grads (n, input_dim)); each
    grad list mirrors params.weights / params.biases.
    """
    inputs, pre = cache
    delta = np.asarray(upstream, dtype=float).reshape(-1, 1)
    w_grads = [None] * len(params.weights)
    b_grads = [None] * len(params.biases)
    for l in range(len(params.weights) - 1, -1, -1):
        delta = delta * _activate_grad(pre[l], params.activations[l], params.leaky_slope)
        w_grads[l] = delta.T @ inputs[l]
        b_grads[l] = delta.sum(axis=0)
        delta = delta @ params.weights[l]
    return w_grads, b_grads, delta


def eval_with_grad(params: MlpParams, x, upstream: float = 1.0):
    """Single-row contract: output plus exact parameter and input gradients."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != params.input_dim:
        raise ConfigError(
            f"input has dimension {x.shape[1]}, network expects {params.input_dim}"
        )
    out, cache = forward(params, x)
    w_grads, b_grads, input_grad = backward(params, cache, np.array([upstream]))
    grads = MlpParams(
        weights=w_grads,
        biases=b_grads,
        activations=list(params.activations),
        leaky_slope=params.leaky_slope,
    )
    return float(out[0]), grads, input_grad[0]


def min_preactivation_margin(params: MlpParams, x) -> float:
    """Smallest |pre-activation| over leaky-relu units; inf if none.

    Finite-difference gradient checks are only valid away from the
    activation kink, so tests use this to resample awkward inputs.
    """
    _, (_, pre) = forward(params, np.asarray(x, dtype=float))
    margins = [
        np.min(np.abs(z))
        for z, kind in zip(pre, params.activations)
        if kind == "leaky_relu" and z.size
    ]
    return float(min(margins)) if margins else float("inf")
