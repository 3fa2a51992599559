"""Multilayer perceptrons on the autodiff core.

Two evaluation paths are provided everywhere: ``__call__`` builds the
autodiff graph for training, ``forward_np`` runs the same arithmetic on raw
arrays for rollouts and samplers where gradients are never needed. The two
paths share weights and must agree bit for bit; the test suite checks this.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import RngStream
from .tensor import Parameter, Tensor, layer_norm

__all__ = ["Mlp", "EnsembleMlp", "Linear", "sinusoidal_embedding",
           "mlp_forward", "mlp_backward"]

_MISH = "mish"
_RELU = "relu"
_TANH = "tanh"
_IDENT = "identity"
_ACTS = (_MISH, _RELU, _TANH, _IDENT)


def _act_graph(x: Tensor, name: str) -> Tensor:
    if name == _MISH:
        return x.mish()
    if name == _RELU:
        return x.relu()
    if name == _TANH:
        return x.tanh()
    return x


def _act_np(x: np.ndarray, name: str) -> np.ndarray:
    if name == _MISH:
        return x * np.tanh(np.logaddexp(0.0, x))
    if name == _RELU:
        return np.maximum(x, 0.0)
    if name == _TANH:
        return np.tanh(x)
    return x


def _init_linear(rng: RngStream, fan_in: int, fan_out: int):
    # torch-style Kaiming-uniform bounds keep early activations well scaled
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return Parameter(w), Parameter(b)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: RngStream):
        self.w, self.b = _init_linear(rng, fan_in, fan_out)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data

    @property
    def params(self):
        return [self.w, self.b]


class Mlp:
    """Plain MLP; ``sizes`` lists layer widths input first, output last."""

    def __init__(self, sizes, rng: RngStream, activation: str = _MISH,
                 out_activation: str = _IDENT):
        if activation not in _ACTS or out_activation not in _ACTS:
            raise ValueError(f"unknown activation; expected one of {_ACTS}")
        if len(sizes) < 2:
            raise ValueError("Mlp needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.out_activation = out_activation
        self.layers = [Linear(a, b, rng.derive(i))
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return mlp_forward(self.params, x, self.activation, self.out_activation)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer.forward_np(x)
            x = _act_np(x, self.out_activation if i == last else self.activation)
        return x


def mlp_forward(params, x: Tensor, activation: str = _MISH,
                out_activation: str = _IDENT) -> Tensor:
    """Run the (w, b) parameter list as an MLP over ``x`` on the graph.

    Hidden layers use ``activation``; the output layer defaults to identity
    (unsquashed), matching ``Mlp``.
    """
    if len(params) < 2 or len(params) % 2:
        raise ValueError("params must be a flat [w0, b0, w1, b1, ...] list")
    n_layers = len(params) // 2
    for i in range(n_layers):
        w = params[2 * i]
        if x.data.shape[-1] != w.data.shape[0]:
            raise ValueError(
                f"layer {i}: input width {x.data.shape[-1]} does not match "
                f"weight shape {w.data.shape}")
        x = x @ w + params[2 * i + 1]
        x = _act_graph(x, out_activation if i == n_layers - 1 else activation)
    return x


def mlp_backward(loss: Tensor) -> None:
    """Propagate gradients of a scalar loss into its parameters."""
    loss.backward()


class EnsembleMlp:
    """E parallel MLPs evaluated as stacked [E, B, *] matmuls.

    Used for critic ensembles: one batched matmul per layer instead of E
    separate ones. Optional LayerNorm after every hidden activation.
    """

    def __init__(self, n_members: int, sizes, rng: RngStream,
                 activation: str = _RELU, use_layer_norm: bool = True):
        if activation not in _ACTS:
            raise ValueError(f"unknown activation; expected one of {_ACTS}")
        self.n_members = int(n_members)
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.use_layer_norm = use_layer_norm
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        self.ln_gains: list[Parameter] = []
        self.ln_biases: list[Parameter] = []
        n_hidden = len(sizes) - 2
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            r = rng.derive(i)
            bound = 1.0 / math.sqrt(a)
            self.weights.append(Parameter(
                r.uniform(-bound, bound, size=(n_members, a, b))))
            self.biases.append(Parameter(
                r.uniform(-bound, bound, size=(n_members, 1, b))))
            if use_layer_norm and i < n_hidden:
                self.ln_gains.append(Parameter(np.ones((n_members, 1, b))))
                self.ln_biases.append(Parameter(np.zeros((n_members, 1, b))))

    @property
    def params(self):
        out = []
        for i in range(len(self.weights)):
            out += [self.weights[i], self.biases[i]]
            if i < len(self.ln_gains):
                out += [self.ln_gains[i], self.ln_biases[i]]
        return out

    def __call__(self, x) -> Tensor:
        """x: [B, in] or [E, B, in]; returns [E, B, out]."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            x = x @ self.weights[i] + self.biases[i]
            if i < last:
                x = _act_graph(x, self.activation)
                if self.use_layer_norm:
                    x = layer_norm(x, self.ln_gains[i], self.ln_biases[i])
        return x

    def member(self, i: int, x: Tensor) -> Tensor:
        """Run only member ``i``; cheaper when one or two heads are needed."""
        last = len(self.weights) - 1
        for k in range(len(self.weights)):
            x = x @ self.weights[k].index0(i) + self.biases[k].index0(i).reshape(-1)
            if k < last:
                x = _act_graph(x, self.activation)
                if self.use_layer_norm:
                    x = layer_norm(x, self.ln_gains[k].index0(i).reshape(-1),
                                   self.ln_biases[k].index0(i).reshape(-1))
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        return ensemble_forward_np(self.raw_params(), x, self.activation,
                                   self.use_layer_norm)

    def raw_params(self):
        return [p.data for p in self.params]

    def copy_raw(self):
        return [p.data.copy() for p in self.params]


def ensemble_forward_np(raw, x: np.ndarray, activation: str,
                        use_layer_norm: bool) -> np.ndarray:
    """EnsembleMlp.forward on a raw array list (used for frozen targets)."""
    per = 4 if use_layer_norm else 2
    n_layers = (len(raw) + (2 if use_layer_norm else 0)) // per
    i = 0
    layer = 0
    while i < len(raw):
        w, b = raw[i], raw[i + 1]
        x = np.matmul(x, w) + b
        i += 2
        if layer < n_layers - 1:
            x = _act_np(x, activation)
            if use_layer_norm:
                g, bb = raw[i], raw[i + 1]
                i += 2
                mu = x.mean(axis=-1, keepdims=True)
                var = x.var(axis=-1, keepdims=True)
                x = (x - mu) / np.sqrt(var + 1e-6) * g + bb
        layer += 1
    return x


def sinusoidal_embedding(t: np.ndarray, dim: int, max_freq: float = 1000.0) -> np.ndarray:
    """Map scalars in [0, 1] to [sin, cos] features across log-spaced
    frequencies; gives the nets resolution at both ends of the range."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
