"""Small dense feedforward networks with exact reverse-mode gradients.

Everything operates on float64 numpy arrays. Inputs may carry arbitrary
leading batch axes; the last axis is the feature axis. Biases may also carry
leading axes (e.g. per-response random-effect offsets) as long as they
broadcast against the pre-activations.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ConfigError

GELU_SCALE = 1.702
ACTIVATIONS = ("gelu", "identity")


def sigmoid(v):
    """Logistic sigmoid as ``(1 + tanh(v / 2)) / 2``; saturates instead of overflowing."""
    out = np.multiply(v, 0.5, dtype=np.float64)
    if out.ndim == 0:
        return 0.5 + 0.5 * np.tanh(out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def gelu(v):
    """Sigmoid approximation of the Gaussian error linear unit, ``v * sigmoid(1.702 v)``."""
    v = np.asarray(v, dtype=np.float64)
    return v * sigmoid(GELU_SCALE * v)


def gelu_grad(v, s=None):
    """Derivative of :func:`gelu`; ``s`` may supply a cached ``sigmoid(1.702 v)``."""
    v = np.asarray(v, dtype=np.float64)
    if s is None:
        s = sigmoid(GELU_SCALE * v)
    out = 1.0 - s
    out *= v
    out *= GELU_SCALE
    out += 1.0
    out *= s
    return out


def softplus(v):
    return np.logaddexp(0.0, v)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class LayerParams:
    """Weights ``(D_out, D_in)``, biases ``(..., D_out)`` and an activation name."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ConfigError(f"weights must be a 2-d matrix with >= 1 row, got {self.weights.shape}")
        if self.biases.shape[-1:] != self.weights.shape[:1]:
            raise ConfigError(
                f"bias width {self.biases.shape} does not match weight rows {self.weights.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def width(self):
        return self.weights.shape[0]

    @property
    def fan_in(self):
        return self.weights.shape[1]


@dataclass
class DropoutMask:
    """Keep indicators for each hidden layer of one network.

    ``keep[l]`` must broadcast against the post-activation of hidden layer
    ``l``: shape ``(width,)`` freezes one mask for every row, a full
    ``(..., width)`` array gives every row its own mask.
    """

    keep: List[np.ndarray]
    rate: float

    @property
    def scale(self):
        return 1.0 / (1.0 - self.rate)

    def factors(self):
        s = self.scale
        return [k * s for k in self.keep]


@dataclass
class Trace:
    """Activation trace of one forward pass."""

    inputs: np.ndarray
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)
    dropout: Optional[List[np.ndarray]] = None
    gates: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def output(self):
        return self.post[-1]


@dataclass
class GradientBuffer:
    """Gradients of a scalar with respect to each layer and to the network input."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray


def init_layers(sizes, rng, hidden_activation="gelu", output_activation="identity"):
    """Glorot-uniform initialised layers for widths ``sizes = [D0, D1, ..., DL]``."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(LayerParams(w, np.zeros(fan_out), act))
    return layers


def _activate(name, v):
    """Activation output and, for gelu, the sigmoid gate reused by the backward pass."""
    if name == "gelu":
        gate = sigmoid(GELU_SCALE * v)
        return v * gate, gate
    return v, None


def ffn_forward(layers: Sequence[LayerParams], inputs, masks: Optional[DropoutMask] = None) -> Trace:
    """Run the recursion ``f_l = act_l(W_l f_{l-1} + b_l)``.

    With ``masks``, each hidden post-activation is multiplied by its keep
    indicators times ``1 / (1 - rate)``. The output layer is never masked.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if not layers:
        raise ConfigError("network has no layers")
    if x.shape[-1] != layers[0].fan_in:
        raise ConfigError(f"input width {x.shape[-1]} != expected {layers[0].fan_in}")
    factors = None
    if masks is not None:
        if len(masks.keep) != len(layers) - 1:
            raise ConfigError(
                f"dropout mask covers {len(masks.keep)} layers, network has {len(layers) - 1} hidden")
        factors = masks.factors()
    trace = Trace(inputs=x, dropout=factors)
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.fan_in:
            raise ConfigError(f"layer {i}: input width {h.shape[-1]} != {layer.fan_in}")
        pre = h @ layer.weights.T + layer.biases
        post, gate = _activate(layer.activation, pre)
        if factors is not None and i < len(layers) - 1:
            if factors[i].shape[-1] != layer.width:
                raise ConfigError(f"layer {i}: mask width {factors[i].shape[-1]} != {layer.width}")
            post *= factors[i]
        trace.pre.append(pre)
        trace.post.append(post)
        trace.gates.append(gate)
        h = post
    return trace


def sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def ffn_backward(layers: Sequence[LayerParams], trace: Trace, upstream) -> GradientBuffer:
    """Gradients of ``<upstream, output>`` with dropout factors held fixed."""
    if len(trace.pre) != len(layers):
        raise ConfigError(f"trace has {len(trace.pre)} layers, network has {len(layers)}")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ConfigError(f"upstream shape {g.shape} != output shape {trace.output.shape}")
    wgrads = [None] * len(layers)
    bgrads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if trace.dropout is not None and i < len(layers) - 1:
            g = g * trace.dropout[i]
        if layer.activation == "gelu":
            gate = trace.gates[i] if trace.gates else None
            dg = gelu_grad(trace.pre[i], gate)
            dg *= g
            g = dg
        h_prev = trace.inputs if i == 0 else trace.post[i - 1]
        if h_prev.shape[:-1] != g.shape[:-1]:
            h_prev = np.broadcast_to(h_prev, g.shape[:-1] + h_prev.shape[-1:])
        g2 = g.reshape(-1, layer.width)
        wgrads[i] = g2.T @ h_prev.reshape(-1, layer.fan_in)
        bgrads[i] = sum_to_shape(g, layer.biases.shape)
        g = g @ layer.weights
    return GradientBuffer(wgrads, bgrads, g)


def sample_dropout_mask(rate, widths, rng, shape=()) -> DropoutMask:
    """Independent Bernoulli(1 - rate) keep indicators for each width in ``widths``.

    ``shape`` gives the leading axes of every indicator array; the default
    ``()`` yields one shared mask per unit.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    shape = tuple(shape)
    if rate == 0.0:
        keep = [np.ones(shape + (w,)) for w in widths]
    else:
        keep = [(rng.random(shape + (w,), dtype=np.float32) >= rate).astype(np.float64)
                for w in widths]
    return DropoutMask(keep, float(rate))


def l2_penalty(layers: Sequence[LayerParams], strength):
    """``strength`` times the mean squared weight (biases excluded).

    Returns the penalty and its gradient with respect to each weight matrix.
    """
    if strength < 0:
        raise ConfigError("L2 strength must be nonnegative")
    count = sum(layer.weights.size for layer in layers)
    if count == 0 or strength == 0:
        return 0.0, [np.zeros_like(layer.weights) for layer in layers]
    total = sum(float(np.sum(layer.weights ** 2)) for layer in layers)
    grads = [2.0 * strength * layer.weights / count for layer in layers]
    return strength * total / count, grads
