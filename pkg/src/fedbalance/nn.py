"""Feed-forward classifier with analytic backpropagation and plain SGD.

The model is a stack of dense layers; every hidden layer uses a
non-negative activation (ReLU or sigmoid) and the final layer is linear,
followed by a softmax. The activations feeding the final layer and the
final layer's link-weight matrix are first-class citizens here because
the composition monitor reads per-class update signatures directly off
that Q x s weight block.

All arithmetic is float64: the count-estimation algebra downstream is
sensitive to cancellation and float32 destabilizes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

ACTIVATIONS = ("relu", "sigmoid", "identity")

MODEL_FORMAT_VERSION = 1


def _apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activation_derivative(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; entries are floored away from exact zero."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    np.maximum(p, 1e-300, out=p)
    return p


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"layer weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} inconsistent with weights {self.weights.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpModel:
    """Classifier whose last layer is linear (softmax applied outside it).

    Invariants: adjacent layer widths agree, hidden activations are
    non-negative functions, the last layer is identity, and every
    parameter is finite.
    """

    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_width != prev.out_width:
                raise ValueError(
                    f"layer widths disagree: {prev.out_width} feeds {cur.in_width}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "identity":
                raise ValueError("hidden layers must use a non-negative activation")
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer must be linear (identity activation)")
        if self.class_count < 2:
            raise ValueError("model needs at least two output classes")
        self._check_finite()

    def _check_finite(self) -> None:
        for i, layer in enumerate(self.layers):
            if not np.isfinite(layer.weights).all() or not np.isfinite(layer.bias).all():
                raise NumericError(f"non-finite parameter in layer {i}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_width

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_width

    @property
    def hidden_width(self) -> int:
        """Width of the activation vector feeding the final layer."""
        return self.layers[-1].in_width

    @property
    def last_layer(self) -> DenseLayer:
        return self.layers[-1]


@dataclass
class ModelSpec:
    input_dim: int
    hidden_widths: list[int]
    class_count: int
    hidden_activation: str = "relu"


@dataclass
class ForwardTrace:
    """Every intermediate needed to backpropagate a (batched) forward pass.

    Arrays are row-per-sample; a single feature vector becomes a batch of
    one. ``layer_inputs[l]`` is what layer ``l`` consumed, so the final
    entry is the hidden-layer output the last-layer analysis works on.
    """

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    probs: np.ndarray

    @property
    def hl_output(self) -> np.ndarray:
        return self.layer_inputs[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]


@dataclass
class GradientSet:
    """Per-layer parameter gradients, shape-congruent with their model."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    batch_size: int

    def check_finite(self) -> None:
        for i, (dw, db) in enumerate(zip(self.weight_grads, self.bias_grads)):
            if not np.isfinite(dw).all() or not np.isfinite(db).all():
                raise NumericError(f"non-finite gradient in layer {i}")


def forward(model: MlpModel, inputs: np.ndarray) -> ForwardTrace:
    """Run the classifier, keeping all intermediates.

    ``inputs`` may be one feature vector or a (n, d) batch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(
            f"input has shape {np.asarray(inputs).shape}, expected (*, {model.input_dim})"
        )
    layer_inputs: list[np.ndarray] = []
    pre_activations: list[np.ndarray] = []
    for layer in model.layers:
        layer_inputs.append(x)
        z = x @ layer.weights.T + layer.bias
        pre_activations.append(z)
        x = _apply_activation(layer.activation, z)
    return ForwardTrace(layer_inputs, pre_activations, softmax(pre_activations[-1]))


def last_layer_gradient(trace: ForwardTrace, true_class: int) -> np.ndarray:
    """Analytic cross-entropy gradient of the final layer's link weights.

    For one sample with softmax output f, true class p, and hidden output
    y, the (m, n) entry is (f_m - 1) * y_n on the true-class row and
    f_m * y_n elsewhere, i.e. outer(f - onehot(p), y). For a batch the
    per-sample gradients are averaged.
    """
    q = trace.probs.shape[1]
    if not 0 <= true_class < q:
        raise IndexError(f"class index {true_class} out of range for {q} classes")
    err = trace.probs.copy()
    err[:, true_class] -= 1.0
    return err.T @ trace.hl_output / trace.batch_size


def backward(
    model: MlpModel, trace: ForwardTrace, loss_grad_on_logits: np.ndarray
) -> GradientSet:
    """Chain-rule gradients for every parameter, averaged over the batch.

    ``loss_grad_on_logits`` holds per-sample d(loss)/d(logits); feeding
    ``probs - onehot`` reproduces the analytic cross-entropy gradients.
    """
    g = np.asarray(loss_grad_on_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    n = trace.batch_size
    if g.shape != (n, model.class_count):
        raise ValueError(
            f"loss gradient shape {g.shape} does not match ({n}, {model.class_count})"
        )
    if len(trace.layer_inputs) != len(model.layers) or any(
        x.shape[1] != layer.in_width
        for x, layer in zip(trace.layer_inputs, model.layers)
    ):
        raise ValueError("trace was not produced by this model")

    weight_grads: list[np.ndarray | None] = [None] * len(model.layers)
    bias_grads: list[np.ndarray | None] = [None] * len(model.layers)
    delta = g
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        weight_grads[l] = delta.T @ trace.layer_inputs[l] / n
        bias_grads[l] = delta.mean(axis=0)
        if l > 0:
            below = model.layers[l - 1]
            dx = delta @ layer.weights
            z = trace.pre_activations[l - 1]
            a = trace.layer_inputs[l]
            delta = dx * _activation_derivative(below.activation, z, a)
    return GradientSet(weight_grads, bias_grads, n)  # type: ignore[arg-type]


def sgd_step(model: MlpModel, grads: GradientSet, learning_rate: float) -> MlpModel:
    """One plain gradient-descent update; returns a new model value."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    if len(grads.weight_grads) != len(model.layers):
        raise ValueError("gradient set does not match model layout")
    grads.check_finite()
    layers = []
    for layer, dw, db in zip(model.layers, grads.weight_grads, grads.bias_grads):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ValueError("gradient shapes do not match model layout")
        layers.append(
            DenseLayer(
                layer.weights - learning_rate * dw,
                layer.bias - learning_rate * db,
                layer.activation,
            )
        )
    return MlpModel(layers)


def init_model(spec: ModelSpec, seed: int) -> MlpModel:
    """Deterministically initialize a model from its spec.

    Weights are uniform in +/- sqrt(6 / (fan_in + fan_out)); biases start
    at zero.
    """
    if spec.class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {spec.class_count}")
    if spec.input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got {spec.input_dim}")
    if any(w < 1 for w in spec.hidden_widths):
        raise ConfigError(f"hidden widths must be >= 1, got {spec.hidden_widths}")
    if spec.hidden_activation not in ("relu", "sigmoid"):
        raise ConfigError(f"hidden activation must be relu or sigmoid, got {spec.hidden_activation!r}")
    rng = np.random.default_rng(seed)
    widths = [spec.input_dim, *spec.hidden_widths, spec.class_count]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = "identity" if i == len(widths) - 2 else spec.hidden_activation
        layers.append(DenseLayer(weights, np.zeros(fan_out), activation))
    return MlpModel(layers)


def copy_model(model: MlpModel) -> MlpModel:
    return MlpModel(
        [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in model.layers]
    )


def parameters(model: MlpModel) -> list[np.ndarray]:
    """Flat list of parameter arrays (weights and bias per layer, in order)."""
    out: list[np.ndarray] = []
    for layer in model.layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def from_parameters(template: MlpModel, arrays: list[np.ndarray]) -> MlpModel:
    if len(arrays) != 2 * len(template.layers):
        raise ValueError("parameter list does not match model layout")
    layers = []
    for i, layer in enumerate(template.layers):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
            raise ValueError("parameter shapes do not match model layout")
        layers.append(DenseLayer(w.copy(), b.copy(), layer.activation))
    return MlpModel(layers)


def save_model(model: MlpModel, path) -> None:
    """Versioned binary snapshot; round-trips bit-exactly."""
    payload: dict[str, np.ndarray] = {
        "format_version": np.array(MODEL_FORMAT_VERSION, dtype=np.int64),
        "num_layers": np.array(len(model.layers), dtype=np.int64),
    }
    for i, layer in enumerate(model.layers):
        payload[f"weights_{i}"] = layer.weights
        payload[f"bias_{i}"] = layer.bias
        payload[f"activation_{i}"] = np.array(layer.activation)
    np.savez(path, **payload)


def load_model(path) -> MlpModel:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        n = int(data["num_layers"])
        layers = [
            DenseLayer(
                data[f"weights_{i}"], data[f"bias_{i}"], str(data[f"activation_{i}"])
            )
            for i in range(n)
        ]
    return MlpModel(layers)
