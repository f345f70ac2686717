"""Named-layer model IR, sequential forward pass, file round trip, toy builder.

A model is an ordered list of layers. Linear layers compose sequentially;
AttentionQK layers tap the running activation and contribute their logit map
``(Wq a)^T (Wk a)`` as an extra output block (no softmax / value path; the
invariants of interest live entirely in the logits).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorfile
from .core import Rng, as_matrix, check_finite
from .errors import DomainError, ShapeError


@dataclass
class Linear:
    name: str
    weight: np.ndarray  # d_out x d_in
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = as_matrix(self.weight, f"{self.name}.weight")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(
                    f"{self.name}: bias length {self.bias.shape} does not match "
                    f"d_out {self.weight.shape[0]}"
                )

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class AttentionQK:
    name: str
    wq: np.ndarray  # d_k x d_model
    wk: np.ndarray  # d_k x d_model

    def __post_init__(self):
        self.wq = as_matrix(self.wq, f"{self.name}.wq")
        self.wk = as_matrix(self.wk, f"{self.name}.wk")
        if self.wq.shape != self.wk.shape:
            raise ShapeError(
                f"{self.name}: wq shape {self.wq.shape} != wk shape {self.wk.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[0]


Layer = Linear | AttentionQK


@dataclass
class Model:
    layers: list[Layer]
    # Compensating transform applied to raw inputs before the first layer;
    # recorded by absorption when a boundary layer carries a scale/shift.
    input_scale: np.ndarray | None = None
    input_shift: np.ndarray | None = None
    _by_name: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {}
        for layer in self.layers:
            if layer.name in self._by_name:
                raise DomainError(f"duplicate layer name {layer.name!r}")
            if ":" in layer.name:
                raise DomainError(f"layer name {layer.name!r} must not contain ':'")
            self._by_name[layer.name] = layer
        # adjacent Linear layers must chain
        prev = None
        for layer in self.layers:
            if isinstance(layer, Linear):
                if prev is not None and layer.d_in != prev.d_out:
                    raise ShapeError(
                        f"layer {layer.name!r} expects d_in={layer.d_in} but "
                        f"{prev.name!r} produces d_out={prev.d_out}"
                    )
                prev = layer

    def layer(self, name: str) -> Layer:
        return self._by_name[name]

    @property
    def topology(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    def copy(self) -> "Model":
        out = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                out.append(Linear(layer.name, layer.weight.copy(),
                                  None if layer.bias is None else layer.bias.copy()))
            else:
                out.append(AttentionQK(layer.name, layer.wq.copy(), layer.wk.copy()))
        return Model(out,
                     None if self.input_scale is None else self.input_scale.copy(),
                     None if self.input_shift is None else self.input_shift.copy())


def forward(model: Model, x, collect_inputs: bool = False):
    """Sequential forward pass on a batch whose columns are samples.

    Returns the final activation with any attention logit blocks stacked
    below it. With ``collect_inputs=True`` also returns a dict mapping each
    layer name to the activation it consumed.
    """
    x = as_matrix(x, "x")
    if x.shape[0] != model.d_in:
        raise ShapeError(
            f"input has {x.shape[0]} rows, first layer {model.layers[0].name!r} "
            f"expects {model.d_in}"
        )
    a = x
    if model.input_shift is not None:
        a = a - model.input_shift[:, None]
    if model.input_scale is not None:
        a = a / model.input_scale[:, None]
    inputs: dict[str, np.ndarray] = {}
    logits: list[np.ndarray] = []
    for layer in model.layers:
        if a.shape[0] != layer.d_in:
            raise ShapeError(
                f"activation has {a.shape[0]} rows at layer {layer.name!r} "
                f"expecting {layer.d_in}"
            )
        if collect_inputs:
            inputs[layer.name] = a
        if isinstance(layer, Linear):
            a = layer.weight @ a
            if layer.bias is not None:
                a = a + layer.bias[:, None]
        else:
            q = layer.wq @ a
            k = layer.wk @ a
            logits.append(q.T @ k)
    out = np.vstack([a] + logits) if logits else a
    check_finite(out, "forward output")
    if collect_inputs:
        return out, inputs
    return out


def layer_inputs(model: Model, x) -> dict[str, np.ndarray]:
    """Per-layer input activations for a calibration batch."""
    _, inputs = forward(model, x, collect_inputs=True)
    return inputs


# --- file round trip ---------------------------------------------------------

_META_SCALE = "meta:input_scale"
_META_SHIFT = "meta:input_shift"


def save_model(model: Model, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for layer in model.layers:
        if isinstance(layer, Linear):
            tensors[f"linear:{layer.name}:weight"] = layer.weight
            if layer.bias is not None:
                tensors[f"linear:{layer.name}:bias"] = layer.bias
        else:
            tensors[f"attnqk:{layer.name}:wq"] = layer.wq
            tensors[f"attnqk:{layer.name}:wk"] = layer.wk
    if model.input_scale is not None:
        tensors[_META_SCALE] = model.input_scale
    if model.input_shift is not None:
        tensors[_META_SHIFT] = model.input_shift
    tensorfile.save_tensors(tensors, path)


def load_model(path) -> Model:
    tensors = tensorfile.load_tensors(path)
    layers: list[Layer] = []
    pending: dict[str, dict[str, np.ndarray]] = {}
    order: list[tuple[str, str]] = []
    input_scale = tensors.pop(_META_SCALE, None)
    input_shift = tensors.pop(_META_SHIFT, None)
    for key, arr in tensors.items():
        parts = key.split(":")
        if len(parts) != 3 or parts[0] not in ("linear", "attnqk"):
            raise DomainError(f"unrecognized tensor name {key!r} in model file")
        kind, name, part = parts
        if name not in pending:
            pending[name] = {}
            order.append((kind, name))
        pending[name][part] = arr
    for kind, name in order:
        parts = pending[name]
        if kind == "linear":
            layers.append(Linear(name, parts["weight"], parts.get("bias")))
        else:
            layers.append(AttentionQK(name, parts["wq"], parts["wk"]))
    return Model(layers, input_scale, input_shift)


# --- toy model ---------------------------------------------------------------

def _imbalanced(rng: Rng, d_out: int, d_in: int) -> np.ndarray:
    """Random weight with injected per-input-channel scale imbalance.

    Column factors are a permuted log-spaced grid over [0.1, 10], so the
    max/min column scale ratio is 100 by construction.
    """
    w = rng.normal((d_out, d_in)) / np.sqrt(d_in)
    factors = 10.0 ** np.linspace(-1.0, 1.0, d_in)
    return w * factors[rng.permutation(d_in)][None, :]


def build_toy_model(depth: int, d_model: int, d_hidden: int, seed: int) -> Model:
    """Deterministic stand-in for a transformer block stack.

    Per block: one AttentionQK pair (d_k = d_model) and two Linear layers
    d_model -> d_hidden -> d_model, all with seeded scale-imbalanced weights.
    """
    if depth < 1:
        raise DomainError(f"depth must be >= 1, got {depth}")
    if d_model < 2 or d_hidden < 2:
        raise DomainError("dims must be >= 2")
    rng = Rng(seed)
    layers: list[Layer] = []
    for b in range(depth):
        wq = _imbalanced(rng, d_model, d_model)
        wk = _imbalanced(rng, d_model, d_model)
        layers.append(AttentionQK(f"block{b}.attn", wq, wk))
        w1 = _imbalanced(rng, d_hidden, d_model)
        b1 = 0.1 * rng.normal(d_hidden)
        layers.append(Linear(f"block{b}.fc1", w1, b1))
        w2 = _imbalanced(rng, d_model, d_hidden)
        b2 = 0.1 * rng.normal(d_model)
        layers.append(Linear(f"block{b}.fc2", w2, b2))
    return Model(layers)
