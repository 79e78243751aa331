"""Desk-scale reverse-mode autodiff with freezable parameters.

Values wrap float64 numpy arrays and record the operation graph on the fly.
Gradient buffers are allocated only for nodes on a path from a trainable
parameter to the loss, which makes the number of live parameter-gradient
buffers a direct memory proxy for block-frozen training schemes.

The scale/shift fit inside the disparity loss is treated as a constant
during backward. Because the fit is the exact least-squares minimizer, the
partial gradient at fixed (s, t) equals the total gradient of the minimized
loss, so finite differences against the full recomputation still agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .alignment import fit_scale_shift
from .errors import MissingGradients, NonScalarLoss, ShapeMismatch

BCE_CLAMP = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """Node in the autodiff graph: float64 payload plus optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, parents: tuple = (), op: str = "leaf",
                 requires_grad: Optional[bool] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        other = other if isinstance(other, Value) else Value(other)
        out = Value(self.data + other.data, (self, other), "add")

        def back():
            if self.requires_grad:
                self.grad += _unbroadcast(out.grad, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(out.grad, other.data.shape)

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Value) else Value(other)
        return self + (-other)

    def __rsub__(self, other):
        return Value(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Value) else Value(other)
        out = Value(self.data * other.data, (self, other), "mul")

        def back():
            if self.requires_grad:
                self.grad += _unbroadcast(out.grad * other.data, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(out.grad * self.data, other.data.shape)

        out._backward = back
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        if self.data.shape[-1] != other.data.shape[0]:
            raise ShapeMismatch(
                f"matmul {self.data.shape} @ {other.data.shape}"
            )
        out = Value(self.data @ other.data, (self, other), "matmul")

        def back():
            if self.requires_grad:
                self.grad += out.grad @ other.data.T
            if other.requires_grad:
                other.grad += self.data.T @ out.grad

        out._backward = back
        return out

    # elementwise nonlinearities

    def tanh(self):
        y = np.tanh(self.data)
        out = Value(y, (self,), "tanh")

        def back():
            if self.requires_grad:
                self.grad += out.grad * (1.0 - y * y)

        out._backward = back
        return out

    def sigmoid(self):
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Value(y, (self,), "sigmoid")

        def back():
            if self.requires_grad:
                self.grad += out.grad * y * (1.0 - y)

        out._backward = back
        return out

    def log(self):
        out = Value(np.log(self.data), (self,), "log")

        def back():
            if self.requires_grad:
                self.grad += out.grad / self.data

        out._backward = back
        return out

    def clamp(self, lo: float, hi: float):
        out = Value(np.clip(self.data, lo, hi), (self,), "clamp")

        def back():
            if self.requires_grad:
                inside = (self.data > lo) & (self.data < hi)
                self.grad += out.grad * inside

        out._backward = back
        return out

    # reductions

    def sum(self):
        out = Value(self.data.sum(), (self,), "sum")

        def back():
            if self.requires_grad:
                self.grad += np.broadcast_to(out.grad, self.data.shape)

        out._backward = back
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def backward(self):
        backward(self)


def backward(loss: Value) -> None:
    """Populate gradients for every Value on a trainable path to the loss.

    Each call (re)initializes the gradients of exactly the nodes it touches;
    frozen parameters and constants never receive a buffer.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    order: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    if not order:
        return
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


@dataclass(frozen=True)
class ParamSlot:
    """Position of one parameter tensor in the model's canonical ordering."""

    index: int
    shape: tuple[int, ...]
    requires_grad: bool


class DenseLayer:
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        scale = 1.0 / math.sqrt(in_dim)
        self.weight = Value(rng.normal(0.0, scale, (in_dim, out_dim)),
                            requires_grad=True)
        self.bias = Value(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Value) -> Value:
        return x @ self.weight + self.bias

    def params(self) -> list[Value]:
        return [self.weight, self.bias]


def _stack(rng, dims: Sequence[int]) -> list[DenseLayer]:
    return [DenseLayer(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def _run_trunk(layers: list[DenseLayer], x: Value) -> Value:
    for layer in layers:
        x = layer(x).tanh()
    return x


def _run_head(layers: list[DenseLayer], x: Value) -> Value:
    for layer in layers[:-1]:
        x = layer(x).tanh()
    return layers[-1](x)


class ToyModel:
    """Shared-trunk dual-head dense model, or two independent trunks (v1).

    v2 and v3 are built identically (same parameter count, ordering and
    random draws for the same seed); v3 differs only in that its trunk is
    meant to be initialized by :func:`pretrain_trunk` before joint training.
    Canonical parameter ordering is construction order: trunk, disparity
    head, (second trunk for v1 in place of sharing), segmentation head.
    """

    VARIANTS = ("v1", "v2", "v3")

    def __init__(self, variant: str, in_dim: int = 3, hidden_dim: int = 8,
                 trunk_layers: int = 1, head_layers: int = 1, seed: int = 0):
        if variant not in self.VARIANTS:
            raise ValueError(f"variant must be one of {self.VARIANTS}")
        self.variant = variant
        self.in_dim = in_dim
        rng = np.random.default_rng(seed)
        trunk_dims = [in_dim] + [hidden_dim] * trunk_layers
        head_dims = [hidden_dim] * head_layers + [1]
        self.trunk = _stack(rng, trunk_dims)
        self.disp_head = _stack(rng, head_dims)
        if variant == "v1":
            self.trunk_b = _stack(rng, trunk_dims)
        else:
            self.trunk_b = None
        self.seg_head = _stack(rng, head_dims)
        self._params: list[Value] = []
        for layer in self.trunk:
            self._params += layer.params()
        for layer in self.disp_head:
            self._params += layer.params()
        if self.trunk_b is not None:
            for layer in self.trunk_b:
                self._params += layer.params()
        self._seg_start = len(self._params)
        for layer in self.seg_head:
            self._params += layer.params()

    def parameters(self) -> list[Value]:
        return list(self._params)

    def param_slots(self) -> list[ParamSlot]:
        return [ParamSlot(i, p.data.shape, p.requires_grad)
                for i, p in enumerate(self._params)]

    @property
    def trunk_slot_count(self) -> int:
        """Number of leading parameter slots belonging to the (first) trunk."""
        return 2 * len(self.trunk)

    @property
    def seg_head_slots(self) -> range:
        return range(self._seg_start, len(self._params))

    def set_trainable_slots(self, trainable) -> None:
        set_trainable_slots(self, trainable)

    def unfreeze_all(self) -> None:
        unfreeze_all(self)


def set_trainable_slots(model, trainable) -> None:
    """Set requires_grad per slot; gradient buffers of frozen slots are freed."""
    trainable = set(trainable)
    for i, p in enumerate(model.parameters()):
        p.requires_grad = i in trainable
        if not p.requires_grad:
            p.grad = None


def unfreeze_all(model) -> None:
    for p in model.parameters():
        p.requires_grad = True


def forward(model: ToyModel, inputs: np.ndarray) -> tuple[Value, Value]:
    """Run both heads; returns (disparity_pred, seg_logits), each (N, 1)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.in_dim:
        raise ShapeMismatch(
            f"input {inputs.shape} does not match trunk input size {model.in_dim}"
        )
    x = Value(inputs)
    h = _run_trunk(model.trunk, x)
    disp = _run_head(model.disp_head, h)
    if model.variant == "v1":
        h = _run_trunk(model.trunk_b, x)
    seg = _run_head(model.seg_head, h)
    return disp, seg


def ssi_loss_value(disp_pred: Value, disp_gt: np.ndarray, mask: np.ndarray) -> Value:
    """Masked mean squared error after scale/shift alignment, as a graph node.

    The fitted (s, t) enter the graph as constants; see the module docstring
    for why this still yields the exact gradient.
    """
    gt = np.asarray(disp_gt, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if disp_pred.data.shape != gt.shape or gt.shape != m.shape:
        raise ShapeMismatch(
            f"pred {disp_pred.data.shape}, gt {gt.shape}, mask {m.shape}"
        )
    ss = fit_scale_shift(disp_pred.data, gt, m)
    resid = disp_pred * ss.s + Value(ss.t * np.ones_like(gt)) - Value(gt)
    sq = resid * resid * Value(m.astype(np.float64))
    return sq.sum() * (1.0 / int(m.sum()))


def bce_loss_value(seg_logits: Value, seg_gt: np.ndarray) -> Value:
    """Mean binary cross entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(seg_gt, dtype=np.float64)
    if seg_logits.data.shape != y.shape:
        raise ShapeMismatch(f"logits {seg_logits.data.shape}, gt {y.shape}")
    p = seg_logits.sigmoid().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    yv = Value(y)
    term = yv * p.log() + (1.0 - yv) * (1.0 - p).log()
    return -term.mean()


def joint_loss(
    disp_pred: Value,
    disp_gt: np.ndarray,
    seg_logits: Value,
    seg_gt: np.ndarray,
    mask: np.ndarray,
    ssi_weight: float = 1.0,
    bce_weight: float = 1.0,
) -> Value:
    """Scale/shift-invariant disparity loss plus segmentation BCE.

    The two terms are weighted equally by default; the weights are exposed
    because no canonical weighting exists for this pairing. The mask applies
    to the disparity term only.
    """
    ssi = ssi_loss_value(disp_pred, disp_gt, mask)
    bce = bce_loss_value(seg_logits, seg_gt)
    return ssi * ssi_weight + bce * bce_weight


def sgd_step(model: ToyModel, learning_rate: float) -> None:
    """p <- p - lr * grad for trainable parameters; frozen ones untouched."""
    for p in model.parameters():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise MissingGradients("run backward before sgd_step")
        p.data -= learning_rate * p.grad


def grad_buffer_count(model: ToyModel) -> int:
    """Parameter slots holding an allocated gradient buffer right now."""
    return sum(1 for p in model.parameters() if p.grad is not None)


@dataclass
class TrainingData:
    """One desk-scale batch: rows are pixels with feature vectors."""

    inputs: np.ndarray      # (N, in_dim)
    disparity: np.ndarray   # (N, 1)
    seg: np.ndarray         # (N, 1) binary
    mask: np.ndarray        # (N, 1) bool


def make_synthetic_data(seed: int, size: int = 64, in_dim: int = 3) -> TrainingData:
    """Deterministic learnable dataset for the shipped training experiments."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(size, in_dim))
    w_d = rng.normal(size=(in_dim, 1))
    w_s = rng.normal(size=(in_dim, 1))
    disparity = 2.0 * np.tanh(x @ w_d) + 3.0
    seg = (x @ w_s > 0).astype(np.float64)
    mask = np.ones((size, 1), dtype=bool)
    return TrainingData(x, disparity, seg, mask)


def save_model(model: ToyModel, path) -> None:
    """Write all parameters to a flat binary checkpoint in canonical order."""
    from .io import write_checkpoint

    write_checkpoint(path, [p.data for p in model.parameters()])


def load_model(model: ToyModel, path) -> ToyModel:
    """Load a checkpoint into a model of matching architecture."""
    from .io import read_checkpoint

    arrays = read_checkpoint(path)
    params = model.parameters()
    if len(arrays) != len(params):
        raise ShapeMismatch(
            f"checkpoint has {len(arrays)} parameters, model has {len(params)}"
        )
    for i, (p, arr) in enumerate(zip(params, arrays)):
        if arr.shape != p.data.shape:
            raise ShapeMismatch(
                f"slot {i}: checkpoint {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.astype(np.float64)
    return model


def pretrain_trunk(model: ToyModel, data: TrainingData, epochs: int,
                   learning_rate: float) -> ToyModel:
    """Train trunk + disparity head on the regression loss only (v3 setup).

    The segmentation head is frozen throughout and comes out bit-identical;
    with epochs=0 the model is untouched.
    """
    if model.variant != "v3":
        raise ValueError("pretraining is the v3 initialization step")
    model.set_trainable_slots(i for i in range(len(model.parameters()))
                              if i not in model.seg_head_slots)
    for _ in range(epochs):
        disp, _seg = forward(model, data.inputs)
        loss = ssi_loss_value(disp, data.disparity, data.mask)
        backward(loss)
        sgd_step(model, learning_rate)
    model.unfreeze_all()
    return model
