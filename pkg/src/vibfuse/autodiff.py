"""Differentiable computation core.

A small tape-based reverse-mode autodiff over dense float64 numpy arrays,
restricted to a fixed op whitelist (affine, 2-D convolution, relu, tanh,
softplus, exp, log, log-sum-exp, flatten/reshape, concat, elementwise
add/mul, reductions), plus feed-forward graph descriptions, Glorot-uniform
initialization, and a functional Adam optimizer.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape construction (inference fast path)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")
    return arr


class Tensor:
    """Node in the autodiff tape; wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled():
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __float__(self):
        if self.data.size != 1:
            raise ShapeError(f"cannot convert shape {self.data.shape} to scalar")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _check_finite(a.data + b.data, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _check_finite(a.data - b.data, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _check_finite(a.data * b.data, "mul")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _check_finite(a.data / b.data, "div")

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = _check_finite(a.data @ b.data, "matmul")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.data.shape} -> {shape}: {e}") from e

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out_data, (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return Tensor(out_data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out_data = _check_finite(np.concatenate([t.data for t in ts], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor(out_data, tuple(ts), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return Tensor(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # stable: log1p(exp(-|x|)) + max(x, 0)
    out_data = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return Tensor(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = _check_finite(np.exp(a.data), "exp")

    def backward(g):
        _accum(a, g * out_data)

    return Tensor(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = _check_finite(np.log(a.data), "log")

    def backward(g):
        _accum(a, g / a.data)

    return Tensor(out_data, (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out_data = _check_finite(np.squeeze(m + np.log(s), axis=axis), "logsumexp")
    soft = shifted / s

    def backward(g):
        _accum(a, np.expand_dims(g, axis) * soft)

    return Tensor(out_data, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out_data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return Tensor(out_data, (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes through inside [lo, hi], zero outside."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return Tensor(out_data, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data

    def backward(g):
        _accum(a, 2.0 * g * a.data)

    return Tensor(out_data, (a,), backward)


def affine_op(x, w, b) -> Tensor:
    """x @ w + b over the trailing axis of x."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"affine: input last dim {x.data.shape[-1]} != weight rows {w.data.shape[0]}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, w.data.shape[0])
    out_data = _check_finite((x2 @ w.data + b.data).reshape(*lead, w.data.shape[1]), "affine")

    def backward(g):
        g2 = g.reshape(-1, w.data.shape[1])
        _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0))

    return Tensor(out_data, (x, w, b), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh * kw * c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            cols[..., (i * kw + j) * c : (i * kw + j + 1) * c] = patch
    return cols


def conv2d_op(x, w, b, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution; x is NHWC, w is (kh, kw, C, OC)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input, got shape {x.data.shape}")
    kh, kw, c_in, c_out = w.data.shape
    if x.data.shape[3] != c_in:
        raise ShapeError(f"conv2d: input channels {x.data.shape[3]} != kernel channels {c_in}")
    n, h, wd, _ = x.data.shape
    p = kh // 2
    oh = (h + 2 * p - kh) // stride + 1
    ow = (wd + 2 * p - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(-1, c_out)
    out_data = _check_finite(
        (cols.reshape(-1, kh * kw * c_in) @ w2 + b.data).reshape(n, oh, ow, c_out), "conv2d"
    )

    def backward(g):
        g2 = g.reshape(-1, c_out)
        _accum(w, (cols.reshape(-1, kh * kw * c_in).T @ g2).reshape(w.data.shape))
        _accum(b, g2.sum(axis=0))
        dcols = (g2 @ w2.T).reshape(n, oh, ow, kh * kw * c_in)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[
                    ..., (i * kw + j) * c_in : (i * kw + j + 1) * c_in
                ]
        _accum(x, dxp[:, p : p + h, p : p + wd, :])

    return Tensor(out_data, (x, w, b), backward)


def huber(residual, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty over all elements of the residual."""
    if delta <= 0:
        raise ShapeError(f"huber: delta must be positive, got {delta}")
    r = as_tensor(residual)
    a = np.abs(r.data)
    vals = np.where(a <= delta, 0.5 * r.data * r.data, delta * (a - 0.5 * delta))
    out_data = vals.mean()
    n = r.data.size

    def backward(g):
        _accum(r, g * np.clip(r.data, -delta, delta) / n)

    return Tensor(out_data, (r,), backward)


# ---------------------------------------------------------------------------
# parameter containers


class ParameterSet:
    """Ordered name -> float64 array map; shapes fixed after insertion."""

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._items: dict[str, np.ndarray] = {}
        if items:
            for k, v in items.items():
                self.add(k, v)

    def add(self, name: str, value) -> None:
        if name in self._items:
            raise ShapeError(f"duplicate parameter name '{name}'")
        self._items[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._items and self._items[name].shape != value.shape:
            raise ShapeError(
                f"parameter '{name}': shape {value.shape} != declared {self._items[name].shape}"
            )
        self._items[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self):
        return list(self._items)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._items.items()})

    def to_flat(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._items.values()])

    def from_flat(self, flat: np.ndarray) -> "ParameterSet":
        out = ParameterSet()
        pos = 0
        for k, v in self._items.items():
            out.add(k, flat[pos : pos + v.size].reshape(v.shape))
            pos += v.size
        if pos != flat.size:
            raise ShapeError(f"flat vector size {flat.size} != parameter count {pos}")
        return out

    def allclose(self, other: "ParameterSet", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self[k], other[k], **kw) for k in self
        )


def leaves(params: ParameterSet) -> dict[str, Tensor]:
    """Fresh leaf tensors over the parameter arrays."""
    return {k: Tensor(v) for k, v in params.items()}


def gradient(loss_fn, params: ParameterSet) -> ParameterSet:
    """Reverse-mode gradient of a scalar loss w.r.t. every parameter.

    loss_fn receives a dict name -> leaf Tensor and must return a scalar
    Tensor built from the supported ops.
    """
    lv = leaves(params)
    out = loss_fn(lv)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("loss_fn must return a scalar Tensor")
    out.backward()
    grads = ParameterSet()
    for k, v in params.items():
        g = lv[k].grad
        grads.add(k, np.zeros_like(v) if g is None else g)
    return grads


# ---------------------------------------------------------------------------
# graph descriptions


@dataclass(frozen=True)
class Affine:
    name: str
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class Activation:
    kind: str  # relu | tanh | softplus


@dataclass(frozen=True)
class Flatten:
    pass


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "softplus": softplus}


@dataclass(frozen=True)
class Graph:
    """Feed-forward layer stack with a declared (unbatched) input shape."""

    input_shape: tuple
    layers: tuple

    def shapes(self) -> list[tuple]:
        """Per-layer unbatched output shapes, starting from input_shape."""
        shape = tuple(self.input_shape)
        out = [shape]
        for layer in self.layers:
            if isinstance(layer, Affine):
                if len(shape) != 1:
                    raise ShapeError(f"affine '{layer.name}' needs flat input, got {shape}")
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ShapeError(f"conv '{layer.name}' needs HWC input, got {shape}")
                h, w, _ = shape
                p = layer.kernel // 2
                shape = (
                    (h + 2 * p - layer.kernel) // layer.stride + 1,
                    (w + 2 * p - layer.kernel) // layer.stride + 1,
                    layer.out_channels,
                )
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Activation):
                pass
            else:
                raise ShapeError(f"unsupported layer {layer!r}")
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1]

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        """Glorot-uniform weights, zero biases."""
        params = ParameterSet()
        shape = tuple(self.input_shape)
        for layer, shape_out in zip(self.layers, self.shapes()[1:]):
            if isinstance(layer, Affine):
                fan_in, fan_out = shape[0], layer.out_dim
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                params.add(f"{layer.name}.w", rng.uniform(-lim, lim, size=(fan_in, fan_out)))
                params.add(f"{layer.name}.b", np.zeros(fan_out))
            elif isinstance(layer, Conv2d):
                c_in = shape[2]
                k = layer.kernel
                fan_in = k * k * c_in
                fan_out = k * k * layer.out_channels
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                params.add(
                    f"{layer.name}.w",
                    rng.uniform(-lim, lim, size=(k, k, c_in, layer.out_channels)),
                )
                params.add(f"{layer.name}.b", np.zeros(layer.out_channels))
            shape = shape_out
        return params

    def apply(self, params, x) -> Tensor:
        """Run the graph on a batched input (leading batch axis)."""
        x = as_tensor(x)
        if tuple(x.data.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"graph input shape {x.data.shape[1:]} != declared {tuple(self.input_shape)}"
            )
        get = params.__getitem__ if isinstance(params, (dict, ParameterSet)) else params
        for layer in self.layers:
            if isinstance(layer, Affine):
                x = affine_op(x, as_tensor(get(f"{layer.name}.w")), as_tensor(get(f"{layer.name}.b")))
            elif isinstance(layer, Conv2d):
                x = conv2d_op(
                    x,
                    as_tensor(get(f"{layer.name}.w")),
                    as_tensor(get(f"{layer.name}.b")),
                    stride=layer.stride,
                )
            elif isinstance(layer, Flatten):
                x = reshape(x, (x.data.shape[0], -1))
            elif isinstance(layer, Activation):
                x = _ACTIVATIONS[layer.kind](x)
        return x


def forward(graph: Graph, params, input_arr: np.ndarray) -> np.ndarray:
    """Deterministic non-differentiable forward pass on one unbatched input."""
    with no_grad():
        out = graph.apply(params, np.asarray(input_arr, dtype=np.float64)[None])
    return out.data[0]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    step: int
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: ParameterSet, learning_rate: float = 1e-4, **kw) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    params: ParameterSet, grads: ParameterSet, state: OptimizerState
) -> tuple[ParameterSet, OptimizerState]:
    """One bias-corrected Adam update; returns new params and state."""
    if params.names() != grads.names():
        raise ShapeError("adam_step: parameter and gradient names differ")
    t = state.step + 1
    new_params = ParameterSet()
    new_m, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for '{k}'")
        m = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_params.add(k, p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m[k] = m
        new_v[k] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)
