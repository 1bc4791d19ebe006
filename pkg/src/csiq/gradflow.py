"""Minimal reverse-mode automatic differentiation on numpy arrays.

Provides exactly the layer primitives the feedback codec networks need
(dense, same-padded 3x3 convolution, element-wise activations, soft
rounding, reductions, reshape/concat) plus the Adam optimizer.  All
arithmetic is float64; graphs are built define-by-run and freed once the
backward pass has consumed them.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dgemm as _dgemm


class ShapeError(ValueError):
    """Operand shapes do not conform."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (cheap inference / evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array with an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators used when composing losses.
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

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    # Rebind instead of += so closures may hand over views without aliasing.
    t.grad = grad if t.grad is None else t.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * np.sign(x.data))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# layer primitives


def dense(x, weight, bias) -> Tensor:
    """Affine map ``y = x @ W.T + b`` for a single vector or a batch of rows."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("dense expects a 2-d weight and 1-d bias")
    m, n = weight.data.shape
    if bias.data.shape[0] != m:
        raise ShapeError(f"bias length {bias.data.shape[0]} != output dim {m}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != n:
        raise ShapeError(f"input shape {x.data.shape} does not match weight {weight.data.shape}")
    data = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            if x.data.ndim == 1:
                _accumulate(weight, np.outer(g, x.data))
            else:
                _accumulate(weight, g.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, g if g.ndim == 1 else g.sum(axis=0))

    return _make(data, (x, weight, bias), backward)


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b without temporaries (BLAS beta=1 on C-ordered operands)."""
    _dgemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)


def conv3x3_nhwc(x, kernels, bias) -> Tensor:
    """Same-padded 3x3 cross-correlation in channels-last layout.

    ``x`` is (N, H, W, C_in); ``kernels`` is (C_out, C_in, 3, 3); output is
    (N, H, W, C_out).  This is the layout the codec networks run in: with
    the padded plane flattened row-major, each kernel tap is a constant
    offset, so the whole convolution is nine accumulating GEMMs with no
    patch-matrix materialization.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    xd, kd = x.data, kernels.data
    if xd.ndim != 4:
        raise ShapeError(f"conv3x3_nhwc expects 4-d input, got shape {xd.shape}")
    if kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must be (C_out, C_in, 3, 3), got {kd.shape}")
    n, h, w, c_in = xd.shape
    c_out = kd.shape[0]
    if kd.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kd.shape[1]} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({c_out},)")

    span = (h + 2) * (w + 2)
    rows = n * span
    lo, hi = w + 3, rows - (w + 3)  # tap offsets never leave [0, rows)
    offsets = [(di - 1) * (w + 2) + (dj - 1) for di in range(3) for dj in range(3)]

    padded = np.zeros((n, h + 2, w + 2, c_in), dtype=np.float64)
    padded[:, 1:-1, 1:-1, :] = xd
    p2 = padded.reshape(rows, c_in)
    k_fwd = np.ascontiguousarray(kd.transpose(2, 3, 1, 0)).reshape(9, c_in, c_out)

    out = np.zeros((rows, c_out), dtype=np.float64)
    for tap, off in enumerate(offsets):
        _gemm_acc(p2[lo + off:hi + off], k_fwd[tap], out[lo:hi])
    data = out.reshape(n, h + 2, w + 2, c_out)[:, 1:-1, 1:-1, :] + bias.data

    def backward(g):
        gpad = np.zeros((n, h + 2, w + 2, c_out), dtype=np.float64)
        gpad[:, 1:-1, 1:-1, :] = g
        g2 = gpad.reshape(rows, c_out)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 1, 2)))
        if kernels.requires_grad:
            gk = np.empty_like(kd)
            for tap, off in enumerate(offsets):
                di, dj = divmod(tap, 3)
                gk[:, :, di, dj] = g2[lo:hi].T @ p2[lo + off:hi + off]
            _accumulate(kernels, gk)
        if x.requires_grad:
            k_bwd = np.ascontiguousarray(kd.transpose(2, 3, 0, 1)).reshape(9, c_out, c_in)
            gx = np.zeros((rows, c_in), dtype=np.float64)
            for tap, off in enumerate(offsets):
                _gemm_acc(g2[lo:hi], k_bwd[tap], gx[lo + off:hi + off])
            _accumulate(x, gx.reshape(n, h + 2, w + 2, c_in)[:, 1:-1, 1:-1, :])

    return _make(data, (x, kernels, bias), backward)


def conv3x3(x, kernels, bias) -> Tensor:
    """Same-padded 3x3 cross-correlation, channels-first.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, 3, 3); output keeps the spatial size.
    """
    x = _as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv3x3 expects 3-d or 4-d input, got shape {x.data.shape}")
    single = x.data.ndim == 3
    batched = reshape(x, (1,) + x.data.shape) if single else x
    out = transpose_last(conv3x3_nhwc(transpose_first(batched), kernels, bias))
    return reshape(out, out.data.shape[1:]) if single else out


def transpose_first(x) -> Tensor:
    """(N, C, H, W) -> (N, H, W, C)."""
    x = _as_tensor(x)
    data = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

    return _make(data, (x,), backward)


def transpose_last(x) -> Tensor:
    """(N, H, W, C) -> (N, C, H, W)."""
    x = _as_tensor(x)
    data = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.ascontiguousarray(g.transpose(0, 2, 3, 1)))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# activations and shaping


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp may overflow to inf for very negative z; 1/(1+inf) -> 0 is exact.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    data = _sigmoid(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (1.0 - data * data))

    return _make(data, (x,), backward)


def leaky_relu(x, negative_slope: float = 0.3) -> Tensor:
    x = _as_tensor(x)
    mask = x.data >= 0
    data = np.where(mask, x.data, negative_slope * x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * np.where(mask, 1.0, negative_slope))

    return _make(data, (x,), backward)


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated stably; used to keep quantizer weights positive."""
    x = _as_tensor(x)
    data = np.logaddexp(0.0, x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * _sigmoid(x.data))

    return _make(data, (x,), backward)


_ACTIVATIONS = {"sigmoid": sigmoid, "leaky_relu": leaky_relu, "tanh": tanh}


def apply_activation(x, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(old))

    return _make(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size
    data = np.asarray(x.data.mean())

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())

    return _make(data, (x,), backward)


def mse(a, b) -> Tensor:
    """Mean squared difference over all entries."""
    d = sub(a, b)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# quantization surrogates


def soft_round_values(x: np.ndarray, low: int, high: int, sharpness: float) -> np.ndarray:
    """Differentiable rounding onto integer levels ``low..high`` (ndarray in/out).

    Sum of sigmoid steps, one per inter-level boundary; saturates smoothly
    at the range ends.
    """
    x = np.asarray(x, dtype=np.float64)
    edges = np.arange(low, high, dtype=np.float64) + 0.5
    z = sharpness * (x[..., None] - edges)
    return _sigmoid(z).sum(axis=-1) + low


def _soft_round_grad(x: np.ndarray, low: int, high: int, sharpness: float) -> np.ndarray:
    edges = np.arange(low, high, dtype=np.float64) + 0.5
    s = _sigmoid(sharpness * (np.asarray(x)[..., None] - edges))
    return sharpness * (s * (1.0 - s)).sum(axis=-1)


def soft_round(x, bits: int, sharpness: float) -> Tensor:
    """Soft rounding over the signed level range [-2^(bits-1), 2^(bits-1)]."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    half = 1 << (bits - 1)
    return soft_round_range(x, -half, half, sharpness)


def soft_round_range(x, low: int, high: int, sharpness: float) -> Tensor:
    x = _as_tensor(x)
    data = soft_round_values(x.data, low, high, sharpness)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * _soft_round_grad(x.data, low, high, sharpness))

    return _make(data, (x,), backward)


def phase_cell_distortion(bits) -> Tensor:
    """Expected squared error of a unit phasor uniformly quantized at ``bits`` bits.

    E|e^{ju} - 1|^2 for u uniform on [-h, h] with h = pi * 2^-bits equals
    2 * (1 - sin(h)/h); differentiable in the (real-valued) bit count.
    """
    bits = _as_tensor(bits)
    h = np.pi * np.exp2(-bits.data)
    sinc = np.sin(h) / h
    data = 2.0 * (1.0 - sinc)

    def backward(g):
        if bits.requires_grad:
            dsinc_dh = np.cos(h) / h - np.sin(h) / (h * h)
            dh = -np.log(2.0) * h
            _accumulate(bits, g * (-2.0 * dsinc_dh * dh))

    return _make(data, (bits,), backward)


# ---------------------------------------------------------------------------
# tape, backward, optimizer


class Tape:
    """Named parameter registry; owns the gradient slots for one model.

    Single-owner: a tape must not be shared across concurrent
    forward/backward passes, though independent tapes may run in parallel.
    """

    def __init__(self):
        self.parameters: dict[str, Tensor] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self.parameters:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Tensor(value, requires_grad=True)
        self.parameters[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss node."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node is not loss:
            node._parents = ()
            node._backward = None


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every tape parameter.

    Parameters that do not participate in the loss graph get zero
    gradients.
    """
    tape.zero_grad()
    backprop(loss)
    grads = {}
    for name, p in tape.parameters.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


@dataclass
class AdamState:
    """Adam optimizer state: per-parameter moment accumulators and counters."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Empty gradient set is a no-op."""
    if not grads:
        return
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    scale = state.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - scale * state.m[name] / (np.sqrt(state.v[name]) + state.epsilon)
