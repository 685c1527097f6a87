"""Minimal reverse-mode automatic differentiation on dense numpy buffers.

A ``Tensor`` wraps a float32 or float64 ndarray of up to 4 axes.  Every
operation records its parents and a backward closure on the result node;
``Tensor.backward()`` replays those closures once each, in reverse
topological order (the implicit tape).  The operator set is exactly what
the detection model needs: matrix products, masked softmax, layer norm,
pointwise nonlinearities, gather/concat plumbing, and a sine-cosine
coordinate encoder.  Broadcasting is limited to numpy-style alignment of
leading or size-1 axes (enough for bias adds and batched scaling).

Everything is deterministic: same inputs, same dtype, same platform give
bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_VALID_DTYPES = (np.float32, np.float64)

# Set by grad_check while probing: every op then verifies its output is
# finite and raises NumericError naming the op.  Off in normal runs.
_DEBUG_CHECKS = False


class NumericError(ArithmeticError):
    """A non-finite value appeared inside a recorded operation."""


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to 4 axes, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node.

        ``seed`` defaults to ones (the usual scalar-loss case).  Each node
        reachable from ``self`` is visited exactly once, children before
        parents.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("backward seed shape mismatch")

        order = _toposort(self)
        self._accumulate(seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; training graphs run to thousands of nodes, which would
    # overflow the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, dtype=None) -> Tensor:
    """Constant (non-learnable) tensor."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float64)
    return Tensor(arr)

def param(data, name: str = "") -> Tensor:
    """Learnable tensor (participates in backward)."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output of op '{op}'")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), backward, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2D x 2D or batched 3D x 3D operands."""
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise ValueError(f"matmul expects matching 2D or 3D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward, "transpose")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (duplicates permitted).

    Also serves as the embedding lookup: ``take_rows(table, ids)``.
    """
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take_rows expects a flat index vector")

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _result(a.data[idx], (a,), backward, "take_rows")


embed_lookup = take_rows


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        a._accumulate(g * keep)

    return _result(np.where(keep, a.data, 0), (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    # tanh approximation, the common transformer variant
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a._accumulate(g * da)

    return _result(out, (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), backward, "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed without overflow
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = _stable_sigmoid(x)

    def backward(g):
        a._accumulate(g * sig)

    return _result(out, (a,), backward, "softplus")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward, "log")


def sin(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * np.cos(a.data))

    return _result(np.sin(a.data), (a,), backward, "sin")


def cos(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g * np.sin(a.data))

    return _result(np.cos(a.data), (a,), backward, "cos")


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _result(a.data**p, (a,), backward, "pow_const")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return _result(np.abs(a.data), (a,), backward, "abs")


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge, a.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization and attention kernels
# ---------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            dxhat_sum = gx.sum(axis=-1, keepdims=True)
            dxhat_dot = (gx * xhat).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - dxhat_sum / n - xhat * dxhat_dot / n))

    return _result(out, (x, gamma, beta), backward, "layernorm")


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``-true positions.

    Masked positions get exactly zero probability, independent of the
    values stored there.  A row with no unmasked position is an error,
    never a silent zero vector.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        mask = np.broadcast_to(mask, logits.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: some row has every position masked")

    neg_inf = np.array(-np.inf, dtype=logits.dtype)
    z = np.where(mask, logits.data, neg_inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)          # exp(-inf) == 0 exactly at masked slots
    s = e.sum(axis=-1, keepdims=True)
    out = e / s

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        logits._accumulate(out * (g - dot))

    return _result(out, (logits,), backward, "masked_softmax")


# ---------------------------------------------------------------------------
# coordinate encoding and MLPs
# ---------------------------------------------------------------------------

def sincos_encode(x: Tensor, num_freqs: int, temperature: float = 1.0e4) -> Tensor:
    """Interleaved sin/cos features at geometrically spaced frequencies.

    Each input coordinate becomes ``2 * num_freqs`` features
    ``sin(f_k x), cos(f_k x)`` with ``f_k = temperature**(-k/num_freqs)``,
    so the base component (k = 0) has frequency exactly 1 and is
    2pi-periodic in the raw input.  Input shape [n, k] maps to
    [n, 2*k*num_freqs].
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    if x.data.ndim != 2:
        raise ValueError("sincos_encode expects [n, k] input")
    freqs = temperature ** (-np.arange(num_freqs, dtype=x.dtype) / num_freqs)
    n, k = x.shape
    # [n, k] -> [n, k, F] phase grid, then interleave sin/cos on a new axis
    xe = reshape(x, (n, k, 1))
    phase = mul(xe, tensor(freqs.reshape(1, 1, num_freqs), dtype=x.dtype))
    s = reshape(sin(phase), (n, k, num_freqs, 1))
    c = reshape(cos(phase), (n, k, num_freqs, 1))
    return reshape(concat([s, c], axis=3), (n, 2 * k * num_freqs))


_ACTIVATIONS = {"relu": relu, "gelu": gelu}


@dataclass
class MlpParams:
    """Weights/biases of a plain MLP; activation applied between layers."""

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for w, wn in zip(self.weights[:-1], self.weights[1:]):
            if w.shape[1] != wn.shape[0]:
                raise ValueError("consecutive MLP layer dims do not match")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(dims: list[int], rng: np.random.Generator, dtype=np.float32,
             activation: str = "relu", name: str = "mlp") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    weights, biases = [], []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(din)
        weights.append(param(rng.uniform(-bound, bound, size=(din, dout)).astype(dtype),
                             name=f"{name}.w{i}"))
        biases.append(param(rng.uniform(-bound, bound, size=(dout,)).astype(dtype),
                            name=f"{name}.b{i}"))
    return MlpParams(weights, biases, activation)


def mlp_apply(params: MlpParams, x: Tensor) -> Tensor:
    """Run an MLP over the last axis of ``x`` (any leading batch axes)."""
    lead = x.shape[:-1]
    h = reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    act = _ACTIVATIONS[params.activation]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if i != last:
            h = act(h)
    return reshape(h, lead + (params.out_dim,))


def mlp_params_list(params: MlpParams) -> list[Tensor]:
    return list(params.weights) + list(params.biases)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs: list[Tensor], eps: float = 1e-5,
               max_components: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of scalar ``f(inputs)`` to central
    finite differences, component-wise; returns the max relative error.

    ``max_components`` limits probing per tensor (random subset) for large
    parameter sets; default probes everything.  Inputs should be float64
    for meaningful tolerances.
    """
    global _DEBUG_CHECKS
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.zero_grad()

    _DEBUG_CHECKS = True
    try:
        out = f(inputs)
        if out.data.size != 1:
            raise ValueError("grad_check expects a scalar-valued function")
        out.backward()
    finally:
        _DEBUG_CHECKS = False

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        n = flat.size
        if max_components is not None and n > max_components:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(n, size=max_components, replace=False)
        else:
            picks = range(n)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(inputs).data)
            flat[j] = orig - eps
            lo = float(f(inputs).data)
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
