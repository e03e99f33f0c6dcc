"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the segmentation network needs are provided. Every
differentiable call made while any input requires a gradient is appended to
the thread's active :class:`Tape`; :meth:`Tensor.backward` replays that tape in
reverse and accumulates gradients additively.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend
from .errors import (
    DegenerateBatchError,
    EmptyLossError,
    GeometryError,
    LabelError,
    NonFiniteError,
    ParameterError,
    ShapeError,
)

LOG_FLOOR = math.log(1e-12)
PROB_FLOOR = 1e-12

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used when tensors are built from Python data."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, grad=None):
        """Backpropagate from this tensor through the active tape.

        ``grad`` is the upstream gradient; it defaults to 1 and is required
        for non-scalar tensors.
        """
        current_tape().backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)
    enabled: bool = True

    def record(self, op, inputs, output, backward_fn):
        if self.enabled and any(t.requires_grad for t in inputs):
            output.requires_grad = True
            self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def reset(self):
        self.nodes.clear()

    def backward(self, root: Tensor, grad=None, visit: Optional[Callable[[Node], None]] = None):
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward() on non-scalar tensor of shape {root.shape} needs an explicit grad")
            grad = np.ones_like(root.data)
        else:
            grad = np.asarray(grad, dtype=root.dtype)
            if grad.shape != root.shape:
                raise ShapeError(f"upstream grad shape {grad.shape} != tensor shape {root.shape}")
        grads = {id(root): grad}
        produced = {id(n.output) for n in self.nodes}
        if id(root) not in produced:
            _accumulate_leaf(root, grad)
            self.reset()
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.op}", name=t.name)
                if id(t) in produced:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    _accumulate_leaf(t, gi)
        self.reset()


def _accumulate_leaf(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


# multiply-add instrumentation -------------------------------------------------

class MaddCounter:
    """Tallies the dense multiply-adds executed by convolution calls."""

    def __init__(self):
        self.total = 0
        self.per_call: list[tuple[str, int]] = []

    def add(self, op, n):
        self.total += n
        self.per_call.append((op, n))


@contextlib.contextmanager
def madd_counter():
    counter = MaddCounter()
    prev = getattr(_local, "madds", None)
    _local.madds = counter
    try:
        yield counter
    finally:
        _local.madds = prev


def _tally(op, n):
    counter = getattr(_local, "madds", None)
    if counter is not None:
        counter.add(op, int(n))


# helpers ----------------------------------------------------------------------

def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(t, what):
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D, got shape {t.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


# primitives -------------------------------------------------------------------

def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D cross-correlation, NCHW input against an (out, in, kh, kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_4d(x, "conv2d input")
    _check_4d(kernel, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    CO, CI, KH, KW = kernel.shape
    if C != CI:
        raise ShapeError(f"conv2d channel axis mismatch: input axis 1 = {C}, kernel axis 1 = {CI}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d dtype mismatch: {x.dtype} vs {kernel.dtype}")
    HO = conv_output_size(H, KH, stride, padding)
    WO = conv_output_size(W, KW, stride, padding)
    if H + 2 * padding < KH or W + 2 * padding < KW or HO <= 0 or WO <= 0:
        raise GeometryError(f"conv2d output would be empty for input {H}x{W}, kernel {KH}x{KW}, padding {padding}")
    nt = backend.get_num_threads()
    out_data = backend.kernels.conv2d_forward(x.data, kernel.data, stride, padding, nt)
    _tally("conv2d", KH * KW * C * CO * HO * WO * B)
    inputs = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (CO,):
            raise ShapeError(f"conv2d bias axis 0 = {bias.shape} does not match kernel out channels {CO}")
        out_data += bias.data[None, :, None, None]
        inputs.append(bias)
    out = Tensor(_check_finite(out_data, "conv2d"), dtype=out_data.dtype)

    def backward(g):
        g = np.ascontiguousarray(g)
        kern = backend.kernels
        gx = kern.conv2d_backward_input(g, kernel.data, stride, padding, H, W, nt) if x.requires_grad else None
        gk = backend.conv2d_backward_weight(g, x.data, stride, padding, KH, KW, nt) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    current_tape().record("conv2d", inputs, out, backward)
    return out


def conv_transpose2d(x, kernel, stride=2, padding=1):
    """Transposed convolution with an (in, out, kh, kw) kernel; the adjoint of conv2d."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_4d(x, "conv_transpose2d input")
    _check_4d(kernel, "conv_transpose2d kernel")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    CI, CO, KH, KW = kernel.shape
    if C != CI:
        raise ShapeError(f"conv_transpose2d channel axis mismatch: input axis 1 = {C}, kernel axis 0 = {CI}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv_transpose2d dtype mismatch: {x.dtype} vs {kernel.dtype}")
    HO = conv_transpose_output_size(H, KH, stride, padding)
    WO = conv_transpose_output_size(W, KW, stride, padding)
    if HO <= 0 or WO <= 0:
        raise GeometryError(f"conv_transpose2d output would be empty for input {H}x{W}, kernel {KH}x{KW}")
    nt = backend.get_num_threads()
    out_data = backend.kernels.conv2d_backward_input(x.data, kernel.data, stride, padding, HO, WO, nt)
    _tally("conv_transpose2d", KH * KW * C * CO * H * W * B)
    out = Tensor(_check_finite(out_data, "conv_transpose2d"), dtype=out_data.dtype)

    def backward(g):
        g = np.ascontiguousarray(g)
        kern = backend.kernels
        gx = kern.conv2d_forward(g, kernel.data, stride, padding, nt) if x.requires_grad else None
        gk = backend.conv2d_backward_weight(x.data, g, stride, padding, KH, KW, nt) if kernel.requires_grad else None
        return gx, gk

    current_tape().record("conv_transpose2d", [x, kernel], out, backward)
    return out


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, running: RunningStats, mode="train", eps=1e-5, momentum=0.1):
    """Per-channel batch normalisation over (B, H, W).

    Train mode normalises by the biased batch variance and moves ``running``
    toward the batch statistics by ``momentum``; infer mode uses ``running``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check_4d(x, "batch_norm input")
    if eps <= 0:
        raise ParameterError(f"batch_norm epsilon must be positive, got {eps}")
    if not 0 < momentum < 1:
        raise ParameterError(f"batch_norm momentum must lie in (0, 1), got {momentum}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm gamma/beta axis 0 must equal channel axis 1 = {C}")
    axes = (0, 2, 3)
    n = B * H * W
    if mode == "train":
        if n <= 1:
            raise DegenerateBatchError("batch_norm train mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        running.mean[...] = (1 - momentum) * running.mean + momentum * mean
        running.var[...] = (1 - momentum) * running.var + momentum * var
    elif mode == "infer":
        mean, var = running.mean.astype(x.dtype), running.var.astype(x.dtype)
        centered = x.data - mean[None, :, None, None]
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(_check_finite(out_data, "batch_norm"), dtype=x.dtype)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std)[None, :, None, None]
        if mode == "train":
            dx = scale / n * (n * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    current_tape().record("batch_norm", [x, gamma, beta], out, backward)
    return out


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False), dtype=x.dtype)
    current_tape().record("relu", [x], out, lambda g: (g * mask,))
    return out


def dropout_mask(shape, p, rng_seed, dtype=np.float32):
    """Inverted-dropout multiplier: 0 where dropped, 1/(1-p) where kept."""
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x, p, mode="train", rng_seed=0, mask=None):
    """Inverted dropout. ``mask`` freezes a precomputed multiplier (for gradient checks)."""
    x = _as_tensor(x)
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "infer" or p == 0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if mask is None:
        mask = dropout_mask(x.shape, p, rng_seed, x.dtype)
    elif mask.shape != x.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} != input shape {x.shape}")
    out = Tensor(x.data * mask, dtype=x.dtype)
    current_tape().record("dropout", [x], out, lambda g: (g * mask,))
    return out


def softmax_channels(x):
    x = _as_tensor(x)
    _check_4d(x, "softmax_channels input")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels on axis 1, got {x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, dtype=x.dtype)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    current_tape().record("softmax_channels", [x], out, backward)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.dtype)
    current_tape().record("add", [a, b], out, lambda g: (g, g))
    return out


elementwise_add = add


def add_n(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def tensor_sum(x):
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()), dtype=x.dtype)
    current_tape().record("sum", [x], out, lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def dot(x, const):
    """Inner product of ``x`` with a constant array: sum(x * const)."""
    x = _as_tensor(x)
    c = np.asarray(const, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"dot shape mismatch: {x.shape} vs {c.shape}")
    out = Tensor(np.asarray((x.data * c).sum()), dtype=x.dtype)
    current_tape().record("dot", [x], out, lambda g: (g * c,))
    return out


def _loss_setup(shape, target, weights, mask):
    B, C, H, W = shape
    target = np.asarray(target)
    if target.shape != (B, H, W):
        raise ShapeError(f"target shape {target.shape} must be (B, H, W) = {(B, H, W)}")
    if not np.isin(target, (0, 1)).all():
        raise LabelError("target labels must be 0 or 1")
    target = target.astype(np.intp)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (C,):
        raise ShapeError(f"class weights need {C} entries, got {w.shape}")
    if mask is None:
        counted = np.ones((B, H, W), dtype=bool)
    else:
        counted = np.asarray(mask, dtype=bool)
        if counted.shape != (B, H, W):
            raise ShapeError(f"mask shape {counted.shape} must be (B, H, W) = {(B, H, W)}")
    count = int(counted.sum())
    if count == 0:
        raise EmptyLossError("loss mask selects no pixels")
    onehot = np.zeros(shape, dtype=bool)
    np.put_along_axis(onehot, target[:, None], True, axis=1)
    pix_w = w[target] * counted
    return onehot, pix_w, count


def weighted_cross_entropy(probs, target, weights=(1.0, 1.0), mask=None):
    """Class-weighted negative log-likelihood of per-pixel probabilities.

    loss = -sum(w[y] * log(max(p[y], 1e-12))) / n_counted
    """
    probs = _as_tensor(probs)
    _check_4d(probs, "weighted_cross_entropy probs")
    onehot, pix_w, count = _loss_setup(probs.shape, target, weights, mask)
    p_true = (probs.data * onehot).sum(axis=1)
    clamped = np.maximum(p_true, PROB_FLOOR)
    loss = -(pix_w * np.log(clamped.astype(np.float64))).sum() / count
    out = Tensor(np.asarray(loss), dtype=probs.dtype)

    def backward(g):
        d = np.where(p_true > PROB_FLOOR, -pix_w / (count * clamped), 0.0)
        return ((g * d)[:, None] * onehot).astype(probs.dtype),

    current_tape().record("weighted_cross_entropy", [probs], out, backward)
    return out


def softmax_cross_entropy(logits, target, weights=(1.0, 1.0), mask=None):
    """Fused channel softmax and weighted cross-entropy on raw logits."""
    logits = _as_tensor(logits)
    _check_4d(logits, "softmax_cross_entropy logits")
    onehot, pix_w, count = _loss_setup(logits.shape, target, weights, mask)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    logp_true = (logp * onehot).sum(axis=1)
    clamped = np.maximum(logp_true, LOG_FLOOR)
    loss = -(pix_w * clamped).sum() / count
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    out = Tensor(np.asarray(loss), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        active = (logp_true > LOG_FLOOR) * pix_w / count
        return ((g * active)[:, None] * (p - onehot)).astype(logits.dtype),

    current_tape().record("softmax_cross_entropy", [logits], out, backward)
    return out


# gradient checking ------------------------------------------------------------

def grad_check(fn, inputs, epsilon=1e-5, coords=None, rng_seed=0):
    """Compare tape gradients of a scalar closure with central finite differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from ``inputs``.
    ``coords`` limits the check to that many randomly chosen coordinates per
    input (all coordinates when None). Returns the max relative error
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ParameterError("grad_check requires 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    tape = Tape()
    with use_tape(tape):
        out = fn()
        if not isinstance(out, Tensor) or out.size != 1:
            raise ShapeError("grad_check closure must return a scalar Tensor")
        out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        with use_tape(Tape(enabled=False)):
            return float(fn().data)

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = evaluate()
            flat[i] = orig - epsilon
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            an = a.reshape(-1)[i]
            err = abs(an - num) / max(1e-8, abs(an) + abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
