"""Reverse-mode automatic differentiation over dense float32 arrays.

Backward functions are themselves written in terms of the differentiable
operations below, so a backward pass can be recorded into the graph
(``grad(..., build_graph=True)``) and the resulting gradient tensors can be
differentiated again.  All arithmetic is float32 with deterministic
accumulation order.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32


class GraphError(RuntimeError):
    """Raised for invalid gradient requests (non-scalar source, detached
    or unreachable tensors, cyclic graphs)."""


# ---------------------------------------------------------------------------
# recording state
# ---------------------------------------------------------------------------

_RECORDING = [True]


def is_recording() -> bool:
    return _RECORDING[-1]


@contextmanager
def no_grad():
    """Disable graph construction; ops return plain value tensors."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


@contextmanager
def _recording(flag: bool):
    _RECORDING.append(bool(flag))
    try:
        yield
    finally:
        _RECORDING.pop()


# ---------------------------------------------------------------------------
# tensor and graph node
# ---------------------------------------------------------------------------


class Node:
    """One recorded operation: inputs plus a backward closure.

    ``backward(g, need)`` receives the gradient w.r.t. the op output and a
    per-input boolean mask; it returns one gradient (or None) per input,
    computed with the ops in this module so it can itself be recorded.
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float32 array, optionally attached to the computation graph.

    Tensors are treated as immutable values once they participate in a
    graph; only optimizer updates mutate leaf ``data`` in place, after the
    graph that referenced them has been consumed.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        """Same values, no graph node; gradients stop here."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars are wrapped as float32 constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _bad_item(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE))


def detach(x: Tensor) -> Tensor:
    return as_tensor(x).detach()


def _result(op: str, data, inputs: tuple, backward) -> Tensor:
    if is_recording() and any(t.requires_grad for t in inputs):
        return Tensor(data, True, Node(op, inputs, backward))
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, need):
        ga = _sum_to(g, a.shape) if need[0] and a.requires_grad else None
        gb = _sum_to(g, b.shape) if need[1] and b.requires_grad else None
        return ga, gb

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, need):
        ga = _sum_to(g, a.shape) if need[0] and a.requires_grad else None
        gb = _sum_to(neg(g), b.shape) if need[1] and b.requires_grad else None
        return ga, gb

    return _result("sub", a.data - b.data, (a, b), backward)


def neg(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, need):
        return (neg(g) if need[0] and x.requires_grad else None,)

    return _result("neg", -x.data, (x,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, need):
        ga = _sum_to(mul(g, b), a.shape) if need[0] and a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if need[1] and b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, need):
        ga = _sum_to(div(g, b), a.shape) if need[0] and a.requires_grad else None
        gb = None
        if need[1] and b.requires_grad:
            gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _result("div", a.data / b.data, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, need):
        return (mul(g, exp(x)) if need[0] and x.requires_grad else None,)

    return _result("exp", np.exp(x.data), (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, need):
        return (div(g, x) if need[0] and x.requires_grad else None,)

    return _result("log", np.log(x.data), (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, need):
        return (div(g, mul(sqrt(x), 2.0)) if need[0] and x.requires_grad else None,)

    return _result("sqrt", np.sqrt(x.data), (x,), backward)


def relu(x) -> Tensor:
    """Elementwise max(x, 0); subgradient at exactly 0 is 0."""
    x = as_tensor(x)

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        mask = Tensor((x.data > 0).astype(DTYPE))
        return (mul(g, mask),)

    return _result("relu", np.maximum(x.data, 0), (x,), backward)


def clamp_min(x, bound: float) -> Tensor:
    """Elementwise max(x, bound); gradient passes only where x > bound."""
    x = as_tensor(x)
    bound = float(bound)

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        mask = Tensor((x.data > bound).astype(DTYPE))
        return (mul(g, mask),)

    return _result("clamp_min", np.maximum(x.data, DTYPE(bound)), (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape

    def backward(g, need):
        return (reshape(g, old) if need[0] and x.requires_grad else None,)

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, need):
        return (transpose(g, inv) if need[0] and x.requires_grad else None,)

    return _result("transpose", x.data.transpose(axes), (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def backward(g, need):
        return (_sum_to(g, x.shape) if need[0] and x.requires_grad else None,)

    return _result("broadcast_to", np.broadcast_to(x.data, shape), (x,), backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    total = x.shape[axis]
    if start < 0 or length < 1 or start + length > total:
        raise ValueError(f"narrow out of range: axis {axis} size {total}, "
                         f"requested [{start}, {start + length})")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(x.ndim))

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        parts = []
        if start > 0:
            shp = list(x.shape)
            shp[axis] = start
            parts.append(zeros(shp))
        parts.append(g)
        if start + length < total:
            shp = list(x.shape)
            shp[axis] = total - start - length
            parts.append(zeros(shp))
        return (concat(parts, axis) if len(parts) > 1 else g,)

    return _result("narrow", x.data[idx], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of zero tensors")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]

    def backward(g, need):
        outs = []
        off = 0
        for i, t in enumerate(ts):
            if need[i] and t.requires_grad:
                outs.append(narrow(g, axis, off, sizes[i]))
            else:
                outs.append(None)
            off += sizes[i]
        return tuple(outs)

    return _result("concat", np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    x = as_tensor(x)
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    h, w = x.shape[-2], x.shape[-1]

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        return (narrow(narrow(g, -2, pad, h), -1, pad, w),)

    return _result("pad2d", np.pad(x.data, width), (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    in_shape = x.shape

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        gg = g
        if not keepdims:
            kshape = tuple(1 if i in axes else in_shape[i] for i in range(len(in_shape)))
            gg = reshape(gg, kshape)
        return (broadcast_to(gg, in_shape),)

    data = x.data.sum(axis=axes, keepdims=keepdims, dtype=DTYPE)
    return _result("sum", data, (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _sum_to(t: Tensor, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (the inverse of numpy
    broadcasting)."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    lead = t.ndim - len(shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and t.shape[lead + i] != 1:
            axes.append(lead + i)
    out = reduce_sum(t, axis=tuple(axes), keepdims=False) if axes else t
    return reshape(out, shape) if out.shape != shape else out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g, need):
        ga = matmul(g, transpose(b)) if need[0] and a.requires_grad else None
        gb = matmul(transpose(a), g) if need[1] and b.requires_grad else None
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), backward)


def dot(a, b) -> Tensor:
    """Inner product of two equal-length vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot length mismatch: {a.shape} vs {b.shape}")
    return reduce_sum(mul(a, b))


def l2_normalize(x, eps: float = 1e-12, axis=None) -> Tensor:
    """x / max(||x||, eps).  A (near-)zero vector maps to (near-)zero."""
    x = as_tensor(x)
    sq = reduce_sum(mul(x, x), axis=axis, keepdims=True)
    return div(x, clamp_min(sqrt(sq), eps))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def im2col(x, kh: int, kw: int, stride: int) -> Tensor:
    """Unfold sliding windows of a [N,C,H,W] tensor into [N, C*kh*kw, L].

    Linear gather; its adjoint is :func:`col2im`, which makes conv2d
    differentiable to arbitrary order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"im2col: kernel {kh}x{kw} larger than input {h}x{w}")

    cols6 = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    xd = x.data
    for i in range(kh):
        for j in range(kw):
            cols6[:, :, i, j] = xd[:, :, i:i + stride * (oh - 1) + 1:stride,
                                   j:j + stride * (ow - 1) + 1:stride]

    def backward(g, need):
        if not (need[0] and x.requires_grad):
            return (None,)
        return (col2im(g, (h, w), kh, kw, stride),)

    return _result("im2col", cols6.reshape(n, c * kh * kw, oh * ow), (x,), backward)


def col2im(cols, out_hw: tuple[int, int], kh: int, kw: int, stride: int) -> Tensor:
    """Scatter-add [N, C*kh*kw, L] columns back onto a [N,C,H,W] canvas
    (adjoint of :func:`im2col`)."""
    cols = as_tensor(cols)
    h, w = out_hw
    n, ckk, length = cols.shape
    c = ckk // (kh * kw)
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if c * kh * kw != ckk or oh * ow != length:
        raise ValueError("col2im: column shape inconsistent with target geometry")

    c6 = cols.data.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h, w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (oh - 1) + 1:stride,
                j:j + stride * (ow - 1) + 1:stride] += c6[:, :, i, j]

    def backward(g, need):
        if not (need[0] and cols.requires_grad):
            return (None,)
        return (im2col(g, kh, kw, stride),)

    return _result("col2im", out, (cols,), backward)


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw] filters.

    Implemented as im2col + matmul; tests hold it against a direct
    nested-loop reference to 1e-5 absolute.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = pad2d(x, padding) if padding else x
    cols = im2col(xp, kh, kw, stride)                       # [N, CK, L]
    w2 = reshape(weight, (f, c * kh * kw))
    colsm = reshape(transpose(cols, (1, 0, 2)), (c * kh * kw, n * oh * ow))
    out = matmul(w2, colsm)                                 # [F, N*L]
    out = transpose(reshape(out, (f, n, oh * ow)), (1, 0, 2))
    return reshape(out, (n, f, oh, ow))


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping mean pooling; window must divide both extents."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"avg_pool2d window {window} does not divide {h}x{w}")
    r = reshape(x, (n, c, h // window, window, w // window, window))
    return mul(reduce_sum(r, axis=(3, 5)), 1.0 / (window * window))


def global_avg_pool(x) -> Tensor:
    """Mean over the trailing two (spatial) axes."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    return mul(reduce_sum(x, axis=(-2, -1)), 1.0 / (h * w))


def global_sum_pool(x) -> Tensor:
    """Sum over the trailing two (spatial) axes."""
    x = as_tensor(x)
    return reduce_sum(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root``, leaves first.  Raises
    GraphError if a cycle is encountered."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[list] = [[root, 0]]
    state[id(root)] = 1
    while stack:
        frame = stack[-1]
        t = frame[0]
        kids = t.node.inputs if t.node is not None else ()
        if frame[1] < len(kids):
            child = kids[frame[1]]
            frame[1] += 1
            cs = state.get(id(child), 0)
            if cs == 1:
                raise GraphError("cycle detected in computation graph")
            if cs == 0:
                state[id(child)] = 1
                stack.append([child, 0])
        else:
            stack.pop()
            state[id(t)] = 2
            order.append(t)
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], build_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``inputs``.

    With ``build_graph`` the returned gradients are recorded tensors and can
    be differentiated again.  A tensor with no gradient path to the output
    (detached, constant, or simply unused) raises GraphError.
    """
    output = as_tensor(output)
    inputs = list(inputs)
    if output.size != 1:
        raise GraphError(f"gradient source must be a scalar, got shape {output.shape}")

    order = topological_order(output)
    input_ids = {id(t) for t in inputs}

    # mark tensors from which some requested input is reachable
    needed: dict[int, bool] = {}
    for t in order:  # leaves first, so children are marked before parents
        flag = id(t) in input_ids
        if not flag and t.node is not None:
            flag = any(needed[id(p)] for p in t.node.inputs)
        needed[id(t)] = flag

    grads: dict[int, Tensor] = {}
    with _recording(build_graph):
        grads[id(output)] = Tensor(np.ones_like(output.data))
        for t in reversed(order):
            if t.node is None:
                continue
            g = grads.pop(id(t), None)
            if g is None:
                continue  # pruned branch: nothing above contributed
            need = tuple(needed[id(p)] for p in t.node.inputs)
            if not any(need):
                continue
            results = t.node.backward(g, need)
            for p, gp in zip(t.node.inputs, results):
                if gp is None:
                    continue
                pid = id(p)
                held = grads.get(pid)
                grads[pid] = gp if held is None else add(held, gp)

    out = []
    for t in inputs:
        gt = grads.get(id(t))
        if gt is None:
            raise GraphError("tensor not in graph: no gradient path from the output")
        out.append(gt)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Sequence[Tensor], grads: Sequence, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             buffers: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """In-place SGD update with momentum buffer and decoupled L2 decay.

    buf <- momentum * buf + g;  p <- p - lr * buf - lr * weight_decay * p.
    Returns the (possibly newly created) momentum buffers.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"params/grads length mismatch: {len(params)} vs {len(grads)}")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if buffers is None:
        buffers = [np.zeros_like(p.data) for p in params]
    if len(buffers) != len(params):
        raise ValueError("momentum buffer count does not match params")
    for p, g, buf in zip(params, grads, buffers):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=DTYPE)
        if gd.shape != p.data.shape:
            raise ValueError(f"gradient shape {gd.shape} does not match param {p.data.shape}")
        buf *= DTYPE(momentum)
        buf += gd
        upd = DTYPE(lr) * buf
        if weight_decay:
            upd = upd + DTYPE(lr * weight_decay) * p.data
        p.data -= upd
    return buffers


class SGD:
    """Stateful wrapper around :func:`sgd_step` keyed by parameter name."""

    def __init__(self, named_params: dict[str, Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.named_params = dict(named_params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = {k: np.zeros_like(p.data) for k, p in self.named_params.items()}

    def step(self, grads: dict[str, Tensor]) -> None:
        names = list(self.named_params)
        sgd_step([self.named_params[n] for n in names],
                 [grads[n] for n in names],
                 self.lr, self.momentum, self.weight_decay,
                 buffers=[self.buffers[n] for n in names])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.buffers:
            self.buffers[k][...] = arrays[k]
