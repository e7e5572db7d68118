"""Dense float64 tensors with reverse-mode differentiation on a dynamic tape.

Every model formula in this package is expressed through the primitives
below, so a single finite-difference checker (`grad_check`) can validate
the whole system end to end. The tape is define-by-run: each forward pass
builds a fresh graph, which is what variable-size counterfactual batches
need.

Conventions:
  * all data is float64, C-contiguous, row-major;
  * `backward` accumulates into `.grad` — call `zero_grad` between passes;
  * broadcasting is limited to what the primitives need: same-shape ops,
    row-broadcast bias adds ([N, d] + [d]) and python scalars.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True
_active_tape: "Tape | None" = None


class Tensor:
    """A dense float64 array plus its place in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_recompute")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._recompute: Callable[[], np.ndarray] | None = None
        if _active_tape is not None:
            _active_tape.nodes.append(self)

    # -- introspection ----------------------------------------------------

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be a view or an array the caller reuses
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of one forward pass.

    Creation order is a topological order (parents are created first).
    `replay` re-executes every recorded primitive in place, so mutating a
    leaf's `.data` and replaying propagates the change through the graph.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> None:
        for node in self.nodes:
            if node._recompute is not None:
                node.data[...] = node._recompute()


@contextlib.contextmanager
def recording(tape: Tape):
    """Route tensor creation through `tape` so it can be replayed later."""
    global _active_tape
    previous = _active_tape
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (evaluation / mining fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    recompute: Callable[[], np.ndarray] | None = None,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward_fn = backward_fn if track else None
    out._recompute = recompute if _active_tape is not None else None
    if _active_tape is not None:
        _active_tape.nodes.append(out)
    return out


# -- primitives -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b for same-shape tensors, [N, d] + [d] bias rows, or a scalar."""
    if isinstance(b, Tensor):
        # same-shape is the overwhelmingly common case (residual connections)
        if a.data.shape == b.data.shape:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g)

            return _node(a.data + b.data, (a, b), bwd, lambda: a.data + b.data)

        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g.sum(axis=0))

            return _node(a.data + b.data, (a, b), bwd, lambda: a.data + b.data)

        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not conform")

    c = float(b)
    data = a.data + c

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)

    return _node(data, (a,), bwd, lambda: a.data + c)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.data - b.data, (a, b), bwd, lambda: a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), bwd, lambda: a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(a.data * c, (a,), bwd, lambda: a.data * c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd, lambda: a.data @ b.data)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _node(np.ascontiguousarray(a.data.T), (a,), bwd,
                 lambda: np.ascontiguousarray(a.data.T))


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ValueError(f"swap_last_axes: need rank >= 2, got shape {a.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), bwd,
                 lambda: np.ascontiguousarray(np.swapaxes(a.data, -1, -2)))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: [h, n, k] @ [h, k, m] -> [h, n, m]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bwd, lambda: a.data @ b.data)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """[n, d] -> [heads, n, d/heads], splitting the width into head slices."""
    if a.ndim != 2 or a.shape[1] % heads != 0:
        raise ValueError(f"split_heads: cannot split shape {a.shape} into {heads} heads")
    n, d = a.shape
    dk = d // heads

    def fwd():
        return np.ascontiguousarray(a.data.reshape(n, heads, dk).transpose(1, 0, 2))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(1, 0, 2).reshape(n, d))

    return _node(fwd(), (a,), bwd, fwd)


def merge_heads(a: Tensor) -> Tensor:
    """[heads, n, dk] -> [n, heads*dk], the inverse of split_heads."""
    if a.ndim != 3:
        raise ValueError(f"merge_heads: need [heads, n, dk], got shape {a.shape}")
    heads, n, dk = a.shape

    def fwd():
        return np.ascontiguousarray(a.data.transpose(1, 0, 2).reshape(n, heads * dk))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(n, heads, dk).transpose(1, 0, 2))

    return _node(fwd(), (a,), bwd, fwd)


def attention_core(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                   wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   heads: int) -> tuple[Tensor, np.ndarray]:
    """Complete multi-head scaled-dot-product attention as a single node.

    [n, d] query rows against [m, d] key/value rows with four d×d
    projections. Fusing the whole block keeps the graph an order of magnitude
    smaller than composing it from primitives, which dominates training time.
    Returns the attended rows plus the head-averaged post-softmax weights as
    a plain array (diagnostic only, not part of the graph).
    """
    d = wq.shape[0]
    if q_in.shape[1] != d or k_in.shape[1] != d or v_in.shape[1] != d:
        raise ValueError(
            f"attention: token widths {q_in.shape}/{k_in.shape}/{v_in.shape} "
            f"do not match projection width {d}")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (d, d):
            raise ValueError(f"attention: {name} must be ({d}, {d}), got {w.shape}")
    if heads < 1 or d % heads:
        raise ValueError(f"attention: {heads} heads do not divide width {d}")
    n, m = q_in.shape[0], k_in.shape[0]
    dk = d // heads
    inv_sqrt = 1.0 / math.sqrt(dk)

    def split(x: np.ndarray) -> np.ndarray:  # [t, d] -> [heads, t, dk]
        return x.reshape(x.shape[0], heads, dk).transpose(1, 0, 2)

    def forward():
        q = split(q_in.data @ wq.data)
        k = split(k_in.data @ wk.data)
        v = split(v_in.data @ wv.data)
        s = q @ k.transpose(0, 2, 1)
        s *= inv_sqrt
        s -= s.max(axis=2, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=2, keepdims=True)
        merged = (s @ v).transpose(1, 0, 2).reshape(n, d)
        return q, k, v, s, merged, merged @ wo.data

    q, k, v, attn, merged, out_data = forward()

    def bwd(g):
        if wo.requires_grad:
            wo._accumulate(merged.T @ g)
        g_out = split(g @ wo.data.T)                       # [heads, n, dk]
        g_attn = g_out @ v.transpose(0, 2, 1)              # [heads, n, m]
        g_v = attn.transpose(0, 2, 1) @ g_out              # [heads, m, dk]
        g_s = attn * (g_attn - (g_attn * attn).sum(axis=2, keepdims=True))
        g_s *= inv_sqrt
        g_q = (g_s @ k).transpose(1, 0, 2).reshape(n, d)
        g_k = (g_s.transpose(0, 2, 1) @ q).transpose(1, 0, 2).reshape(m, d)
        g_v = g_v.transpose(1, 0, 2).reshape(m, d)
        if wq.requires_grad:
            wq._accumulate(q_in.data.T @ g_q)
        if q_in.requires_grad:
            q_in._accumulate(g_q @ wq.data.T)
        if wk.requires_grad:
            wk._accumulate(k_in.data.T @ g_k)
        if k_in.requires_grad:
            k_in._accumulate(g_k @ wk.data.T)
        if wv.requires_grad:
            wv._accumulate(v_in.data.T @ g_v)
        if v_in.requires_grad:
            v_in._accumulate(g_v @ wv.data.T)

    out = _node(out_data, (q_in, k_in, v_in, wq, wk, wv, wo), bwd,
                lambda: forward()[5])
    return out, attn.mean(axis=0)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape: cannot view shape {a.shape} as {shape}")
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _node(a.data.reshape(shape).copy(), (a,), bwd,
                 lambda: a.data.reshape(shape).copy())


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input list")
    ndim = parts[0].ndim
    if not (-ndim <= axis < ndim):
        raise ValueError(f"concat: axis {axis} invalid for rank {ndim}")
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ValueError(f"concat: ranks differ ({parts[0].shape} vs {p.shape})")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * ndim
                index[axis] = slice(int(lo), int(hi))
                p._accumulate(g[tuple(index)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd,
                 lambda: np.concatenate([p.data for p in parts], axis=axis))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (inverse of concat)."""
    if not (0 <= axis < a.ndim):
        raise ValueError(f"narrow: axis {axis} invalid for shape {a.shape}")
    if start < 0 or length <= 0 or start + length > a.shape[axis]:
        raise ValueError(
            f"narrow: window [{start}, {start + length}) outside axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return _node(a.data[index].copy(), (a,), bwd, lambda: a.data[index].copy())


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size

        def bwd(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, float(g) / n))

        return _node(np.mean(a.data), (a,), bwd, lambda: np.mean(a.data))

    if not (0 <= axis < a.ndim):
        raise ValueError(f"mean: axis {axis} invalid for shape {a.shape}")
    n = a.shape[axis]

    def bwd_axis(g):
        if a.requires_grad:
            a._accumulate(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _node(a.data.mean(axis=axis), (a,), bwd_axis, lambda: a.data.mean(axis=axis))


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, float(g)))

        return _node(np.sum(a.data), (a,), bwd, lambda: np.sum(a.data))

    if not (0 <= axis < a.ndim):
        raise ValueError(f"sum: axis {axis} invalid for shape {a.shape}")
    n = a.shape[axis]

    def bwd_axis(g):
        if a.requires_grad:
            a._accumulate(np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return _node(a.data.sum(axis=axis), (a,), bwd_axis, lambda: a.data.sum(axis=axis))


def softmax(a: Tensor, axis: int) -> Tensor:
    if not (-a.ndim <= axis < a.ndim):
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ValueError(f"softmax: axis {axis} of shape {a.shape} is empty")

    def fwd():
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    data = fwd()

    def bwd(g):
        if a.requires_grad:
            y = data
            a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(data, (a,), bwd, fwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd,
                 lambda: np.where(a.data > 0, a.data, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    def fwd():
        return 1.0 / (1.0 + np.exp(-a.data))

    data = fwd()

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), bwd, fwd)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated gelu; finite differences match this exact form."""

    def fwd():
        x = a.data
        u = _GELU_C * (x + 0.044715 * x ** 3)
        return 0.5 * x * (1.0 + np.tanh(u))

    data = fwd()

    def bwd(g):
        if a.requires_grad:
            x = a.data
            u = _GELU_C * (x + 0.044715 * x ** 3)
            t = np.tanh(u)
            du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du))

    return _node(data, (a,), bwd, fwd)


def gelu_mlp(a: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear -> gelu -> linear fused into one node (hot path in training)."""
    if a.ndim != 2 or a.shape[1] != w1.shape[0]:
        raise ValueError(f"gelu_mlp: input {a.shape} does not match w1 {w1.shape}")
    if w1.shape[1] != w2.shape[0] or b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
        raise ValueError("gelu_mlp: layer shapes do not chain")

    def forward():
        h = a.data @ w1.data + b1.data
        u = _GELU_C * (h + 0.044715 * h ** 3)
        act = 0.5 * h * (1.0 + np.tanh(u))
        return h, act, act @ w2.data + b2.data

    hidden, act, out_data = forward()

    def bwd(g):
        if w2.requires_grad:
            w2._accumulate(act.T @ g)
        if b2.requires_grad:
            b2._accumulate(g.sum(axis=0))
        g_act = g @ w2.data.T
        u = _GELU_C * (hidden + 0.044715 * hidden ** 3)
        t = np.tanh(u)
        du = _GELU_C * (1.0 + 3 * 0.044715 * hidden ** 2)
        g_h = g_act * (0.5 * (1.0 + t) + 0.5 * hidden * (1.0 - t ** 2) * du)
        if w1.requires_grad:
            w1._accumulate(a.data.T @ g_h)
        if b1.requires_grad:
            b1._accumulate(g_h.sum(axis=0))
        if a.requires_grad:
            a._accumulate(g_h @ w1.data.T)

    return _node(out_data, (a, w1, b1, w2, b2), bwd, lambda: forward()[2])


def layer_norm(a: Tensor, scale_p: Tensor, shift_p: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if scale_p.shape != (d,) or shift_p.shape != (d,):
        raise ValueError(
            f"layer_norm: scale {scale_p.shape} / shift {shift_p.shape} do not match width ({d},)")

    def stats():
        # spelled out with sums: ndarray.mean/var go through a slow python
        # wrapper that dominates at these tiny widths
        x = a.data
        mu = x.sum(axis=-1, keepdims=True) / d
        diff = x - mu
        var = (diff * diff).sum(axis=-1, keepdims=True) / d
        inv = 1.0 / np.sqrt(var + eps)
        return diff * inv, inv

    def fwd():
        xhat, _ = stats()
        return xhat * scale_p.data + shift_p.data

    xhat, inv = stats()
    data = xhat * scale_p.data + shift_p.data

    def bwd(g):
        if scale_p.requires_grad:
            scale_p._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if shift_p.requires_grad:
            shift_p._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * scale_p.data
            m1 = gx.sum(axis=-1, keepdims=True) / d
            m2 = (gx * xhat).sum(axis=-1, keepdims=True) / d
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _node(data, (a, scale_p, shift_p), bwd, fwd)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between two same-shape tensors, as a scalar.

    The gradient at a == b is taken to be zero (subgradient choice).
    """
    if a.shape != b.shape:
        raise ValueError(f"l2_distance: shapes {a.shape} and {b.shape} do not conform")

    def fwd():
        return np.sqrt(np.sum((a.data - b.data) ** 2))

    dist = fwd()

    def bwd(g):
        if dist == 0.0:
            return
        direction = (a.data - b.data) / dist
        if a.requires_grad:
            a._accumulate(float(g) * direction)
        if b.requires_grad:
            b._accumulate(-float(g) * direction)

    return _node(np.asarray(dist), (a, b), bwd, fwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shapes {a.shape} and {b.shape} do not conform")

    na = np.sqrt(np.sum(a.data ** 2))
    nb = np.sqrt(np.sum(b.data ** 2))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm input")
    cos = float(np.sum(a.data * b.data) / (na * nb))

    def fwd():
        return np.asarray(np.sum(a.data * b.data)
                          / (np.sqrt(np.sum(a.data ** 2)) * np.sqrt(np.sum(b.data ** 2))))

    def bwd(g):
        g = float(g)
        if a.requires_grad:
            a._accumulate(g * (b.data / (na * nb) - cos * a.data / (na * na)))
        if b.requires_grad:
            b._accumulate(g * (a.data / (na * nb) - cos * b.data / (nb * nb)))

    return _node(np.asarray(cos), (a, b), bwd, fwd)


def l2_normalize(a: Tensor) -> Tensor:
    norm = np.sqrt(np.sum(a.data ** 2))
    if norm == 0.0:
        raise ValueError("l2_normalize: zero-norm input")

    def fwd():
        return a.data / np.sqrt(np.sum(a.data ** 2))

    y = a.data / norm

    def bwd(g):
        if a.requires_grad:
            a._accumulate((g - y * np.sum(g * y)) / norm)

    return _node(y, (a,), bwd, fwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table`; gradients scatter-add back into the rows."""
    idx = np.asarray(list(ids), dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"embedding: table must be a matrix, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range for table with {table.shape[0]} rows")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _node(table.data[idx].copy(), (table,), bwd, lambda: table.data[idx].copy())


# -- reverse pass -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad ancestor of a scalar loss.

    Repeated calls without `zero_grad` accumulate, which is the documented
    behavior (gradient accumulation over micro-batches).
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for coordinate i is |analytic - numeric| / max(1, |analytic|,
    |numeric|). `function` must be deterministic: it is evaluated twice at
    `point` and a bit-exact mismatch is rejected.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")

    probe = Tensor(point.data)
    v1 = function(probe).data.copy()
    v2 = function(Tensor(point.data)).data.copy()
    if not np.array_equal(v1, v2):
        raise ValueError("grad_check: function is not deterministic (double evaluation differs)")

    x = Tensor(point.data, requires_grad=True)
    out = function(x)
    if out.shape != ():
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(function(Tensor(x.data)).data)
            flat[i] = orig - step
            lo = float(function(Tensor(x.data)).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
