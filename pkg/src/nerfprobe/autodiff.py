"""Tape-based reverse-mode autodiff over dense float64 arrays.

Everything is numpy under the hood. A Tensor either lives on a Tape (tracked,
participates in backward) or is a free constant. Ops work on both, so the same
forward code serves training and plain evaluation.
"""
from __future__ import annotations

import struct
from collections.abc import Callable, Sequence

import numpy as np

Array = np.ndarray

CHECKPOINT_MAGIC = b"NPRB1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 value, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tracked = f" @{self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tracked})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered operation records for one reverse pass.

    Node ids are single-assignment and ascending, so descending id order is a
    valid reverse topological order. backward() never mutates the tape, so it
    can be replayed any number of times.
    """

    def __init__(self):
        # entry is None for leaves, else (input ids, pullback)
        self._nodes: list[tuple[tuple[int, ...], Callable[[Array], Sequence[Array | None]]] | None] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        self._nodes.append(None)
        return Tensor(data, self, len(self._nodes) - 1)

    def _record(self, data: Array, in_ids: tuple[int, ...], pullback) -> Tensor:
        self._nodes.append((in_ids, pullback))
        return Tensor(data, self, len(self._nodes) - 1)

    def backward(self, loss: Tensor) -> "Gradients":
        """Gradients of a scalar loss w.r.t. every tracked node reachable from it."""
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, Array] = {loss.id: np.ones_like(loss.data)}
        for node_id in range(loss.id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node is None:
                continue
            in_ids, pullback = node
            for iid, ig in zip(in_ids, pullback(g)):
                if iid < 0 or ig is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = ig if acc is None else acc + ig
        return Gradients(grads)


class Gradients:
    """Lookup of gradients by tracked Tensor. Untracked leaves yield None."""

    def __init__(self, by_id: dict[int, Array]):
        self._by_id = by_id

    def get(self, t: Tensor) -> Array | None:
        if t.tape is None or t.id is None:
            return None
        return self._by_id.get(t.id)

    def __getitem__(self, t: Tensor) -> Array:
        g = self.get(t)
        if g is None:
            raise KeyError("no gradient recorded for this tensor")
        return g


def backward(loss: Tensor) -> Gradients:
    if loss.tape is None:
        raise ValueError("loss is not tracked on any tape")
    return loss.tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _nid(t: Tensor) -> int:
    return t.id if t.tape is not None else -1


def _emit(tape: Tape | None, data: Array, ins: tuple[Tensor, ...], pullback) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape._record(data, tuple(_nid(t) for t in ins), pullback)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
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
# elementwise / binary ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _emit(_common_tape(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return _emit(_common_tape(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit(_common_tape(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _emit(_common_tape(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(_common_tape(a), -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    return _emit(_common_tape(a), a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit(_common_tape(a), out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _emit(_common_tape(a), np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _emit(_common_tape(a), out, (a,), lambda g: (g / (2.0 * out),))


def absolute(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)
    return _emit(_common_tape(a), np.abs(a.data), (a,), lambda g: (g * sign,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as err:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}") from err
    ad, bd = a.data, b.data

    def pull(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(_common_tape(a, b), out, (a, b), pull)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(_common_tape(a), out, (a,), pull)


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    return _emit(_common_tape(a), a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _emit(_common_tape(a), a.data.swapaxes(ax1, ax2), (a,),
                 lambda g: (g.swapaxes(ax1, ax2),))


def gather(a, idx) -> Tensor:
    """Take rows of `a` along axis 0; idx may have any shape."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    ad_shape = a.data.shape

    def pull(g):
        ga = np.zeros(ad_shape, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit(_common_tape(a), a.data[idx], (a,), pull)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def pull(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(offs[i], offs[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _emit(_common_tape(*parts), out, tuple(parts), pull)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(_common_tape(a), out, (a,), pull)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(_common_tape(a), out, (a,), pull)


def reduce_max(a, axis: int) -> Tensor:
    """Max along one axis; ties route gradient to the first occurrence."""
    a = _wrap(a)
    axis = axis % a.ndim
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = a.data.shape

    def pull(g):
        ga = np.zeros(shape, dtype=np.float64)
        mesh = np.ogrid[tuple(slice(s) for s in g.shape)]
        ga[tuple(mesh[:axis]) + (arg,) + tuple(mesh[axis:])] = g
        return (ga,)

    return _emit(_common_tape(a), out, (a,), pull)


# ---------------------------------------------------------------------------
# rendering-oriented ops


def weighted_sum(w, v) -> Tensor:
    """sum_k w[k] * v[k, ...] -> shape v.shape[1:]. Differentiable in both."""
    w, v = _wrap(w), _wrap(v)
    if w.ndim != 1 or v.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs values {v.shape}")
    out = np.tensordot(w.data, v.data, axes=(0, 0))
    wd, vd = w.data, v.data

    def pull(g):
        gw = np.tensordot(vd, g, axes=(tuple(range(1, vd.ndim)), tuple(range(g.ndim))))
        gv = np.multiply.outer(wd, g)
        return gw, gv

    return _emit(_common_tape(w, v), out, (w, v), pull)


def segment_sum(v, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of v into num_segments buckets keyed by segment_ids."""
    v = _wrap(v)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != v.data.shape[0]:
        raise ShapeError(f"segment_sum: ids {ids.shape} vs values {v.shape}")
    out = np.zeros((num_segments,) + v.data.shape[1:], dtype=np.float64)
    np.add.at(out, ids, v.data)
    return _emit(_common_tape(v), out, (v,), lambda g: (g[ids],))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data
    gsh, bsh = gain.data.shape, bias.data.shape

    def pull(g):
        ggain = _unbroadcast(g * xhat, gsh)
        gbias = _unbroadcast(g, bsh)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _emit(_common_tape(x, gain, bias), out, (x, gain, bias), pull)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[..., Tensor], xs: Sequence[Array], eps: float = 1e-4) -> float:
    """Max relative error of backward() vs central finite differences.

    f maps Tensors to a scalar Tensor and must be re-runnable on perturbed
    copies of xs. Relative error uses max(1, |analytic|, |numeric|) in the
    denominator.
    """
    xs = [_as_array(x) for x in xs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    loss = f(*leaves)
    if loss.data.size != 1:
        raise ValueError("grad_check expects a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise ValueError("non-finite loss value")
    grads = tape.backward(loss)

    def eval_at(pert: list[Array]) -> float:
        out = f(*[Tensor(p) for p in pert]).data
        if not np.isfinite(out).all():
            raise ValueError("non-finite loss value during finite differences")
        return float(out.reshape(()))

    worst = 0.0
    for k, x in enumerate(xs):
        ga = grads.get(leaves[k])
        ga = np.zeros_like(x) if ga is None else ga
        it = np.nditer(x, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            xp = [v.copy() for v in xs]
            xm = [v.copy() for v in xs]
            xp[k][i] += eps
            xm[k][i] -= eps
            num = (eval_at(xp) - eval_at(xm)) / (2.0 * eps)
            ana = float(ga[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
            it.iternext()
    return worst


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, params: dict[str, Array]) -> None:
    """Write parameters in the NPRB1 binary layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = np.ascontiguousarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    """Read parameters written by save_checkpoint."""
    params: dict[str, Array] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a {CHECKPOINT_MAGIC.decode()} checkpoint: magic {magic!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
            params[name] = data.astype(np.float64)
    return params
