"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray; primitives executed while a Tape is active
record themselves, and backward() replays the tape in reverse. Float32
is the working precision; float64 is supported for finite-difference
harnesses. Every primitive checks its output for NaN/inf.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NonFinite, NotScalarLoss, ShapeMismatch, ZeroNormRow


class Tensor:
    """Array value with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Records primitive applications; context manager activates it."""

    def __init__(self):
        self.entries: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{op} produced a non-finite value")


def _record(out_data, inputs, backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --- primitives ---

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw, "mul")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bw(g):
        return (g * s,)

    return _record(out, (a,), bw, "mul_scalar")


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        return (-g,)

    return _record(-a.data, (a,), bw, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bw, "matmul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bw(g):
        # subgradient 0 at exactly 0
        return (g * (a.data > 0),)

    return _record(out, (a,), bw, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _record(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _record(out, (a,), bw, "log")


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def bw(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _record(np.asarray(out), (a,), bw, "reduce_mean")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _record(np.asarray(out), (a,), bw, "reduce_sum")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bw, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bw, "concat")


def slice_(a: Tensor, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise ShapeMismatch("slice_ takes a tuple of slice objects")
    out = a.data[key]

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return (gx,)

    return _record(out, (a,), bw, "slice")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (a,), bw, "gather_rows")


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = a[i, cols[i]]."""
    cols = np.asarray(cols, dtype=np.int64)
    n = a.data.shape[0]
    if cols.shape != (n,):
        raise ShapeMismatch(f"take_per_row cols {cols.shape} vs rows {n}")
    rows = np.arange(n)
    out = a.data[rows, cols]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(out, (a,), bw, "take_per_row")


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bw, "softmax_rows")


def colgroup_max(a: Tensor, groups: np.ndarray, num_groups: int) -> Tensor:
    """Per-row max over column groups; out[i, g] = max over cols with groups==g.

    Subgradient flows to the first (lowest-index) maximizing column.
    """
    groups = np.asarray(groups, dtype=np.int64)
    n, m = a.data.shape
    if groups.shape != (m,):
        raise ShapeMismatch(f"colgroup_max groups {groups.shape} vs cols {m}")
    out = np.empty((n, num_groups), dtype=a.data.dtype)
    arg = np.empty((n, num_groups), dtype=np.int64)
    rows = np.arange(n)
    for gid in range(num_groups):
        cols = np.flatnonzero(groups == gid)
        if cols.size == 0:
            raise ShapeMismatch(f"column group {gid} is empty")
        block = a.data[:, cols]
        local = block.argmax(axis=1)
        out[:, gid] = block[rows, local]
        arg[:, gid] = cols[local]

    def bw(g):
        gx = np.zeros_like(a.data)
        for gid in range(num_groups):
            np.add.at(gx, (rows, arg[:, gid]), g[:, gid])
        return (gx,)

    return _record(out, (a,), bw, "colgroup_max")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of a (n,d) and b (m,d)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeMismatch(f"cosine_rows {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if na.min(initial=np.inf) < 1e-12 or nb.min(initial=np.inf) < 1e-12:
        raise ZeroNormRow("cosine of a zero-norm row")
    out = (a.data @ b.data.T) / (na[:, None] * nb[None, :])

    def bw(g):
        gn = g / nb[None, :]
        ga = (gn @ b.data) / na[:, None] \
            - a.data * ((g * out).sum(axis=1) / (na * na))[:, None]
        gm = g / na[:, None]
        gb = (gm.T @ a.data) / nb[:, None] \
            - b.data * ((g * out).sum(axis=0) / (nb * nb))[:, None]
        return ga, gb

    return _record(out, (a, b), bw, "cosine_rows")


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    x is (H, W, Cin), k is (kh, kw, Cin, Cout) with odd kh, kw;
    output is (H, W, Cout) with zero padding outside the frame.
    """
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeMismatch(f"conv2d x {x.data.shape} k {k.data.shape}")
    kh, kw, cin, cout = k.data.shape
    if x.data.shape[2] != cin:
        raise ShapeMismatch(f"conv2d channels {x.data.shape[2]} vs kernel {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("conv2d kernel dims must be odd")
    out = _corr(x.data, k.data)

    def bw(g):
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
        gk = np.einsum("hwcuv,hwo->uvco", win, g, optimize=True)
        # input grad is a same-padded correlation with the flipped kernel
        kf = k.data[::-1, ::-1].transpose(0, 1, 3, 2)
        gx = _corr(g, np.ascontiguousarray(kf))
        return gx.astype(x.data.dtype, copy=False), gk.astype(k.data.dtype, copy=False)

    return _record(out, (x, k), bw, "conv2d")


def _corr(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # win: (H, W, Cin, kh, kw)
    return np.einsum("hwcuv,uvco->hwo", win, k, optimize=True)


_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "gather_rows": gather_rows,
    "take_per_row": take_per_row,
    "softmax_rows": softmax_rows,
    "colgroup_max": colgroup_max,
    "cosine_rows": cosine_rows,
    "conv2d": conv2d,
}


def apply_primitive(name: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; records on the active tape."""
    try:
        fn = _PRIMITIVES[name]
    except KeyError:
        raise ConfigError(f"unknown primitive {name!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of requires_grad leaves."""
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.data.shape}")
    interior = {id(node.out) for node in tape.entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in interior:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi.astype(t.data.dtype, copy=False)
    tape.entries.clear()


def grad_check(fn, params, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    fn(*params) must rebuild the scalar loss from scratch on every call.
    Error per entry is |analytic - fd| / max(1, |analytic|, |fd|).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"grad_check eps {eps} outside [1e-5, 1e-2]")
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = fn(*params)
        backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*params).data)
            flat[i] = orig - eps
            dn = float(fn(*params).data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            err = abs(float(aflat[i]) - fd) / max(1.0, abs(float(aflat[i])), abs(fd))
            if err > worst:
                worst = err
    return worst
