"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves onto the tape that is active in the current
thread (see :class:`Tape`). Anything computed outside a tape is a plain
value: that is how frozen teacher networks are evaluated.
"""

from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "sum",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "clip",
    "power",
    "conv2d",
    "max_over_channel",
    "concat",
    "reshape",
    "take",
    "gather_bilinear",
    "cosine_matrix",
    "l1_sum",
    "weighted_sum",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional double-precision array that can carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._leaf = not requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, so the
    record is topologically sorted by construction.
    """

    entries: list[_Entry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self.entries.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint) -> None:
        out._tape = self
        self.entries.append(_Entry(out, inputs, adjoint))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before another backward")
        self.consumed = True
        if loss._leaf:
            if loss.requires_grad:
                _accumulate(loss, np.ones_like(loss.data))
            return
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = adjoints.pop(id(entry.out), None)
            for t in entry.inputs:
                if t._leaf and t.requires_grad:
                    leaves[id(t)] = t
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.adjoint(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._leaf:
                    _accumulate(t, gi)
                else:
                    prev = adjoints.get(id(t))
                    adjoints[id(t)] = gi if prev is None else prev + gi
        for t in leaves.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf that ``loss`` depends on."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        tape.record(out, inputs, adjoint)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _emit(a.data + float(s), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _emit(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """``[N,C,H,W]`` -> ``[N*H*W, k*k*C]`` patches, ordered (row shift, col shift, channel)."""
    n, c, h, w = xd.shape
    if k == 1:
        return xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p : p + h, p : p + w, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, k * k, c))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di * k + dj, :] = xp[:, di : di + h, dj : dj + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _kernel_matrix(kd: np.ndarray) -> np.ndarray:
    return kd.transpose(0, 2, 3, 1).reshape(kd.shape[0], -1)


def _correlate(xd: np.ndarray, kd: np.ndarray) -> np.ndarray:
    n, _, h, w = xd.shape
    co = kd.shape[0]
    out = _im2col(xd, kd.shape[-1]) @ _kernel_matrix(kd).T
    return out.reshape(n, h, w, co).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero same-padded cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]`` with odd ``k``.
    """
    xd = x.data
    batched = xd.ndim == 4
    if xd.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if not batched:
        xd = xd[None]
    n, c, h, w = xd.shape
    co, ci, k, k2 = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} outputs")
    cols = _im2col(xd, k)
    out = (cols @ _kernel_matrix(kernel.data).T + bias.data).reshape(n, h, w, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def adjoint(g):
        g4 = g if batched else g[None]
        gm = g4.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        gk = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(co, k, k, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input adjoint = correlation with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _correlate(g4, flipped)
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), adjoint)


def max_over_channel(x: Tensor) -> Tensor:
    """Per-position maximum over the channel axis (axis -3), which is dropped.

    Gradient goes to the first maximal channel.
    """
    if x.ndim < 3:
        raise ShapeError(f"max_over_channel: need [C,H,W] or [N,C,H,W], got {x.shape}")
    if x.shape[-3] == 0:
        raise ShapeError("max_over_channel: empty channel dimension")
    idx = np.expand_dims(np.argmax(x.data, axis=-3), -3)
    out = np.take_along_axis(x.data, idx, axis=-3)
    shape = x.shape

    def adjoint(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, -3), axis=-3)
        return (gx,)

    return _emit(out[..., 0, :, :], (x,), adjoint)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -3) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, index: int) -> Tensor:
    """Select ``x[index]`` along the leading axis."""
    shape = x.shape

    def adjoint(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return _emit(x.data[index].copy(), (x,), adjoint)


def gather_bilinear(fmap: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Bilinearly sample a ``[C, H, W]`` map at continuous (row, col) positions.

    Positions are clamped to ``[0, H-1] x [0, W-1]``. Returns ``[P, C]``.
    """
    if fmap.ndim != 3:
        raise ShapeError(f"gather_bilinear: map must be [C,H,W], got {fmap.shape}")
    c, h, w = fmap.shape
    r = np.clip(np.asarray(rows, dtype=np.float64).ravel(), 0.0, h - 1)
    q = np.clip(np.asarray(cols, dtype=np.float64).ravel(), 0.0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), max(h - 2, 0))
    q0 = np.minimum(np.floor(q).astype(np.intp), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr = r - r0
    fq = q - q0
    idx = (
        (r0, q0, (1 - fr) * (1 - fq)),
        (r0, q1, (1 - fr) * fq),
        (r1, q0, fr * (1 - fq)),
        (r1, q1, fr * fq),
    )
    d = fmap.data
    out = np.zeros((r.size, c))
    for ri, qi, wt in idx:
        out += d[:, ri, qi].T * wt[:, None]

    def adjoint(g):
        gm = np.zeros((h * w, c))
        for ri, qi, wt in idx:
            np.add.at(gm, ri * w + qi, g * wt[:, None])
        return (gm.T.reshape(c, h, w),)

    return _emit(out, (fmap,), adjoint)


_COS_EPS = 1e-12


def cosine_matrix(x: Tensor) -> Tensor:
    """Pairwise cosine similarity of the rows of ``x`` (``[..., P, C] -> [..., P, P]``).

    Rows whose norm is below 1e-12 have similarity 0 with everything,
    including themselves; every other diagonal entry is exactly 1.
    """
    xd = x.data
    norms = np.linalg.norm(xd, axis=-1, keepdims=True)
    live = norms > _COS_EPS
    safe = np.where(live, norms, 1.0)
    u = np.where(live, xd / safe, 0.0)
    s = u @ np.swapaxes(u, -1, -2)
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    p = xd.shape[-2]
    diag = np.arange(p)
    s[..., diag, diag] = live[..., 0].astype(np.float64)
    s = np.clip(s, -1.0, 1.0)

    def adjoint(g):
        gs = g + np.swapaxes(g, -1, -2)
        gs[..., diag, diag] = 0.0
        gu = gs @ u
        radial = np.sum(gu * u, axis=-1, keepdims=True)
        gx = np.where(live, (gu - radial * u) / safe, 0.0)
        return (gx,)

    return _emit(s, (x,), adjoint)


def _spatial_weight(weight, shape: tuple[int, ...], op: str) -> np.ndarray | None:
    if weight is None:
        return None
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=np.float64)
    if w.shape == shape:
        return w
    if len(shape) >= 3 and w.shape == shape[:-3] + shape[-2:]:
        return np.expand_dims(w, -3)
    raise ShapeError(f"{op}: weight shape {w.shape} fits neither {shape} nor its spatial shape")


def l1_sum(a: Tensor, b: Tensor, weight=None) -> Tensor:
    """``sum(weight * |a - b|)``; ``weight`` may omit the channel axis."""
    _same_shape(a, b, "l1_sum")
    w = _spatial_weight(weight, a.shape, "l1_sum")
    diff = a.data - b.data
    sgn = np.sign(diff)
    if w is not None:
        val = np.sum(np.abs(diff) * w)
        sgn = sgn * w
    else:
        val = np.sum(np.abs(diff))

    def adjoint(g):
        ga = g * sgn
        return ga, -ga

    return _emit(np.asarray(val), (a, b), adjoint)


def weighted_sum(a: Tensor, weight) -> Tensor:
    """``sum(weight * a)`` for a constant weight array of the same shape."""
    w = _spatial_weight(weight, a.shape, "weighted_sum")
    w = np.broadcast_to(w, a.shape)
    return _emit(np.asarray(np.sum(a.data * w)), (a,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class LeafCheck:
    name: str
    max_rel_error: float
    n_elements: int
    n_kinks: int
    passed: bool


@dataclass
class GradCheckReport:
    label: str
    tol: float
    leaves: list[LeafCheck]

    @property
    def passed(self) -> bool:
        return all(leaf.passed for leaf in self.leaves)

    @property
    def max_rel_error(self) -> float:
        return max((leaf.max_rel_error for leaf in self.leaves), default=0.0)

    def failing(self) -> list[str]:
        return [leaf.name for leaf in self.leaves if not leaf.passed]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kinks = builtins.sum(leaf.n_kinks for leaf in self.leaves)
        line = f"{status} {self.label}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"
        if kinks:
            line += f", {kinks} kink(s) resolved at a smaller step"
        if not self.passed:
            line += f", failing leaves: {', '.join(self.failing())}"
        return line


def grad_check(
    f: Callable[[], Tensor],
    leaves: dict[str, Tensor] | Iterable[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    label: str = "f",
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    The error of a leaf is ``max|analytic - numeric|`` divided by the largest
    gradient magnitude seen on that leaf, so near-zero entries do not blow up
    the ratio. An element that misses ``tol`` while its forward and backward
    one-sided slopes disagree by more than ``kink_tol`` (default ``tol``, same
    scaling) probably has a kink such as a ReLU hinge inside the differencing
    window. Its central difference is then redone at ``step/10`` and
    ``step/100``; the element passes if a refined estimate agrees within
    ``tol``. A wrong adjoint disagrees at every step size and still fails.
    """
    if kink_tol is None:
        kink_tol = tol
    if not isinstance(leaves, dict):
        leaves = {t.name or f"leaf{i}": t for i, t in enumerate(leaves)}
    for t in leaves.values():
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    f0 = loss.item()

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        return fp, fm

    results = []
    for name, t in leaves.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        gap = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            fp, fm = central(flat, i, step)
            numeric.flat[i] = (fp - fm) / (2 * step)
            gap.flat[i] = abs((fp - f0) - (f0 - fm)) / step
        scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-10)
        err = np.abs(analytic - numeric) / scale_
        suspect = np.flatnonzero((err.ravel() > tol) & (gap.ravel() / scale_ > kink_tol))
        kinks = 0
        for i in suspect:
            for h in (step / 10, step / 100):
                fp, fm = central(flat, i, h)
                refined = abs(analytic.flat[i] - (fp - fm) / (2 * h)) / scale_
                if refined <= tol:
                    err.flat[i] = refined
                    kinks += 1
                    break
        bad = err > tol
        worst = float(np.max(err, initial=0.0))
        results.append(LeafCheck(name, worst, flat.size, kinks, not bad.any()))
        t.grad = None
    return GradCheckReport(label, tol, results)
