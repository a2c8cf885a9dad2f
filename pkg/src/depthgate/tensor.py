"""Reverse-mode automatic differentiation over dense float32 numpy arrays.

A Tensor wraps one float32 ndarray. While a Tape is active, every primitive
that touches a gradient-requiring input appends a backward rule to the tape;
`Tape.backward` replays the rules once in reverse append order (which is a
valid topological order by construction) and accumulates gradients into every
tensor that wants them. With no tape active the same primitives run as plain
numpy calls, so inference pays no bookkeeping cost.

Every primitive validates operand shapes up front and checks its output for
NaN/Inf, so numeric faults surface at the op that produced them rather than
three modules later in a loss value.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-5
MASK_FILL = -1e9


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericFault(ArithmeticError):
    """A primitive produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, non-scalar loss, and so on."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE: "Tape | None" = None


class Tape:
    """Append-ordered record of primitive applications.

    Use as a context manager around the forward pass; call `backward(loss)`
    afterwards (inside or outside the `with` block). A tape is single-use:
    backward consumes it, and a second call raises TapeError.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self):
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> None:
        out.requires_grad = True
        out._recorded = True
        self._nodes.append((out, inputs, bwd))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into x.grad for every recorded tensor x.

        Intermediate gradients are released as soon as their producing node
        has been processed; only un-recorded tensors (the leaves, i.e. the
        parameters) keep their gradients afterwards.
        """
        if self.consumed:
            raise TapeError("backward called on a consumed tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError("backward needs a scalar loss tensor")
        if not loss._recorded:
            raise TapeError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, bwd in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = bwd(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
            out.grad = None
        self.consumed = True
        self._nodes.clear()


def _active_tape(*tensors) -> Tape | None:
    if _TAPE is None:
        return None
    for t in tensors:
        if isinstance(t, Tensor) and t.requires_grad:
            return _TAPE
    return None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericFault(f"{op} produced non-finite values")


def _quiet():
    # overflow is reported through NumericFault, not numpy warnings
    return np.errstate(over="ignore", invalid="ignore")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=DTYPE))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=DTYPE))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _as_pair("add", a, b)
    with _quiet():
        out = Tensor(a.data + b.data)
    _check_finite("add", out.data)
    tape = _active_tape(a, b)
    if tape is not None:
        ash, bsh = a.shape, b.shape
        tape._record(out, (a, b), lambda g: (_reduce_to(g, ash), _reduce_to(g, bsh)))
    return out


def sub(a, b) -> Tensor:
    a, b = _as_pair("sub", a, b)
    with _quiet():
        out = Tensor(a.data - b.data)
    _check_finite("sub", out.data)
    tape = _active_tape(a, b)
    if tape is not None:
        ash, bsh = a.shape, b.shape
        tape._record(out, (a, b), lambda g: (_reduce_to(g, ash), _reduce_to(-g, bsh)))
    return out


def mul(a, b) -> Tensor:
    a, b = _as_pair("mul", a, b)
    with _quiet():
        out = Tensor(a.data * b.data)
    _check_finite("mul", out.data)
    tape = _active_tape(a, b)
    if tape is not None:
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        tape._record(out, (a, b), lambda g: (_reduce_to(g * bd, ash), _reduce_to(g * ad, bsh)))
    return out


def scale(x: Tensor, a: float) -> Tensor:
    a = float(a)
    with _quiet():
        out = Tensor(x.data * np.float32(a))
    _check_finite("scale", out.data)
    tape = _active_tape(x)
    if tape is not None:
        tape._record(out, (x,), lambda g: (g * np.float32(a),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two tensors")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch("matmul", ad.shape, bd.shape)
    try:
        with _quiet():
            out_data = ad @ bd
    except ValueError:
        raise ShapeMismatch("matmul", ad.shape, bd.shape) from None
    out = Tensor(out_data)
    _check_finite("matmul", out.data)
    tape = _active_tape(a, b)
    if tape is not None:

        def bwd(g):
            ga = _reduce_to(g @ bd.swapaxes(-1, -2), ad.shape)
            if bd.ndim == 2 and ad.ndim > 2:
                # flat sgemm beats a batched matmul + reduce for weight grads
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(ad.swapaxes(-1, -2) @ g, bd.shape)
            return ga, gb

        tape._record(out, (a, b), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    _check_finite("relu", out.data)
    tape = _active_tape(x)
    if tape is not None:
        pos = x.data > 0
        tape._record(out, (x,), lambda g: (g * pos,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    posm = xd >= 0
    negm = ~posm
    out_data[posm] = 1.0 / (1.0 + np.exp(-xd[posm]))
    e = np.exp(xd[negm])
    out_data[negm] = e / (1.0 + e)
    out = Tensor(out_data)
    _check_finite("sigmoid", out.data)
    tape = _active_tape(x)
    if tape is not None:
        s = out.data
        tape._record(out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    _check_finite("layer_norm", out.data)
    tape = _active_tape(x, gain, bias)
    if tape is not None:
        gd = gain.data

        def bwd(g):
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            axes = tuple(range(g.ndim - 1))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        tape._record(out, (x, gain, bias), bwd)
    return out


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    _check_finite("softmax", out.data)
    tape = _active_tape(x)
    if tape is not None:
        s = out.data

        def bwd(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            return (s * (g - dot),)

        tape._record(out, (x,), bwd)
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeMismatch("masked_fill", x.shape, mask.shape) from None
    out = Tensor(np.where(mask, np.float32(value), x.data))
    # no finite check: the fill value is intentionally huge but finite
    tape = _active_tape(x)
    if tape is not None:
        keep = ~mask
        tape._record(out, (x,), lambda g: (_reduce_to(g * keep, x.shape),))
    return out


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[idx[...], :]."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    out = Tensor(table.data[idx])
    _check_finite("embedding", out.data)
    tape = _active_tape(table)
    if tape is not None:
        shape = table.shape

        def bwd(g):
            gt = np.zeros(shape, dtype=DTYPE)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[-1]))
            return (gt,)

        tape._record(out, (table,), bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    tape = _active_tape(x)
    if tape is not None:
        orig = x.shape
        tape._record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    tape = _active_tape(x)
    if tape is not None:
        inverse = tuple(np.argsort(axes))
        tape._record(out, (x,), lambda g: (g.transpose(inverse),))
    return out


def mean(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim)) if axes is None else tuple(np.atleast_1d(axes))
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    out_data = x.data.mean(axis=axes, dtype=np.float64).astype(DTYPE)
    out = Tensor(out_data)
    _check_finite("mean", out.data)
    tape = _active_tape(x)
    if tape is not None:
        shape = x.shape
        expand = tuple(1 if i in axes else s for i, s in enumerate(shape))

        def bwd(g):
            return (np.broadcast_to(g.reshape(expand), shape) / np.float32(n),)

        tape._record(out, (x,), bwd)
    return out


def sum_(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim)) if axes is None else tuple(np.atleast_1d(axes))
    out = Tensor(x.data.sum(axis=axes, dtype=np.float64).astype(DTYPE))
    _check_finite("sum", out.data)
    tape = _active_tape(x)
    if tape is not None:
        shape = x.shape
        expand = tuple(1 if i in axes else s for i, s in enumerate(shape))
        tape._record(out, (x,), lambda g: (np.broadcast_to(g.reshape(expand), shape).copy(),))
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token-level cross-entropy from raw logits, in nats.

    targets holds integer class ids shaped like logits minus the last axis.
    With a boolean mask, only True positions contribute (mean over them);
    an all-False mask is an error rather than a silent 0/0.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError("cross_entropy targets must be integers")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy target out of range [0, {v})")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != targets.shape:
            raise ShapeMismatch("cross_entropy", mask.shape, targets.shape)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("cross_entropy: mask selects no positions")
    else:
        n = targets.size

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    lse = np.log(sez) + m
    picked = np.take_along_axis(x, targets[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    if mask is not None:
        total = float((nll * mask).sum(dtype=np.float64))
    else:
        total = float(nll.sum(dtype=np.float64))
    out = Tensor(np.asarray(total / n, dtype=DTYPE))
    _check_finite("cross_entropy", out.data)
    tape = _active_tape(logits)
    if tape is not None:
        probs = ez / sez

        def bwd(g):
            d = probs.copy()
            hit = np.take_along_axis(d, targets[..., None], axis=-1) - 1.0
            np.put_along_axis(d, targets[..., None], hit, axis=-1)
            if mask is not None:
                d *= mask[..., None]
            d *= np.asarray(float(g) / n, dtype=d.dtype)
            return (d,)

        tape._record(out, (logits,), bwd)
    return out


class GradCheckReport:
    """Per-parameter worst-case comparison of analytic vs finite-difference grads."""

    def __init__(self, rel_tol: float, abs_tol: float):
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol
        self.entries: dict[str, tuple[float, float, int]] = {}

    def record(self, name: str, analytic: np.ndarray, fd: np.ndarray) -> None:
        diff = np.abs(analytic - fd)
        tol = self.abs_tol + self.rel_tol * np.maximum(np.abs(analytic), np.abs(fd))
        ratio = diff / tol
        worst = int(ratio.argmax()) if ratio.size else 0
        self.entries[name] = (float(diff.max(initial=0.0)), float(ratio.max(initial=0.0)), worst)

    @property
    def passed(self) -> bool:
        return all(ratio <= 1.0 for _, ratio, _ in self.entries.values())

    def failures(self) -> list[str]:
        return [n for n, (_, ratio, _) in self.entries.items() if ratio > 1.0]

    def __str__(self):
        lines = []
        for name, (diff, ratio, idx) in sorted(self.entries.items()):
            mark = "ok " if ratio <= 1.0 else "BAD"
            lines.append(f"{mark} {name}: max|a-fd|={diff:.3e} worst_ratio={ratio:.3f} at flat index {idx}")
        return "\n".join(lines)


def grad_check(model_fn, params: dict[str, Tensor], rel_tol: float = 1e-2,
               abs_tol: float = 1e-4, step: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of `model_fn(params) -> scalar Tensor` against
    central finite differences, parameter by parameter, scalar by scalar.

    The finite-difference side only ever calls the forward, so it stays
    independent of the backward rules it is checking.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = model_fn(params)
    tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()

    report = GradCheckReport(rel_tol, abs_tol)
    h = np.float32(step)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(model_fn(params).data)
            flat[i] = orig - h
            down = float(model_fn(params).data)
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * float(h))
        report.record(name, analytic[name].reshape(-1).astype(np.float64), fd)
    return report
