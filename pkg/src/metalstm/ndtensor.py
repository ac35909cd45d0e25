"""Dense float64 tensors and a reverse-mode differentiation tape.

Everything the meta-learners compute is recorded as a chain of primitive
operations on a :class:`Tape`.  A single backward sweep over the recorded
nodes then yields gradients for every registered parameter, including
gradients that flow through arbitrarily long unrolled adaptation loops.

The tape is define-by-run and rebuilt for every meta-batch; nodes are stored
in creation order, which is automatically a topological order because an
operation can only consume tensors that already exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op, parents, bwd):
        self.op = op            # primitive name, for diagnostics
        self.parents = parents  # tuple of parent node ids
        self.bwd = bwd          # grad_out -> tuple of parent grads (or None)


class Tensor:
    """Immutable view of one value on a tape."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.tape.nodes[self.idx].op})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _lift(self.tape, other).__sub__(self)

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, lambda a, b: a / b,
                       lambda g, a, b: (_unbroadcast(g / b, a.shape),
                                        _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _lift(self.tape, other).__truediv__(self)

    def __neg__(self):
        return self.tape._record("neg", -self.data, (self.idx,), lambda g: (-g,))

    def __matmul__(self, other):
        other = _lift(self.tape, other)
        a, b = self.data, other.data
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1 if a.ndim > 1 else 0] != b.shape[0]:
            if a.ndim == 0 or b.ndim == 0:
                raise ShapeError("matmul needs at least 1-D operands")
        try:
            out = a @ b
        except ValueError as e:
            raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}: {e}") from None

        if a.ndim == 2 and b.ndim == 2:
            bwd = lambda g: (g @ b.T, a.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            bwd = lambda g: (b @ g, np.outer(a, g))
        elif a.ndim == 2 and b.ndim == 1:
            bwd = lambda g: (np.outer(g, b), a.T @ g)
        elif a.ndim == 1 and b.ndim == 1:
            bwd = lambda g: (g * b, g * a)
        else:
            raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")
        return self.tape._record("matmul", out, (self.idx, other.idx), bwd)

    # -- shape ops ----------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.data.shape}")
        return self.tape._record("transpose", self.data.T, (self.idx,), lambda g: (g.T,))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return self.tape._record("reshape", self.data.reshape(shape), (self.idx,),
                                 lambda g: (g.reshape(orig),))

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        if np.isscalar(out):
            out = np.asarray(out)
        orig_shape = self.data.shape

        def bwd(g):
            full = np.zeros(orig_shape)
            full[key] = g
            return (full,)

        return self.tape._record("slice", np.array(out), (self.idx,), bwd)

    def repeat_rows(self, n: int) -> "Tensor":
        """Vector [d] -> matrix [n, d] with identical rows."""
        if self.data.ndim != 1:
            raise ShapeError("repeat_rows expects a vector")
        out = np.broadcast_to(self.data, (n, self.data.shape[0])).copy()
        return self.tape._record("repeat_rows", out, (self.idx,), lambda g: (g.sum(axis=0),))

    def tile_rows(self, m: int) -> "Tensor":
        """Matrix [r, c] -> [m*r, c], m stacked copies."""
        if self.data.ndim != 2:
            raise ShapeError("tile_rows expects a matrix")
        r, c = self.data.shape
        out = np.tile(self.data, (m, 1))
        return self.tape._record("tile_rows", out, (self.idx,),
                                 lambda g: (g.reshape(m, r, c).sum(axis=0),))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape, nd = self.data.shape, self.data.ndim

        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy() if g.shape != shape else g,)

        return self.tape._record("sum", np.asarray(out), (self.idx,), bwd)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions ----------------------------------------------

    def square(self) -> "Tensor":
        a = self.data
        return self.tape._record("square", a * a, (self.idx,), lambda g: (g * 2.0 * a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return self.tape._record("sqrt", out, (self.idx,),
                                 lambda g: (g * 0.5 / out,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self.tape._record("exp", out, (self.idx,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return self.tape._record("log", np.log(a), (self.idx,), lambda g: (g / a,))


def _lift(tape: "Tape", x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _binary(op, a: Tensor, b, fwd, bwd) -> Tensor:
    b = _lift(a.tape, b)
    ad, bd = a.data, b.data
    try:
        out = fwd(ad, bd)
    except ValueError as e:
        raise ShapeError(f"{op} shapes {ad.shape}, {bd.shape}: {e}") from None
    return a.tape._record(op, out, (a.idx, b.idx), lambda g: bwd(g, ad, bd))


class Tape:
    """Recorded computation graph; creation order is topological order."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._params: list[Tensor] = []
        self._param_names: list[str | None] = []
        self.check_finite = check_finite

    # -- construction --------------------------------------------------------

    def _record(self, op: str, data: np.ndarray, parents: tuple, bwd) -> Tensor:
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        if self.check_finite and not np.isfinite(data).all():
            raise NumericError(f"non-finite result in op '{op}'")
        if data.flags.writeable:
            data.flags.writeable = False
        idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, bwd))
        self._values.append(data)
        return Tensor(self, idx, data)

    def constant(self, data) -> Tensor:
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("constant holds non-finite values")
        return self._record("const", arr, (), None)

    def parameter(self, data, name: str | None = None) -> Tensor:
        arr = _as_array(data).copy()
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter '{name}' holds non-finite values")
        t = self._record("param", arr, (), None)
        self._params.append(t)
        self._param_names.append(name)
        return t

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params)

    @property
    def named_parameters(self) -> dict[str, Tensor]:
        """Registered parameters that were given a name, keyed by it."""
        return {n: t for n, t in zip(self._param_names, self._params) if n is not None}

    # -- differentiation -----------------------------------------------------

    def backward(self, loss: Tensor, wrt=None) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients keyed by tensor for every entry of `wrt` (the
        registered parameters by default).  Tensors with no path to the loss
        get zero gradients of matching shape.
        """
        if loss.tape is not self:
            raise ValueError("loss recorded on a different tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        targets = self._params if wrt is None else list(wrt)

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(loss.data)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.bwd is None:
                continue
            parent_grads = node.bwd(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg

        out: dict[Tensor, np.ndarray] = {}
        for t in targets:
            g = grads[t.idx]
            out[t] = np.zeros_like(t.data) if g is None else np.asarray(g)
        return out


# -- module-level primitives --------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    tape = tensors[0].tape
    tensors = [_lift(tape, t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record("concat", out, tuple(t.idx for t in tensors), bwd)


def stack_last(a: Tensor, b: Tensor) -> Tensor:
    """Pair two equal-shape tensors along a new trailing axis."""
    b = _lift(a.tape, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"stack_last shapes differ: {a.data.shape} vs {b.data.shape}")
    out = np.stack([a.data, b.data], axis=-1)
    return a.tape._record("stack_last", out, (a.idx, b.idx),
                          lambda g: (g[..., 0], g[..., 1]))


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Outer product of two vectors: result[i][j] = u[i] * v[j]."""
    v = _lift(u.tape, v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.size == 0 or v.data.size == 0:
        raise ShapeError(f"outer needs nonempty vectors, got {u.data.shape}, {v.data.shape}")
    ud, vd = u.data, v.data
    return u.tape._record("outer", np.outer(ud, vd), (u.idx, v.idx),
                          lambda g: (g @ vd, ud @ g))


def frobenius_norm(m: Tensor) -> Tensor:
    """sqrt of the sum of squared entries; gradient at the zero matrix is 0."""
    md = m.data
    out = np.sqrt(np.sum(md * md))

    def bwd(g):
        if out == 0.0:
            return (np.zeros_like(md),)
        return (g * md / out,)

    return m.tape._record("frobenius_norm", np.asarray(out), (m.idx,), bwd)


def row_norms(m: Tensor) -> Tensor:
    """Euclidean norm of each row of a matrix; subgradient 0 at zero rows."""
    md = m.data
    if md.ndim != 2:
        raise ShapeError(f"row_norms expects a matrix, got shape {md.shape}")
    out = np.sqrt(np.sum(md * md, axis=1))

    def bwd(g):
        safe = np.where(out > 0.0, out, 1.0)
        return ((g / safe)[:, None] * md,)

    return m.tape._record("row_norms", out, (m.idx,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("sigmoid of non-finite input")
    with np.errstate(over="ignore"):  # exp overflow for very negative x saturates to 0
        out = 1.0 / (1.0 + np.exp(-xd))
    return x.tape._record("sigmoid", out, (x.idx,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("tanh of non-finite input")
    out = np.tanh(xd)
    return x.tape._record("tanh", out, (x.idx,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("relu of non-finite input")
    mask = xd > 0  # gradient at exactly 0 is taken as 0
    return x.tape._record("relu", np.where(mask, xd, 0.0), (x.idx,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("softmax of non-finite input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return x.tape._record("softmax", out, (x.idx,), bwd)


def cross_entropy(p: Tensor, y: Tensor) -> Tensor:
    """-sum(y * log p) for a probability vector p and one-hot target y.

    For 2-D inputs rows are treated as independent cases and the result is
    the mean over rows.
    """
    y = _lift(p.tape, y)
    pd, yd = p.data, y.data
    if pd.shape != yd.shape:
        raise ShapeError(f"cross_entropy shapes differ: {pd.shape} vs {yd.shape}")
    if not np.all(np.isfinite(pd)):
        raise NumericError("cross_entropy of non-finite probabilities")
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(yd > 0, np.log(pd), 0.0)
    out = -np.sum(yd * logp)
    scale = 1.0
    if pd.ndim == 2:
        scale = 1.0 / pd.shape[0]
        out *= scale

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(yd > 0, -yd / pd, 0.0)
        return (g * scale * gp, None)

    return p.tape._record("cross_entropy", np.asarray(out), (p.idx, y.idx), bwd)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    target = _lift(pred.tape, target)
    pd, td = pred.data, target.data
    if pd.shape != td.shape:
        raise ShapeError(f"mse shapes differ: {pd.shape} vs {td.shape}")
    diff = pd - td
    out = np.mean(diff * diff)
    n = pd.size

    def bwd(g):
        gd = g * 2.0 * diff / n
        return (gd, -gd)

    return pred.tape._record("mse", np.asarray(out), (pred.idx, target.idx), bwd)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a named parameter set."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("adam_step: parameter/gradient/state keys differ")
    b1, b2 = betas
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for '{k}'")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(new_m, new_v, step)
