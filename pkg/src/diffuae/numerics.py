"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every primitive records its parents and a vector-Jacobian product closure.
The tape for one evaluation is the topological ordering of the nodes that
feed the output; replaying it backwards accumulates exact gradients.

Only what the MLPs and guidance gradients need is here: elementwise
arithmetic, per-row bias broadcasting, matmul, a handful of smooth
nonlinearities, a fused stable log-softmax, row gathers and concatenation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "total",
    "mean",
    "square",
    "silu",
    "tanh",
    "exp",
    "log",
    "log_softmax",
    "pick",
    "take_rows",
    "concat",
    "tape",
    "backward",
    "grad",
    "value_and_grad",
    "finite_diff_grad",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by '{op}' ({where} pass)")
        self.op = op
        self.where = where


Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """Immutable float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "op", "requires_grad", "_parents", "_vjps")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        vjps: tuple[Vjp, ...] = (),
    ):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.op = op
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Vjp]) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    live = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
    if not live:
        return Tensor(out, op=op)
    ps, vs = zip(*live)
    return Tensor(out, requires_grad=True, op=op, parents=ps, vjps=vs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only per-row bias broadcasting is supported: (B, n) against (n,)
    return g.sum(axis=0)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _node(
        "add",
        a.data + b.data,
        (a, b),
        (lambda g: g, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _node(
        "sub",
        a.data - b.data,
        (a, b),
        (lambda g: g, lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        "mul",
        ad * bd,
        (a, b),
        (lambda g: g * bd, lambda g: _unbroadcast(g * ad, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node("scale", a.data * c, (a,), (lambda g: g * c,))


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), (lambda g: -g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd
    return _node("matmul", out, (a, b), (lambda g: g @ bd.T, lambda g: ad.T @ g))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _node("sum", np.asarray(a.data.sum()), (a,), (lambda g: np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(total(a), 1.0 / n)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node("square", ad * ad, (a,), (lambda g: 2.0 * ad * g,))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _node("silu", ad * sig, (a,), (lambda g: g * sig * (1.0 + ad * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node("exp", out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node("log", out, (a,), (lambda g: g / ad,))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, max-shifted for stability."""
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node(
        "log_softmax",
        out,
        (a,),
        (lambda g: g - probs * g.sum(axis=-1, keepdims=True),),
    )


def pick(a: Tensor, idx) -> Tensor:
    """Select column ``idx[i]`` from row ``i`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ValueError(f"pick: need (B, K) input and (B,) indices, got {a.shape}, {idx.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return out

    return _node("pick", a.data[rows, idx], (a,), (vjp,))


def take_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` with scatter-add adjoint."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _node("take_rows", table.data[idx], (table,), (vjp,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([0] + [p.shape[1] for p in parts])
    vjps = tuple(
        (lambda lo, hi: (lambda g: g[:, lo:hi]))(int(widths[i]), int(widths[i + 1]))
        for i in range(len(parts))
    )
    return _node("concat", np.concatenate([p.data for p in parts], axis=1), parts, vjps)


def tape(out: Tensor) -> list[Tensor]:
    """Nodes reachable from ``out`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
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
    return order


def backward(out: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``out`` with respect to each tensor in ``wrt``."""
    if out.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
    adj: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(tape(out)):
        g = adj.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if not np.all(np.isfinite(contrib)):
                raise NonFiniteError(node.op, "backward")
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + contrib
            else:
                adj[key] = contrib
    return [np.array(adj.get(id(w), np.zeros_like(w.data)), dtype=np.float64) for w in wrt]


def value_and_grad(f: Callable[..., Tensor], *args) -> tuple[float, list[np.ndarray]]:
    leaves = [Tensor(a.data if isinstance(a, Tensor) else a, requires_grad=True) for a in args]
    out = f(*leaves)
    return float(out.data), backward(out, leaves)


def grad(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Exact dF/dx of a scalar-valued ``f`` at ``x``; same shape as ``x``."""
    _, (g,) = value_and_grad(f, x)
    return g


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape)))
        fm = f(Tensor(xm.reshape(x.shape)))
        fp = float(fp.data) if isinstance(fp, Tensor) else float(fp)
        fm = float(fm.data) if isinstance(fm, Tensor) else float(fm)
        flat[i] = (fp - fm) / (2.0 * h)
    return out
