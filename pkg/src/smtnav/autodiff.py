"""Define-by-run reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D ``Tensor``; vectors are ``1 x n``.  Operations run
eagerly on numpy and, while gradient recording is enabled, remember their
parents and a closure that maps the output gradient to input gradients.
``backward`` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import CheckpointError, ContractError, DimensionError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (used for rollouts and targets)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A node of the computation graph holding a 2-D float64 array."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, value, *, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=tuple(parents),
                      backward_fn=backward_fn, op=op)
    return Tensor(value, op=op)


def _shape_error(op: str, a: Tensor, b: Tensor) -> DimensionError:
    return DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise _shape_error("matmul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if b.rows == 1 and b.cols == a.cols:
        return _node(a.value + b.value, (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True)), "add")
    raise _shape_error("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def concat_cols(*ts: Tensor) -> Tensor:
    rows = ts[0].rows
    for t in ts[1:]:
        if t.rows != rows:
            raise _shape_error("concat_cols", ts[0], t)
    edges = np.cumsum([0] + [t.cols for t in ts])

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(ts)))

    return _node(np.concatenate([t.value for t in ts], axis=1), ts, bw, "concat_cols")


def concat_rows(*ts: Tensor) -> Tensor:
    cols = ts[0].cols
    for t in ts[1:]:
        if t.cols != cols:
            raise _shape_error("concat_rows", ts[0], t)
    edges = np.cumsum([0] + [t.rows for t in ts])

    def bw(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(ts)))

    return _node(np.concatenate([t.value for t in ts], axis=0), ts, bw, "concat_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    ncols = a.cols

    def bw(g):
        full = np.zeros((g.shape[0], ncols))
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop].copy(), (a,), bw, "slice_cols")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index; gradients scatter-add back (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    nrows = a.rows

    def bw(g):
        full = np.zeros((nrows, g.shape[1]))
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), bw, "take_rows")


def pick_cols(a: Tensor, idx) -> Tensor:
    """Row ``i`` of the ``n x 1`` result is ``a[i, idx[i]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.rows,):
        raise DimensionError(f"pick_cols: need {a.rows} indices, got shape {idx.shape}")
    r = np.arange(a.rows)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[r, idx] = g[:, 0]
        return (full,)

    return _node(a.value[r, idx][:, None], (a,), bw, "pick_cols")


def softmax_rows(x: Tensor) -> Tensor:
    v = x.value
    if not np.isfinite(v).all():
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(v - v.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (x,), bw, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.cols
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {n}")
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def bw(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(xhat * gv + bias.value, (x, gain, bias), bw, "layer_norm")


def segment_max(x: Tensor, offsets) -> Tensor:
    """Column-wise max within each row segment; one output row per segment.

    The subgradient goes to the arg-max row, lowest index on ties.
    """
    off = np.asarray(offsets, dtype=np.int64)
    if off[0] != 0 or off[-1] != x.rows or np.any(np.diff(off) < 1):
        raise ContractError("segment_max: offsets must tile the rows with nonempty segments")
    out, arg = _kernels.seg_max(np.ascontiguousarray(x.value), off)
    nrows = x.rows
    cols = np.broadcast_to(np.arange(x.cols), arg.shape)

    def bw(g):
        full = np.zeros((nrows, g.shape[1]))
        np.add.at(full, (arg, cols), g)
        return (full,)

    return _node(out, (x,), bw, "segment_max")


def max_over_rows(x: Tensor) -> Tensor:
    return segment_max(x, [0, x.rows])


def segment_attention(u: Tensor, k: Tensor, v: Tensor, q_offsets, k_offsets,
                      heads: int = 1) -> Tensor:
    """Multi-head ``softmax(U K^T) V`` evaluated independently per segment.

    Query segment ``b`` (rows ``q_offsets[b]:q_offsets[b+1]`` of ``u``)
    attends only to key/value segment ``b``.  Head outputs are concatenated.
    """
    if u.cols != k.cols:
        raise _shape_error("attention (queries vs keys)", u, k)
    if k.rows != v.rows:
        raise _shape_error("attention (keys vs values)", k, v)
    if u.cols % heads or v.cols % heads:
        raise DimensionError(f"attention: widths {u.cols}/{v.cols} not divisible by {heads} heads")
    qo = np.asarray(q_offsets, dtype=np.int64)
    ko = np.asarray(k_offsets, dtype=np.int64)
    if qo.shape != ko.shape or qo[-1] != u.rows or ko[-1] != k.rows:
        raise ContractError("attention: segment offsets do not match operand rows")
    if np.any(np.diff(ko) < 1):
        raise ContractError("attention: every key segment needs at least one row")
    U = np.ascontiguousarray(u.value)
    K = np.ascontiguousarray(k.value)
    V = np.ascontiguousarray(v.value)
    out = _kernels.seg_att_fwd(U, K, V, qo, ko, heads)

    def bw(g):
        return _kernels.seg_att_bwd(U, K, V, qo, ko, heads, np.ascontiguousarray(g))

    return _node(out, (u, k, v), bw, "segment_attention")


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    v = x.value
    a = np.abs(v)
    quad = a <= delta
    out = np.where(quad, 0.5 * v * v, delta * (a - 0.5 * delta))
    return _node(out, (x,), lambda g: (g * np.where(quad, v, delta * np.sign(v)),), "huber")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array([[x.value.sum()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.value.size)


_ELEMENTWISE = {
    "relu": relu,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat_cols": concat_cols,
    "max_over_rows": max_over_rows,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

    Returns gradients of named leaves keyed by name.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward: root must be 1x1, got {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    named: dict[str, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return named


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMTCKPT\x00"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named trainable tensors plus Adam moment state."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, names: Iterable[str], trainable: bool) -> None:
        for n in names:
            if n not in self._params:
                raise ContractError(f"unknown parameter {n!r}")
            self._trainable[n] = trainable

    def freeze(self, prefix: str) -> list[str]:
        hit = [n for n in self._params if n.startswith(prefix)]
        self.set_trainable(hit, False)
        return hit

    def trainable_names(self) -> list[str]:
        return [n for n in self._params if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients of trainable parameters (zeros where unreached)."""
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for n, t in self._params.items() if self._trainable[n]}

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self._params.items()}

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self._params.items():
            other.add(n, t.value.copy(), self._trainable[n])
            other.m[n] = self.m[n].copy()
            other.v[n] = self.v[n].copy()
        other.step_count = self.step_count
        return other

    def load_values(self, other: "ParamStore") -> None:
        """Copy parameter values (not optimizer state) from ``other``."""
        for n, t in self._params.items():
            t.value = other[n].value.copy()

    def update_from(self, other: "ParamStore", names: Iterable[str]) -> None:
        for n in names:
            self._params[n].value = other[n].value.copy()

    # -- checkpoint io --------------------------------------------------

    def save(self, path) -> None:
        parts = [CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, len(self._params),
                                               self.step_count)]
        for n, t in self._params.items():
            raw = n.encode("utf-8")
            rows, cols = t.shape
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<IIB", rows, cols, int(self._trainable[n])))
            for arr in (t.value, self.m[n], self.v[n]):
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "ParamStore":
        data = Path(path).read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path}: not a parameter checkpoint")
        pos = len(CHECKPOINT_MAGIC)
        try:
            version, count, steps = struct.unpack_from("<IIQ", data, pos)
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
            pos += 16
            store = cls()
            store.step_count = steps
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                rows, cols, tr = struct.unpack_from("<IIB", data, pos)
                pos += 9
                size = rows * cols * 8
                arrs = []
                for _k in range(3):
                    arrs.append(np.frombuffer(data, dtype="<f8", count=rows * cols,
                                              offset=pos).reshape(rows, cols).astype(np.float64))
                    pos += size
                store.add(name, arrs[0], bool(tr))
                store.m[name] = arrs[1]
                store.v[name] = arrs[2]
        except CheckpointError:
            raise
        except (struct.error, ValueError) as exc:  # ValueError: short buffer or bad utf-8
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
        if pos != len(data):
            raise CheckpointError(f"{path}: trailing bytes in checkpoint")
        return store


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 5e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One in-place Adam update of every trainable parameter."""
    names = store.trainable_names()
    missing = [n for n in names if n not in grads]
    if missing:
        raise ContractError(f"adam_step: no gradient for trainable parameters {missing}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in names:
        g = np.asarray(grads[n], dtype=np.float64)
        p = store[n]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {n} {p.shape}")
        m = store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        v = store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * g * g
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
