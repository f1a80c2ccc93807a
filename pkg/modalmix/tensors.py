"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives the diffusion transformer needs are provided. Broadcasting is
limited to stretching a lower-rank operand over the leading axes of the other one;
anything more general is rejected so every gradient stays easy to audit.
"""

import logging
import math
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

logger = logging.getLogger(__name__)

Operand = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Graph recording is a per-thread switch so evaluation workers can run the model
# under no_grad() while a trainer records graphs elsewhere.
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape rule."""

    pass


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite value."""

    pass


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def backward(self, parameters: Optional[Sequence["Tensor"]] = None):
        backward(self, parameters)


class Parameter(Tensor):
    """A named leaf whose gradient is written by backward()."""

    def __init__(self, name: str, data: Any):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def _record(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str
) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim :] == small.shape:
        return
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_broadcast("add", ta, tb)

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _record(ta.data + tb.data, (ta, tb), backward_fn, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_broadcast("sub", ta, tb)

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, ta.shape), -_unbroadcast(g, tb.shape)

    return _record(ta.data - tb.data, (ta, tb), backward_fn, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_broadcast("mul", ta, tb)

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _record(ta.data * tb.data, (ta, tb), backward_fn, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward_fn(g: np.ndarray):
        return (g * factor,)

    return _record(a.data * factor, (a,), backward_fn, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ in {a.shape} and {b.shape}")

    def backward_fn(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward_fn(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward_fn, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {a.shape}")

    def backward_fn(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(a.data, -1, -2), (a,), backward_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    first = tensors[0]
    ax = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[x.shape for x in tensors]} differ outside axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray):
        return np.split(g, bounds, axis=ax)

    return _record(
        np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward_fn, "concat"
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = tuple(slice(start, stop) if i == ax else slice(None) for i in range(a.ndim))

    def backward_fn(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), backward_fn, "slice")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    out = []
    start = 0
    for size in sizes:
        out.append(slice_axis(a, ax, start, start + size))
        start += size
    return out


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), backward_fn, "softmax")


def layer_norm(
    x: Tensor,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    for p in (weight, bias):
        if p is not None and p.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: affine shape {p.shape} vs features {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv
    out = x_hat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents: List[Tensor] = [x] + [p for p in (weight, bias) if p is not None]

    def backward_fn(g: np.ndarray):
        g_hat = g * weight.data if weight is not None else g
        gx = inv * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        grads: List[np.ndarray] = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * x_hat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _record(out, parents, backward_fn, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * dy,)

    return _record(y, (a,), backward_fn, "gelu")


def sinusoidal_embed(
    positions: Union[Sequence[float], np.ndarray],
    dim: int,
    dtype: Any = np.float64,
    max_period: float = 10000.0,
) -> Tensor:
    """Fixed cos/sin features, one row per position. Never requires grad."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = pos[:, None] * freqs[None, :]
    table = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((pos.shape[0], 1))], axis=-1)
    return Tensor(table.astype(dtype))


def gather(table: Tensor, ids: Union[Sequence[int], np.ndarray]) -> Tensor:
    index = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be rank 2, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather: ids outside [0, {table.shape[0]})")

    def backward_fn(g: np.ndarray):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(table.data[index], (table,), backward_fn, "gather")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def backward_fn(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward_fn, "sum")


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]

    def backward_fn(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), a.shape).copy(),)

    return _record(np.asarray(a.data.mean(axis=axis)), (a,), backward_fn, "mean")


PRIMITIVES: Dict[str, Callable[..., Any]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "split": split,
    "slice": slice_axis,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "sinusoidal_embed": sinusoidal_embed,
    "gather": gather,
    "sum": reduce_sum,
    "mean": reduce_mean,
}


def primitive_forward(kind: str, *inputs: Any, **kwargs: Any) -> Any:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{kind}'") from None
    return fn(*inputs, **kwargs)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Optional[Sequence[Tensor]] = None):
    """Writes d(loss)/d(leaf) into .grad of every reachable leaf requiring grad.

    Leaves listed in `parameters` that the graph never reaches get a zero grad.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached = set()
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g, copy=True)
                reached.add(id(node))
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for p in parameters or ():
        if id(p) not in reached:
            p.grad = np.zeros_like(p.data)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-3,
    directions: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference derivatives.

    `f` closes over `leaves` and must return a scalar; leaves are perturbed in
    place and restored. With `directions=None` every coordinate is probed,
    otherwise `directions` random unit directions (Jacobian-vector products).
    """
    for leaf in leaves:
        leaf.data = np.ascontiguousarray(leaf.data)
        leaf.requires_grad = True
        leaf.grad = None
    loss = f()
    backward(loss, leaves)
    analytic = [leaf.grad.astype(np.float64).copy() for leaf in leaves]

    def probe() -> float:
        with no_grad():
            value = float(f().data)
        if not math.isfinite(value):
            raise GradCheckError("non-finite function value at a perturbed point")
        return value

    worst = 0.0
    if directions is None:
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                plus = probe()
                flat[i] = saved - h
                minus = probe()
                flat[i] = saved
                numeric = (plus - minus) / (2 * h)
                err = abs(grad.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
                worst = max(worst, err)
        return worst

    rng = np.random.default_rng(seed)
    for _ in range(directions):
        vs = [rng.standard_normal(leaf.shape) for leaf in leaves]
        norm = math.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        saved = [leaf.data.copy() for leaf in leaves]
        for leaf, v in zip(leaves, vs):
            leaf.data += h * v
        plus = probe()
        for leaf, s, v in zip(leaves, saved, vs):
            leaf.data[...] = s - h * v
        minus = probe()
        for leaf, s in zip(leaves, saved):
            leaf.data[...] = s
        numeric = (plus - minus) / (2 * h)
        exact = sum(float((g * v).sum()) for g, v in zip(analytic, vs))
        worst = max(worst, abs(exact - numeric) / (abs(numeric) + 1e-8))
    return worst


class Module:
    """Container of Parameters and sub-modules, discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for path, param in self._walk(prefix):
            if id(param) in seen:
                continue
            seen.add(id(param))
            yield path, param

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk_value(value, f"{prefix}{attr}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self):
        for path, param in self.named_parameters():
            param.name = path

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ShapeError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} vs {param.shape}")
            param.data = value.astype(param.dtype, copy=True)

    def astype(self, dtype: Any) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk_value(value: Any, path: str) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value._walk(f"{path}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(item, f"{path}.{key}")
