"""Tensor, tape and parameter containers for reverse-mode differentiation.

Recording is opt-in: operations are appended to the innermost active
:class:`Tape` only when one of their inputs requires a gradient.  Outside a
tape every op is a plain numpy computation, which keeps inference cheap.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NotScalarLoss, ShapeMismatch

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, which is
    already a topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def recording() -> bool:
    return bool(_ACTIVE)


def record(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        _ACTIVE[-1].nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} != value shape {t.shape} for {t!r}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients of leaf tensors accumulate into ``.grad``; intermediate buffers
    are released as soon as they have been propagated and the tape is cleared.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is not None and parent.requires_grad:
                _accumulate(parent, pg)
        node.grad = None
        node._backward = None
        node._parents = ()
    tape.nodes.clear()


class ParamSet:
    """Named trainable tensors plus non-trainable buffers (e.g. running stats)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._buffers:
            raise KeyError(f"duplicate buffer {name!r}")
        self._buffers[name] = value
        return value

    def update(self, other: "ParamSet") -> None:
        for name, t in other.items():
            self._params[name] = t
        self._buffers.update(other._buffers)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of parameters and buffers (no copies)."""
        out = {name: t.data for name, t in self._params.items()}
        out.update(self._buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self._params) | set(self._buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeMismatch(f"state keys differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in self._params:
                dst = self._params[name].data
            elif name in self._buffers:
                dst = self._buffers[name]
            else:
                continue
            if dst.shape != tuple(arr.shape):
                raise ShapeMismatch(f"{name}: stored shape {tuple(arr.shape)} != model shape {dst.shape}")
            dst[...] = arr
