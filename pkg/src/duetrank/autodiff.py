"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the operations that
produced it.  ``Tensor.backward()`` walks the recorded graph in reverse
topological order and accumulates gradients into every reachable tensor.
Everything is 64-bit so finite-difference gradient checks are meaningful.

Backward closures receive the output gradient as an argument and capture
only input tensors and plain arrays, never the output tensor itself, so
graphs carry no reference cycles and are freed the moment the loss goes
out of scope.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "dropout",
    "embedding_lookup",
    "softmax_temp",
]


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _prev: Iterable["Tensor"] = (),
        name: Optional[str] = None,
    ):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._prev = tuple(_prev)
        self.name = name

    # ------------------------------------------------------------------
    # basics
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            # Copy: incoming grads may alias another node's buffer.
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _prev=(self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _prev=(self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _prev=(self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / float(other))

    def pow(self, exponent: float) -> "Tensor":
        out = Tensor(self.data ** exponent, _prev=(self,))
        out._backward = lambda g: self._accumulate(
            g * exponent * self.data ** (exponent - 1.0)
        )
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data @ other.data, _prev=(self, other))

        def backward(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accumulate(g * b)
                other._accumulate(g * a)
                return
            if a.ndim == 1:  # (k,) @ (..., k, n)
                ga = (np.expand_dims(g, -2) @ np.swapaxes(b, -1, -2)).reshape(
                    b.shape[:-2] + (a.shape[0],)
                )
                self._accumulate(_unbroadcast(ga, a.shape))
                other._accumulate(np.expand_dims(a, -1) * np.expand_dims(g, -2))
                return
            if b.ndim == 1:  # (..., m, k) @ (k,)
                self._accumulate(np.expand_dims(g, -1) * b)
                gb = (a * np.expand_dims(g, -1)).reshape(-1, b.shape[0]).sum(axis=0)
                other._accumulate(gb)
                return
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            self._accumulate(_unbroadcast(ga, a.shape))
            other._accumulate(_unbroadcast(gb, b.shape))

        out._backward = backward
        return out

    # ------------------------------------------------------------------
    # shape ops
    # ------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _prev=(self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes), _prev=(self,))
        inverse = np.argsort(axes)
        out._backward = lambda g: self._accumulate(g.transpose(inverse))
        return out

    def __getitem__(self, key) -> "Tensor":
        out = Tensor(self.data[key], _prev=(self,))

        def backward(g):
            grad = np.zeros_like(self.data)
            np.add.at(grad, key, g)
            self._accumulate(grad)

        out._backward = backward
        return out

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------------
    # nonlinearities
    # ------------------------------------------------------------------

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor(t, _prev=(self,))
        out._backward = lambda g: self._accumulate(g * (1.0 - t * t))
        return out

    def sigmoid(self) -> "Tensor":
        s = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        out = Tensor(s, _prev=(self,))
        out._backward = lambda g: self._accumulate(g * s * (1.0 - s))
        return out

    def gelu(self) -> "Tensor":
        # tanh approximation; smooth everywhere, which the gradient
        # checks rely on.
        c = math.sqrt(2.0 / math.pi)
        x = self.data
        x2 = x * x
        t = np.tanh(c * (x + 0.044715 * (x2 * x)))
        out = Tensor(0.5 * x * (1.0 + t), _prev=(self,))

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            self._accumulate(g * dgelu)

        out._backward = backward
        return out

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        out = Tensor(e, _prev=(self,))
        out._backward = lambda g: self._accumulate(g * e)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _prev=(self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(p, _prev=(self,))

        def backward(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            self._accumulate(p * (g - dot))

        out._backward = backward
        return out

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        logp = shifted - lse
        out = Tensor(logp, _prev=(self,))
        p = np.exp(logp)

        def backward(g):
            self._accumulate(g - p * g.sum(axis=axis, keepdims=True))

        out._backward = backward
        return out

    def layer_norm(self, eps: float = 1e-5) -> "Tensor":
        """Normalize the last axis to zero mean, unit variance."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        out = Tensor(y, _prev=(self,))

        def backward(g):
            gmean = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            self._accumulate(inv * (g - gmean - y * gy))

        out._backward = backward
        return out

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # Intermediate grads are scratch space; drop them so a
                # lingering reference to the loss cannot pin them all.
                if not node.requires_grad:
                    node.grad = None


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any leading shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], _prev=(table,))

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.ravel(), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(grad)

    out._backward = backward
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time.

    Evaluation mode (or rate 0) is the identity and consumes no randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-softened softmax over plain logits (last axis).

    Stable: the max of logits/tau is subtracted before exponentiation.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax_temp requires at least one logit")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
