"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray plus (optionally) the closure that propagates its
output gradient to its parents. Calling ``backward()`` on a scalar tensor
topologically sorts the recorded graph and accumulates gradients into every
reachable tensor with ``requires_grad``. Graphs are single-use: a second
backward through the same node raises instead of silently double-counting.

Only the ops the package needs are implemented, and each op supports exactly
the array ranks the models produce (including batched 3-D matmul for critic
ensembles). Gradients are checked against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Parameter", "concat", "minimum", "layer_norm"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape``, undoing numpy broadcasting."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    # keep numpy from absorbing `ndarray <op> Tensor` into an object array;
    # with ufuncs refused, python falls back to the reflected ops below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias an array another parent will also receive
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no graph")
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            if node._spent:
                raise RuntimeError(
                    "graph node already consumed by a previous backward()")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._spent = True
                # release references so a reused node fails loudly
                node._parents = ()
                node._backward = None

    # ---- arithmetic -----------------------------------------------------

    def _binary(self, other, fwd, bwd_self, bwd_other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        out_data = fwd(self.data, other.data)
        out = Tensor(out_data, parents=(self, other))
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(bwd_self(g, a.data, b.data), a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(bwd_other(g, a.data, b.data), b.data.shape))

            out._backward = backward
        return out

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, s=self: s._accum(-g)
        return out

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        out = Tensor(np.matmul(self.data, other.data), parents=(self, other))
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    a._accum(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    b._accum(_unbroadcast(gb, b.data.shape))

            out._backward = backward
        return out

    # ---- elementwise ----------------------------------------------------

    def _unary(self, fwd, dfwd):
        out_data = fwd(self.data)
        out = Tensor(out_data, parents=(self,))
        if out.requires_grad:
            s = self
            out._backward = lambda g: s._accum(g * dfwd(s.data, out_data))
        return out

    def exp(self):
        return self._unary(np.exp, lambda x, y: y)

    def log(self):
        return self._unary(np.log, lambda x, y: 1.0 / x)

    def tanh(self):
        return self._unary(np.tanh, lambda x, y: 1.0 - y * y)

    def relu(self):
        return self._unary(lambda x: np.maximum(x, 0.0),
                           lambda x, y: (x > 0.0).astype(np.float64))

    def mish(self):
        # x * tanh(softplus(x)); fused, with softplus computed stably
        x = self.data
        sp = np.logaddexp(0.0, x)
        t = np.tanh(sp)
        out = Tensor(x * t, parents=(self,))
        if out.requires_grad:
            s = self

            def backward(g):
                sig = 1.0 / (1.0 + np.exp(-x))
                s._accum(g * (t + x * (1.0 - t * t) * sig))

            out._backward = backward
        return out

    def softplus(self):
        # log(1 + exp(x)); backward is sigmoid, computed overflow-free
        x = self.data
        out = Tensor(np.logaddexp(0.0, x), parents=(self,))
        if out.requires_grad:
            s = self

            def backward(g):
                e = np.exp(-np.abs(x))
                sig = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
                s._accum(g * sig)

            out._backward = backward
        return out

    def square(self):
        return self._unary(np.square, lambda x, y: 2.0 * x)

    # ---- reductions / structure -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        if out.requires_grad:
            s = self

            def backward(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                s._accum(np.broadcast_to(g, s.data.shape))

            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def index0(self, i: int):
        """Select slice ``i`` along axis 0 (for picking ensemble members)."""
        out = Tensor(self.data[i], parents=(self,))
        if out.requires_grad:
            s = self

            def backward(g):
                full = np.zeros_like(s.data)
                full[i] = g
                s._accum(full)

            out._backward = backward
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))
        if out.requires_grad:
            s = self
            out._backward = lambda g: s._accum(g.reshape(s.data.shape))
        return out

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf. ``grad`` persists across backward calls and is
    cleared by the optimizer step."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        self.grad += g


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors; gradients split back to each input."""
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), parents=tuple(tensors))
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]
        parts = tuple(tensors)

        def backward(g):
            for t, piece in zip(parts, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accum(piece)

        out._backward = backward
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; at ties the gradient goes to the first argument."""
    out = Tensor(np.minimum(a.data, b.data), parents=(a, b))
    if out.requires_grad:
        take_a = a.data <= b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Fused op: one graph node instead of a dozen, which matters on the
    critic-update hot path.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, parents=(x, gain, bias))
    if out.requires_grad:
        n = x.data.shape[-1]

        def backward(g):
            if gain.requires_grad:
                gain._accum(_unbroadcast(g * xhat, gain.data.shape))
            if bias.requires_grad:
                bias._accum(_unbroadcast(g, bias.data.shape))
            if x.requires_grad:
                gh = g * gain.data
                # d/dx of (x - mu) / sqrt(var + eps)
                gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
                x._accum(gx)

        out._backward = backward
    return out
