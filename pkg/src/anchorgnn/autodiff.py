"""Small dense reverse-mode differentiation engine.

Every value is a 2-D float64 array wrapped in a :class:`Tensor`. Operations
record their parents and a backward closure; :func:`backward` walks the
recorded graph in reverse topological order and then drops the record, so a
new record starts with every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _shapes(a: Tensor, b: Tensor) -> str:
    return f"{a.shape} and {b.shape}"


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {_shapes(a, b)}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), back)


def propagate(op, x) -> Tensor:
    """Left-multiply ``x`` by a constant (dense or scipy sparse) matrix.

    Used for adjacency and pooling operators, which never need gradients.
    """
    x = _wrap(x)
    if op.shape[1] != x.rows:
        raise ShapeError(f"propagate shape mismatch: {tuple(op.shape)} and {x.shape}")
    out = op @ x.data
    out = np.asarray(out, dtype=np.float64)

    def back(g):
        return (np.asarray(op.T @ g),)

    return _result(out, (x,), back)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over ``a``'s rows."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        def back(g):
            return g, g
    elif b.rows == 1 and a.cols == b.cols:
        def back(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"add shape mismatch: {_shapes(a, b)}")
    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        def back(g):
            return g, -g
    elif b.rows == 1 and a.cols == b.cols:
        def back(g):
            return g, -g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"sub shape mismatch: {_shapes(a, b)}")
    return _result(a.data - b.data, (a, b), back)


def mul_row(x, w) -> Tensor:
    """Multiply every row of ``x`` elementwise by the 1 x cols row ``w``."""
    x, w = _wrap(x), _wrap(w)
    if w.rows != 1 or w.cols != x.cols:
        raise ShapeError(f"mul_row shape mismatch: {_shapes(x, w)}")

    def back(g):
        return g * w.data, (g * x.data).sum(axis=0, keepdims=True)

    return _result(x.data * w.data, (x, w), back)


def mul_scalar(x, s) -> Tensor:
    """Multiply ``x`` by a learnable 1x1 tensor ``s``."""
    x, s = _wrap(x), _wrap(s)
    if s.shape != (1, 1):
        raise ShapeError(f"mul_scalar needs a 1x1 scalar, got {s.shape}")
    sv = s.data[0, 0]

    def back(g):
        return g * sv, np.array([[np.sum(g * x.data)]])

    return _result(x.data * sv, (x, s), back)


def scale(x, s: float) -> Tensor:
    x = _wrap(x)
    s = float(s)

    def back(g):
        return (g * s,)

    return _result(x.data * s, (x,), back)


def concat_cols(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols row mismatch: {_shapes(a, b)}")
    k = a.cols

    def back(g):
        return g[:, :k], g[:, k:]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), back)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), back)


def row_mean(x) -> Tensor:
    x = _wrap(x)
    n = x.rows

    def back(g):
        return (np.broadcast_to(g / n, x.shape),)

    return _result(x.data.mean(axis=0, keepdims=True), (x,), back)


def total(x) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    x = _wrap(x)

    def back(g):
        return (np.full(x.shape, g[0, 0]),)

    return _result(np.array([[x.data.sum()]]), (x,), back)


def take_rows(x, idx) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back)


def detach(x) -> Tensor:
    x = _wrap(x)
    return Tensor(x.data.copy(), requires_grad=False)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise probabilities (plain array; inference only)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, q = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= q):
        raise ValueError(f"labels must lie in [0, {q}), got range [{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g[0, 0] / n),)

    return _result(np.array([[loss]]), (logits,), back)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` ancestor, then free the record."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        adam_step(params, self, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    t = state.t
    for name, p in params.items():
        if p.grad is None:
            g = np.zeros_like(p.data)
        else:
            g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
