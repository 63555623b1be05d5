"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as 32-bit floats; reductions (matmul inner products,
means, variances) accumulate in 64 bits so gradient checks stay tight.
The compute graph is taped per forward pass and freed after backward.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Backward was invoked on something that is not a recorded scalar."""


_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Ops recorded inside contribute constants: no gradient flows through."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Propagate gradients from this scalar to every requires_grad leaf."""
        if self.data.shape != ():
            raise GraphError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self:
                # tape is single-use; free references so the graph is collected
                node._parents = ()
                node._backward = None
        self._parents = ()
        self._backward = None


def _wrap(result, parents, backward) -> Tensor:
    out = Tensor(result)
    if grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g) -> None:
    if not (t.requires_grad or t._parents):
        return
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Returns True for the documented row-vector broadcast case (a: n x C, b: C)."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    row = _check_binary(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if row else g)

    return _wrap(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    row = _check_binary(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -(g.sum(axis=0)) if row else -g)

    return _wrap(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    row = _check_binary(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        gb = g * a.data
        _accum(b, gb.sum(axis=0) if row else gb)

    return _wrap(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _wrap(a.data * np.asarray(c, dtype=a.dtype), (a,), backward)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(out_dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        _accum(a, (g64 @ b.data.astype(np.float64).T).astype(a.dtype))
        _accum(b, (a.data.astype(np.float64).T @ g64).astype(b.dtype))

    return _wrap(out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # derivative at exactly 0 is 0

    def backward(g):
        _accum(a, g * mask)

    return _wrap(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * out * (1 - out))

    return _wrap(out, (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (-0.5) * out / a.data)

    return _wrap(out.astype(a.dtype), (a,), backward)


def mean0(a) -> Tensor:
    """Column means of an n x C matrix (64-bit accumulation)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean0 expects a matrix, got shape {a.shape}")
    n = a.shape[0]
    out = np.mean(a.data, axis=0, dtype=np.float64).astype(a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _wrap(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.mean(a.data, dtype=np.float64).astype(a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _wrap(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, dtype=np.float64).astype(a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _wrap(out, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _wrap(a.data[idx], (a,), backward)


def l2norm(a) -> Tensor:
    """Euclidean norm of a vector; gradient defined as 0 at the origin."""
    a = as_tensor(a)
    nrm = float(np.sqrt(np.sum(a.data.astype(np.float64) ** 2)))

    def backward(g):
        if nrm > 0:
            _accum(a, g * (a.data / np.asarray(nrm, dtype=a.dtype)))

    return _wrap(np.asarray(nrm, dtype=a.dtype), (a,), backward)


def softmax_cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean (or weighted sum) of per-row -log softmax(logits)[label].

    ``weights`` is an optional per-row vector; when omitted every row
    weighs 1/n so the loss is the batch mean.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    per_row = logsumexp - z[np.arange(n), labels]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    loss = np.asarray((per_row * w).sum(), dtype=logits.dtype)
    probs = np.exp(z - logsumexp[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        _accum(logits, (float(g) * d * w[:, None]).astype(logits.dtype))

    return _wrap(loss, (logits,), backward)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid_bce(logits, targets, weights=None) -> Tensor:
    """Stabilized binary cross-entropy over all n*C entries.

    Per-row loss is the mean over the C entries; ``weights`` replaces the
    default 1/n per-row weighting (used for confused-subset reweighting).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} != {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("sigmoid_bce targets must be binary (0/1)")
    n, c = logits.shape
    z = logits.data.astype(np.float64)
    # max(z,0) - z*t + log(1+exp(-|z|))
    per_entry = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    per_row = per_entry.mean(axis=1)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    loss = np.asarray((per_row * w).sum(), dtype=logits.dtype)

    def backward(g):
        s = _sigmoid(z)
        d = (s - t) / c * w[:, None]
        _accum(logits, (float(g) * d).astype(logits.dtype))

    return _wrap(loss, (logits,), backward)


def grad_check(loss_fn, params, eps=1e-4, tol=1e-3):
    """Compare autodiff gradients of ``loss_fn(params)`` to central differences.

    Parameters are evaluated in 64-bit; relative error uses an absolute
    floor of 1e-6 in the denominator. Returns {"max_rel_err", "pass"}.
    """
    saved = [(p.data, p.grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = loss_fn()
        loss.backward()
        grads = [None if p.grad is None else p.grad.copy() for p in params]
        max_rel = 0.0
        for p, g in zip(params, grads):
            if g is None:
                g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = float(loss_fn().data)
                flat[i] = orig - eps
                lm = float(loss_fn().data)
                flat[i] = orig
                fd = (lp - lm) / (2 * eps)
                rel = abs(gflat[i] - fd) / max(abs(fd), abs(gflat[i]), 1e-6)
                max_rel = max(max_rel, rel)
    finally:
        for p, (d, g) in zip(params, saved):
            p.data = d
            p.grad = g
    return {"max_rel_err": max_rel, "pass": max_rel < tol}
