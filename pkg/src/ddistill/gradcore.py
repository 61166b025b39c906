"""Reverse-mode automatic differentiation over dense float64 tensors.

Everything trainable in this project reduces to a small MLP, so the
operation set is deliberately tiny: matrix multiply, bias add, last-axis
concat, scalar scale, SiLU, and three reductions. Each primitive checks
shapes and finiteness up front and knows how to push gradients back to
its inputs. Recording is explicit: primitives only build graph nodes
while a Tape is active on the current thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tensor:
    """A dense float64 array, optionally tied to a node on a Tape.

    Tensors without a node are plain immutable values and are safe to
    share across threads. The node/tape link is only meaningful while
    the tape that created it is alive and unconsumed.
    """

    __slots__ = ("data", "node", "_tape")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("empty tensors are not supported")
        self.data = arr
        self.node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"


class Tape:
    """Single-use recording of primitive applications for one backward pass.

    A tape is confined to the thread that entered it; entering a second
    tape on the same thread is an error. After `backward` the tape is
    consumed and refuses further recording or differentiation.
    """

    def __init__(self):
        self.nodes = []          # (primitive name, input node ids, grad_fn)
        self.gradients = {}      # node id -> Tensor, filled by backward
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("another tape is already recording on this thread")
        if self._consumed:
            raise RuntimeError("tape has already been consumed by backward")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.tape = None
        return False

    def _ensure_leaf(self, t: Tensor) -> int:
        # Tensors may carry stale node ids from a previous (consumed) tape;
        # they re-enter the current tape as fresh leaves.
        if t._tape is self and t.node is not None:
            return t.node
        nid = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        t.node = nid
        t._tape = self
        return nid

    def _record(self, name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                grad_fn: Callable) -> Tensor:
        if self._consumed:
            raise RuntimeError("tape has already been consumed by backward")
        input_ids = tuple(self._ensure_leaf(t) for t in inputs)
        out = Tensor(out_data)
        nid = len(self.nodes)
        self.nodes.append((name, input_ids, grad_fn))
        out.node = nid
        out._tape = self
        return out

    def gradient(self, t: Tensor) -> Tensor:
        """Gradient of the last backward's loss with respect to `t`."""
        if t._tape is not self or t.node is None:
            raise ValueError("tensor was not recorded on this tape")
        if t.node not in self.gradients:
            raise ValueError("tensor has no gradient (not reachable from the loss)")
        return self.gradients[t.node]


def backward(loss: Tensor, tape: Tape):
    """Populate and return gradients of a scalar loss recorded on `tape`.

    Consumes the tape: a second backward on the same tape is rejected.
    Returns the node-id -> Tensor gradient map.
    """
    if tape._consumed:
        raise RuntimeError("tape has already been consumed by backward")
    if loss._tape is not tape or loss.node is None:
        raise ValueError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")

    grads = {loss.node: np.ones_like(loss.data)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        _, input_ids, grad_fn = tape.nodes[nid]
        if grad_fn is None:
            continue
        for iid, gin in zip(input_ids, grad_fn(g)):
            if iid in grads:
                grads[iid] = grads[iid] + gin
            else:
                grads[iid] = gin

    tape.gradients = {nid: Tensor(g) for nid, g in grads.items()}
    tape._consumed = True
    return tape.gradients


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, *tensors: Tensor):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"{name}: non-finite input rejected")


def _emit(name, inputs, out_data, grad_fn) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor(out_data)
    return tape._record(name, inputs, out_data, grad_fn)


def matmul(a, b) -> Tensor:
    """2-D matrix product a @ b."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, grad_fn)


def add_broadcast(x, v) -> Tensor:
    """Add `v` to `x`: either elementwise (equal shapes) or a bias vector
    broadcast over the leading batch axis. No other broadcasting."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.shape == v.shape:
        broadcast = False
    elif x.data.ndim == 2 and v.data.ndim == 1 and v.shape[0] == x.shape[1]:
        broadcast = True
    else:
        raise ValueError(f"add_broadcast: incompatible shapes {x.shape} and {v.shape}")
    _check_finite("add_broadcast", x, v)

    def grad_fn(g):
        return g, (g.sum(axis=0) if broadcast else g)

    return _emit("add_broadcast", (x, v), x.data + v.data, grad_fn)


def concat_lastdim(a, b) -> Tensor:
    """Concatenate along the last axis; all other extents must agree."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_lastdim: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("concat_lastdim", a, b)
    split = a.shape[-1]

    def grad_fn(g):
        return g[..., :split], g[..., split:]

    return _emit("concat_lastdim", (a, b), np.concatenate([a.data, b.data], axis=-1), grad_fn)


def scale(x, c: float) -> Tensor:
    """Multiply by a python-scalar constant (the constant gets no gradient)."""
    x = _as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise ValueError("scale: non-finite constant rejected")
    _check_finite("scale", x)

    def grad_fn(g):
        return (g * c,)

    return _emit("scale", (x,), x.data * c, grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x), the network's sole activation."""
    x = _as_tensor(x)
    _check_finite("silu", x)
    sig = _sigmoid(x.data)
    xd = x.data

    def grad_fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _emit("silu", (x,), xd * sig, grad_fn)


def mean_all(x) -> Tensor:
    """Mean over every element; returns a scalar tensor."""
    x = _as_tensor(x)
    _check_finite("mean_all", x)
    n = x.size
    shape = x.shape

    def grad_fn(g):
        return (np.full(shape, float(g) / n),)

    return _emit("mean_all", (x,), np.asarray(x.data.mean()), grad_fn)


def sq_diff_mean(a, b) -> Tensor:
    """Mean of (a - b)^2 over every element; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sq_diff_mean: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("sq_diff_mean", a, b)
    diff = a.data - b.data
    n = diff.size

    def grad_fn(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _emit("sq_diff_mean", (a, b), np.asarray((diff * diff).mean()), grad_fn)


def abs_diff_mean(a, b) -> Tensor:
    """Mean of |a - b| over every element; scalar output.

    Uses the zero subgradient at ties, so gradients at exact kinks are 0.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"abs_diff_mean: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("abs_diff_mean", a, b)
    diff = a.data - b.data
    n = diff.size

    def grad_fn(g):
        gd = (float(g) / n) * np.sign(diff)
        return gd, -gd

    return _emit("abs_diff_mean", (a, b), np.asarray(np.abs(diff).mean()), grad_fn)


PRIMITIVES = {
    "matmul": matmul,
    "add_broadcast": add_broadcast,
    "concat_lastdim": concat_lastdim,
    "scale": scale,
    "silu": silu,
    "mean_all": mean_all,
    "sq_diff_mean": sq_diff_mean,
    "abs_diff_mean": abs_diff_mean,
}


def forward_primitive(kind: str, *inputs) -> Tensor:
    """Apply a primitive by name. Records on the active tape if one exists."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


def finite_difference_gradient(f, params, h: float = 1e-5):
    """Central-difference gradient oracle: (f(p+h·e) - f(p-h·e)) / 2h.

    `f` maps a list of float64 arrays to a scalar and must be
    deterministic (checked by evaluating twice). Returns one gradient
    array per parameter. Intentionally ignorant of Tape internals so it
    can cross-check `backward`.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    arrs = [np.array(getattr(p, "data", p), dtype=np.float64, copy=True) for p in params]
    base = float(f(arrs))
    if float(f(arrs)) != base:
        raise ValueError("finite_difference_gradient: f is not deterministic")

    grads = []
    for k, arr in enumerate(arrs):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(arrs))
            flat[i] = orig - h
            fm = float(f(arrs))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
