"""Minimal reverse-mode differentiation on numpy arrays.

Every op records its parents and an adjoint closure. Node ids come from a
global counter, so creation order is a valid topological order and the
backward pass simply walks reachable nodes by descending id.

Arrays are float32 unless a caller hands in float64 data (gradcheck does).
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
ARCCOS_CLAMP = 1e-7

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, (np.ndarray, np.floating)) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by op '{op}'")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def arccos(a) -> Tensor:
    """arccos with the input clamped to [-1 + 1e-7, 1 - 1e-7] in both passes."""
    a = as_tensor(a)
    x = np.clip(a.data, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    deriv = -1.0 / np.sqrt(1.0 - x * x)
    return _result(np.arccos(x), (a,), lambda g: (g * deriv,), "arccos")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _result(np.maximum(a.data, a.data.dtype.type(lo)), (a,), lambda g: (g * keep,), "clamp_min")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


# reductions and norms

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; a zero-norm slice is an error."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(out == 0):
        raise FloatingPointError("norm of a zero vector is not differentiable")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * a.data / out,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _result(np.asarray(res), (a,), backward, "norm")


def distance_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm that is exactly 0 at the origin, with a zero subgradient there."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        return (np.expand_dims(g, axis) * a.data / safe * (out > 0),)

    return _result(np.asarray(np.squeeze(out, axis=axis)), (a,), backward, "norm")


# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), backward, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def rotate(r, z) -> Tensor:
    """Left-multiply 3x16 embeddings by 3x3 rotations (batched)."""
    r, z = as_tensor(r), as_tensor(z)
    if r.shape[-2:] != (3, 3) or z.shape[-2] != 3:
        raise ValueError(f"rotate expects (...,3,3) @ (...,3,n), got {r.shape} and {z.shape}")
    return matmul(r, z)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b); a 1-D x is treated as a single row."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), w), (as_tensor(w).shape[-1],))
    else:
        out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(x, w, b=None) -> Tensor:
    """3x3 'same' convolution. x: (B, C, H, W), w: (O, C, 3, 3)."""
    x, w = as_tensor(x), as_tensor(w)
    bsz, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape[1:] != (c, 3, 3):
        raise ValueError(f"conv2d kernel {w.shape} does not match input channels {c}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: (B, H, W, C, 3, 3)
    cols = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(bsz, h * wd, c * 9)
    wmat = w.data.reshape(o, c * 9)
    out = (cols @ wmat.T).reshape(bsz, h, wd, o).transpose(0, 3, 1, 2)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(bsz, h * wd, o)
        gw = np.einsum("bpo,bpk->ok", gflat, cols).reshape(w.shape)
        gcols = (gflat @ wmat).reshape(bsz, h, wd, c, 3, 3)
        gpad = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gpad[:, :, 1:-1, 1:-1], gw

    res = _result(np.ascontiguousarray(out), (x, w), backward, "conv2d")
    if b is not None:
        res = add(res, reshape(as_tensor(b), (1, o, 1, 1)))
    return res


# composite helpers

def dot(a, b, axis: int = -1) -> Tensor:
    return sum_(mul(a, b), axis=axis)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    return div(dot(a, b, axis), mul(norm(a, axis), norm(b, axis)))


def angular_distance(a, b, axis: int = -1) -> Tensor:
    """arccos of the cosine similarity along ``axis``."""
    return arccos(cosine_similarity(a, b, axis))


# backward pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order: dict[int, Tensor] = {}
    stack_: list[Tensor] = [loss]
    while stack_:
        node = stack_.pop()
        if node.id in order or not node.requires_grad:
            continue
        order[node.id] = node
        stack_.extend(node._parents)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for nid in sorted(order, reverse=True):
        node = order[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient flowing out of op '{node.op}'")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def forward_backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to each named parameter.

    Parameters not reached by the loss get a zero gradient.
    """
    for p in params.values():
        p.grad = None
    backward(loss)
    out = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = g.astype(p.data.dtype, copy=False)
        p.grad = None
    return out


# optimisation

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape {grads[name].shape} does not match parameter {name} {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if lr == 0:
            continue
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = (grads[k] * factor).astype(grads[k].dtype)
    return total


# gradient checking

def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = 1e-6,
              coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the backward pass and central differences.

    ``fn`` maps input tensors to a scalar tensor. Everything runs in float64.
    Per coordinate the error is |ga - gfd| / max(1e-8, |ga| + |gfd|).
    With ``coords`` set, only that many randomly chosen coordinates of each
    input are differenced.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(vals):
        return float(fn(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        ga = analytic[i].reshape(-1)
        picks = range(flat.size)
        if coords is not None and flat.size > coords:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            fp = evaluate(arrays)
            flat[j] = orig - eps
            fm = evaluate(arrays)
            flat[j] = orig
            gfd = (fp - fm) / (2 * eps)
            err = abs(ga[j] - gfd) / max(1e-8, abs(ga[j]) + abs(gfd))
            worst = max(worst, err)
    return worst


def gradcheck_directional(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], direction: list,
                          eps: float = 1e-6) -> float:
    """Relative error between <grad, v> and the central difference along v.

    Suited to composite functions whose per-coordinate gradients are too
    small for per-coordinate differencing to resolve.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    analytic = sum(float(np.sum(leaf.grad * v)) for leaf, v in zip(leaves, direction) if leaf.grad is not None)
    fp = float(fn(*[Tensor(a + eps * v) for a, v in zip(arrays, direction)]).data)
    fm = float(fn(*[Tensor(a - eps * v) for a, v in zip(arrays, direction)]).data)
    numeric = (fp - fm) / (2 * eps)
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _graph_nodes(out: Tensor) -> list[Tensor]:
    nodes, seen, stack_ = [], set(), [out]
    while stack_:
        node = stack_.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        nodes.append(node)
        stack_.extend(node._parents)
    return sorted(nodes, key=lambda n: n.id)


def kink_margins(out: Tensor) -> tuple[float, float]:
    """Distances from non-differentiable loci over the graph behind ``out``.

    Returns (smallest |input| of any leaky-relu, smallest 1 - |input| of any
    arccos).
    """
    leaky = arc = np.inf
    for node in _graph_nodes(out):
        if node.op == "leaky_relu" and node._parents:
            leaky = min(leaky, float(np.abs(node._parents[0].data).min()))
        elif node.op == "arccos" and node._parents:
            arc = min(arc, float((1.0 - np.abs(node._parents[0].data)).min()))
    return leaky, arc


def leaky_signs(out: Tensor) -> list[np.ndarray]:
    """Sign pattern of every leaky-relu input, in graph creation order."""
    return [np.signbit(n._parents[0].data) for n in _graph_nodes(out) if n.op == "leaky_relu" and n._parents]


# checkpoint I/O: "RDTC" | version | count | (name, rank, dims, f32 data)*

CKPT_MAGIC = b"RDTC"
CKPT_VERSION = 1


def encode_checkpoint(params: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a RDTC file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"truncated checkpoint: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise ValueError(f"trailing bytes in checkpoint: {len(buf) - pos}")
    return out


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
