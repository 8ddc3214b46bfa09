"""Minimal reverse-mode autodiff on numpy.

Supplies exactly the tensor operations the image encoder, BEV pooling,
recurrent policy and segmentation decoder need. Graphs are recorded on an
explicit Tape (execution order is topological order by construction) and
differentiated by a single reverse sweep. Training runs in float32;
gradcheck re-runs the same graph in float64, where central finite
differences are clean enough for a 1e-5 gate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TrainingError

LOG_2PI = math.log(2.0 * math.pi)


class Tensor:
    """A numpy buffer plus gradient bookkeeping.

    `grad` is populated by `backward` for every tensor reachable from the
    loss that has `requires_grad`; optimizer steps clear it again.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote binary-op arguments; bare python numbers adopt the peer dtype."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(a), Tensor(b)


class Tape:
    """Ordered record of executed operations; context manager activates it."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []  # list of (output Tensor, backward closure)

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def backward(self, loss: Tensor):
        """Reverse sweep: populate .grad of every requires_grad input."""
        if loss.data.size != 1:
            raise ContractViolation(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if not self.entries:
            raise ContractViolation("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self.entries):
            if out.grad is not None:
                bwd(out.grad)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape):
    popped = _TAPE_STACK.pop()
    assert popped is tape, "tape stack corrupted"


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor):
    tape = active_tape()
    if tape is None:
        raise ContractViolation("backward called with no active Tape")
    tape.backward(loss)


def _make_output(data, inputs) -> tuple[Tensor, bool]:
    """Create the op output; report whether the op must be recorded."""
    tape = active_tape()
    record = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=record)
    return out, record


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out, record = _make_output(a.data + b.data, (a, b))
    if record:
        def bwd(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        active_tape().entries.append((out, bwd))
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(-a.data, (a,))
    if record:
        def bwd(g, a=a):
            _accum(a, -g)
        active_tape().entries.append((out, bwd))
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out, record = _make_output(a.data - b.data, (a, b))
    if record:
        def bwd(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        active_tape().entries.append((out, bwd))
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out, record = _make_output(a.data * b.data, (a, b))
    if record:
        def bwd(g, a=a, b=b):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        active_tape().entries.append((out, bwd))
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(np.exp(a.data), (a,))
    if record:
        def bwd(g, a=a, y=out.data):
            _accum(a, g * y)
        active_tape().entries.append((out, bwd))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(np.maximum(a.data, 0), (a,))
    if record:
        def bwd(g, a=a, mask=(a.data > 0)):
            _accum(a, g * mask)
        active_tape().entries.append((out, bwd))
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(np.tanh(a.data), (a,))
    if record:
        def bwd(g, a=a, y=out.data):
            _accum(a, g * (1.0 - y * y))
        active_tape().entries.append((out, bwd))
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out, record = _make_output(y, (a,))
    if record:
        def bwd(g, a=a, y=y):
            _accum(a, g * y * (1.0 - y))
        active_tape().entries.append((out, bwd))
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the subgradient goes to the first argument."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out, record = _make_output(np.where(take_a, a.data, b.data), (a, b))
    if record:
        def bwd(g, a=a, b=b, take_a=take_a):
            _accum(a, _unbroadcast(g * take_a, a.data.shape))
            _accum(b, _unbroadcast(g * ~take_a, b.data.shape))
        active_tape().entries.append((out, bwd))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the closed interval."""
    a = _as_tensor(a)
    out, record = _make_output(np.clip(a.data, lo, hi), (a,))
    if record:
        def bwd(g, a=a, mask=((a.data >= lo) & (a.data <= hi))):
            _accum(a, g * mask)
        active_tape().entries.append((out, bwd))
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(a.data.reshape(shape), (a,))
    if record:
        def bwd(g, a=a):
            _accum(a, g.reshape(a.data.shape))
        active_tape().entries.append((out, bwd))
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    out, record = _make_output(a.data.transpose(axes), (a,))
    if record:
        def bwd(g, a=a, inv=tuple(inv)):
            _accum(a, g.transpose(inv))
        active_tape().entries.append((out, bwd))
    return out


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out, record = _make_output(np.concatenate([x.data for x in xs], axis=axis), xs)
    if record:
        sizes = [x.data.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g, xs=xs, splits=splits, axis=axis):
            for x, piece in zip(xs, np.split(g, splits, axis=axis)):
                _accum(x, piece)
        active_tape().entries.append((out, bwd))
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if record:
        def bwd(g, a=a, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        active_tape().entries.append((out, bwd))
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out, record = _make_output(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if record:
        count = a.data.size // max(out.data.size, 1)
        def bwd(g, a=a, axis=axis, keepdims=keepdims, count=count):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape) / count)
        active_tape().entries.append((out, bwd))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out, record = _make_output(y, (a,))
    if record:
        def bwd(g, a=a, y=y, axis=axis):
            _accum(a, (g - (g * y).sum(axis=axis, keepdims=True)) * y)
        active_tape().entries.append((out, bwd))
    return out


# ---------------------------------------------------------------------------
# linear algebra / network ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out, record = _make_output(a.data @ b.data, (a, b))
    if record:
        def bwd(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        active_tape().entries.append((out, bwd))
    return out


def dense(x, w, b) -> Tensor:
    """x (B, in) @ w (in, out) + b (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] \
            or b.data.shape != (w.data.shape[1],):
        raise ContractViolation(
            f"dense shape mismatch: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    out, record = _make_output(x.data @ w.data + b.data, (x, w, b))
    if record:
        def bwd(g, x=x, w=w, b=b):
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            _accum(b, g.sum(axis=0))
        active_tape().entries.append((out, bwd))
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Return (cols, out_h, out_w); cols has shape (B, cin*kh*kw, oh*ow)."""
    b, cin, h, w = x.shape
    if pad:
        padded = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = x
        x = padded
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((b, cin, kh, kw, oh, ow), x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, cin * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, cin, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    g = gcols.reshape(b, cin, kh, kw, oh, ow)
    gpad = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    if pad:
        return gpad[:, :, pad:pad + h, pad:pad + w]
    return gpad


def conv2d(x, k, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, zero padding, no dilation.

    x (B, cin, H, W), k (cout, cin, kh, kw), optional bias b (cout,).
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if b is not None:
        b = _as_tensor(b)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.data.shape[1] != k.data.shape[1]:
        raise ContractViolation(f"conv2d shape mismatch: x {x.data.shape}, k {k.data.shape}")
    bs, cin, h, w = x.data.shape
    cout, _, kh, kw = k.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    kmat = k.data.reshape(cout, cin * kh * kw)
    y = np.matmul(kmat, cols)                               # (B, cout, oh*ow)
    if b is not None:
        y += b.data[:, None]
    inputs = (x, k) if b is None else (x, k, b)
    out, record = _make_output(y.reshape(bs, cout, oh, ow), inputs)
    if record:
        def bwd(g, x=x, k=k, b=b, cols=cols, kmat=kmat, stride=stride, pad=pad,
                kh=kh, kw=kw, cout=cout):
            g2 = g.reshape(g.shape[0], cout, -1)            # (B, cout, oh*ow)
            _accum(k, np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.data.shape))
            if b is not None:
                _accum(b, g2.sum(axis=(0, 2)))
            if x.requires_grad:
                gcols = np.matmul(kmat.T, g2)               # (B, cin*kh*kw, oh*ow)
                _accum(x, _col2im(gcols, x.data.shape, kh, kw, stride, pad))
        active_tape().entries.append((out, bwd))
    return out


@dataclass
class GruParams:
    """Per-gate weights of one GRU cell: update z, reset r, candidate n."""
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wn: Tensor
    un: Tensor
    bn: Tensor

    def tensors(self) -> dict:
        return {f: getattr(self, f) for f in
                ("wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn")}


def gru_cell(x, h, params: GruParams) -> Tensor:
    """One GRU step: x (B, in), h (B, hidden) -> h' (B, hidden).

    n = tanh(x Wn + r * (h Un) + bn); h' = (1 - z) * n + z * h.
    """
    z = sigmoid(add(dense(x, params.wz, params.bz), matmul(h, params.uz)))
    r = sigmoid(add(dense(x, params.wr, params.br), matmul(h, params.ur)))
    n = tanh(add(dense(x, params.wn, params.bn), mul(r, matmul(h, params.un))))
    return add(mul(sub(1.0, z), n), mul(z, h))


def scatter_add(values, indices, grid_shape, sorted_accumulation: bool = False) -> Tensor:
    """Sum-pool rows of `values` (N, C) into flat cells given by `indices` (N,).

    Out-of-range indices (negative or >= cell count) are dropped. Default
    accumulation order matches a per-point loop in input order exactly;
    `sorted_accumulation` instead sums each cell's contributions in ascending
    value order per channel, which is bit-identical under any permutation of
    the input points.
    """
    values = _as_tensor(values)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation(f"scatter indices must be integers, got {idx.dtype}")
    num_cells = int(np.prod(grid_shape)) if np.ndim(grid_shape) else int(grid_shape)
    squeeze = values.data.ndim == 1
    vals = values.data[:, None] if squeeze else values.data
    if vals.ndim != 2 or idx.shape != (vals.shape[0],):
        raise ContractViolation(
            f"scatter_add shape mismatch: values {values.data.shape}, indices {idx.shape}")
    valid = (idx >= 0) & (idx < num_cells)
    vidx = idx[valid]
    vvals = vals[valid]
    acc = np.zeros((num_cells, vals.shape[1]), dtype=vals.dtype)
    if sorted_accumulation:
        # canonical per-cell, per-channel value order: permutation-proof bits
        for c in range(vals.shape[1]):
            col = vvals[:, c]
            order = np.lexsort((col, vidx))
            np.add.at(acc[:, c], vidx[order], col[order])
    else:
        np.add.at(acc, vidx, vvals)  # unbuffered, input order: matches a per-point loop
    if squeeze:
        acc = acc[:, 0]
    out, record = _make_output(acc, (values,))
    if record:
        def bwd(g, values=values, idx=idx, valid=valid, squeeze=squeeze):
            gv = np.zeros_like(values.data)
            if squeeze:
                gv[valid] = g[idx[valid]]
            else:
                gv[valid] = g[idx[valid], :]
            _accum(values, gv)
        active_tape().entries.append((out, bwd))
    return out


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of (B, C, H, W)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample2x expects (B, C, H, W), got {x.data.shape}")
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out, record = _make_output(y, (x,))
    if record:
        def bwd(g, x=x):
            b, c, h, w = x.data.shape
            _accum(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))
        active_tape().entries.append((out, bwd))
    return out


def cross_entropy_logits(logits, target_onehot, axis: int = 1) -> Tensor:
    """Mean cross entropy between softmax(logits) and a one-hot target.

    Numerically stable log-softmax; the mean runs over all positions outside
    the class axis.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target_onehot)
    if target.shape != logits.data.shape:
        raise ContractViolation(
            f"cross_entropy target {target.shape} != logits {logits.data.shape}")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - logz
    count = logits.data.size // logits.data.shape[axis]
    value = -(target * logp).sum() / count
    out, record = _make_output(np.asarray(value, dtype=logits.data.dtype), (logits,))
    if record:
        softmax_val = np.exp(logp)
        def bwd(g, logits=logits, target=target, softmax_val=softmax_val, count=count):
            _accum(logits, g * (softmax_val - target) / count)
        active_tape().entries.append((out, bwd))
    return out


def gather_rows(x, indices) -> Tensor:
    """Select rows of the leading axis; duplicates and subsets are allowed."""
    x = _as_tensor(x)
    indices = np.asarray(indices)
    if indices.ndim != 1 or not np.issubdtype(indices.dtype, np.integer):
        raise ContractViolation("gather_rows expects a 1-D integer index array")
    out, record = _make_output(x.data[indices], (x,))
    if record:
        def bwd(g, x=x, indices=indices):
            gx = np.zeros_like(x.data)
            np.add.at(gx, indices, g)
            _accum(x, gx)
        active_tape().entries.append((out, bwd))
    return out


def gaussian_log_prob(x, mu, log_sigma) -> Tensor:
    """Elementwise log N(x | mu, exp(log_sigma)^2)."""
    d = sub(x, mu)
    q = mul(mul(d, d), exp(mul(log_sigma, -2.0)))
    return sub(mul(add(q, LOG_2PI), -0.5), log_sigma)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t: dict[str, int] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Read-only copy of parameter values (for rollout workers)."""
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for n, arr in values.items():
            p = self._params[n]
            if p.data.shape != arr.shape:
                raise ContractViolation(f"shape mismatch loading {n!r}: {p.data.shape} vs {arr.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (params + optimizer state) for checkpointing."""
        blocks = {}
        for n, t in self.items():
            blocks[f"param/{n}"] = t.data
            if n in self._adam_m:
                blocks[f"adam_m/{n}"] = self._adam_m[n]
                blocks[f"adam_v/{n}"] = self._adam_v[n]
                blocks[f"adam_t/{n}"] = np.asarray(self._adam_t[n], dtype=np.int64)
        return blocks

    def load_state_arrays(self, blocks: dict[str, np.ndarray]):
        for key, arr in blocks.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                self.load_values({name: arr})
            elif kind == "adam_m":
                self._adam_m[name] = np.asarray(arr).copy()
            elif kind == "adam_v":
                self._adam_v[name] = np.asarray(arr).copy()
            elif kind == "adam_t":
                self._adam_t[name] = int(arr)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update in place; clears grads after."""
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = store._adam_m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            store._adam_v[name] = np.zeros_like(p.data)
            store._adam_t[name] = 0
        v = store._adam_v[name]
        t = store._adam_t[name] + 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        store._adam_m[name] = m
        store._adam_v[name] = v
        store._adam_t[name] = t
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    per_input: list[float]
    max_rel_err: float

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err < tol


def gradcheck(fn, shapes, seed: int = 0, eps: float = 1e-5) -> GradcheckReport:
    """Compare analytic grads of `fn` against central finite differences.

    `fn` maps one float64 Tensor per shape to an output Tensor; the output is
    reduced to a scalar through a fixed random linear functional so the full
    Jacobian action is exercised. Inputs are seeded unit normals. The error
    reported per input is max|analytic - numeric| / max(1, max|numeric|).
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]

    # analytic pass
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs)
        probe = rng.standard_normal(out.data.shape)
        loss = tsum(mul(out, Tensor(probe)))
        tape.backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy()
                for a, t in zip(arrays, inputs)]

    def loss_value(arrs):
        out = fn(*[Tensor(a) for a in arrs])  # no tape: forward only
        return float(np.sum(out.data * probe))

    per_input = []
    for i, base in enumerate(arrays):
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_value(arrays)
            flat[j] = orig - eps
            fm = loss_value(arrays)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * eps)
        scale = max(1.0, float(np.max(np.abs(num))) if num.size else 1.0)
        err = float(np.max(np.abs(analytic[i] - num))) / scale if num.size else 0.0
        per_input.append(err)
    return GradcheckReport(per_input=per_input, max_rel_err=max(per_input) if per_input else 0.0)
