"""A small float64 tensor library with reverse-mode differentiation.

Only what the spatio-temporal network needs is provided: element-wise
arithmetic with numpy broadcasting, reductions, channel concatenation,
``conv3d`` with causal-temporal and same-spatial padding, a locally
connected layer, the AdaMod optimizer and a checkpoint format.

Tensors used by the network are 5-D ``(batch, channel, time, height, width)``
but the arithmetic works for any shape.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A float64 array with an optional gradient and the op that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # basic protocol ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward_fn):
    req = _needs(*parents)
    return Tensor(data, req, _parents=parents if req else (), _backward=backward_fn if req else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _make(out, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, b) -> Tensor:
    """Element-wise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), \
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)
    return _make(np.maximum(a.data, b.data), (a, b), bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    total = tsum(a, axis, keepdims)
    return mul(total, total.data.size / a.data.size)


def variance(a, axis, keepdims=True) -> Tensor:
    """Population variance over ``axis``."""
    m = tmean(a, axis, keepdims=True)
    return tmean(square(a - m), axis, keepdims)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(sizes[k], sizes[k + 1]), axis=axis) for k in range(len(ts)))
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def mse(pred, target) -> Tensor:
    return tmean(square(as_tensor(pred) - as_tensor(target)))


# --- backward ---------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf that requires it.

    Intermediate gradients are kept only for the duration of the call, so
    each leaf receives exactly one contribution per call (summed over the
    paths that reach it).
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- convolution ------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (1, 1, 1)
    causal: bool = True   # temporal padding: causal (True) or centred (False)
    bias: bool = True

    def __post_init__(self):
        if min(self.kernel) < 1 or min(self.in_channels, self.out_channels) < 1:
            raise ValueError("kernel dims and channel counts must be >= 1")


def _pads(kernel, causal):
    kt, kh, kw = kernel
    tp = (kt - 1, 0) if causal else ((kt - 1) // 2, kt // 2)
    return (tp, ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2))


def _pad(x, pads):
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, causal: bool = True) -> Tensor:
    """3-D convolution (cross-correlation) preserving time, height and width.

    Parameters
    ----------
    x : Tensor, shape (B, Cin, T, H, W)
    weight : Tensor, shape (Cout, Cin, kt, kh, kw)
    bias : Tensor, shape (Cout,), optional
    causal : bool
        Pad ``kt - 1`` zeros before the first time step only, so output
        step ``tau`` sees inputs at steps ``<= tau``. Height and width are
        always padded symmetrically (extra row/column after for even kernels).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5-D input (B,C,T,H,W) and weight (Cout,Cin,kt,kh,kw)")
    b_, cin, t_, h_, w_ = x.shape
    cout, wcin, kt, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"channel axis mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias axis mismatch: expected ({cout},), got {bias.shape}")
    pads = _pads((kt, kh, kw), causal)
    xp = _pad(x.data, pads)
    wd = weight.data
    # im2col: one contraction over (Cin, kt, kh, kw) instead of a loop over offsets
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    out = np.moveaxis(np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4])), -1, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            # correlate the fully padded output gradient with the flipped kernel
            (t0, _), (h0, _), (w0, _) = pads
            gp = _pad(g, ((kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gp = gp[:, :, t0:t0 + t_ + kt - 1, h0:h0 + h_ + kh - 1, w0:w0 + w_ + kw - 1]
            gwin = sliding_window_view(gp, (kt, kh, kw), axis=(2, 3, 4))
            flipped = wd[:, :, ::-1, ::-1, ::-1]
            gx = np.moveaxis(np.tensordot(gwin, flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4])),
                             -1, 1)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads
    return _make(out, parents, bw)


def locally_connected(x: Tensor, weight: Tensor, causal: bool = True) -> Tensor:
    """Convolution with a separate filter at every (time, row, column) position.

    Parameters
    ----------
    x : Tensor, shape (B, Cin, T, H, W)
    weight : Tensor, shape (Cout, Cin, T, H, W, kt, kh, kw)
        ``weight[o, i, t, h, w]`` is the filter producing output ``(o, t, h, w)``.
        Padding follows :func:`conv3d`. With a ``1 x 1 x 1`` kernel the
        layer is an element-wise product with a position-specific weight map.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 8:
        raise ValueError("locally_connected expects (B,C,T,H,W) input and 8-D weights")
    b_, cin, t_, h_, w_ = x.shape
    cout, wcin, wt, wh, ww, kt, kh, kw = weight.shape
    if (wcin, wt, wh, ww) != (cin, t_, h_, w_):
        raise ValueError(f"weight shape {weight.shape} does not match input {x.shape}")
    pads = _pads((kt, kh, kw), causal)
    xp = _pad(x.data, pads)
    wd = weight.data
    offsets = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]
    out = np.zeros((b_, cout, t_, h_, w_))
    for a, b, c in offsets:
        win = xp[:, :, a:a + t_, b:b + h_, c:c + w_]           # (B, Cin, T, H, W)
        out += np.einsum("bithw,oithw->bothw", win, wd[..., a, b, c])

    def bw(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for a, b, c in offsets:
            win = xp[:, :, a:a + t_, b:b + h_, c:c + w_]
            if gw is not None:
                gw[..., a, b, c] = np.einsum("bothw,bithw->oithw", g, win)
            if gx is not None:
                gx[:, :, a:a + t_, b:b + h_, c:c + w_] += np.einsum("bothw,oithw->bithw", g,
                                                                    wd[..., a, b, c])
        if gx is not None:
            (t0, _), (h0, _), (w0, _) = pads
            gx = gx[:, :, t0:t0 + t_, h0:h0 + h_, w0:w0 + w_]
        return gx, gw
    return _make(out, (x, weight), bw)


# --- optimizer --------------------------------------------------------------

@dataclass
class AdaModState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        for b in (self.beta1, self.beta2, self.beta3):
            if not 0.0 <= b < 1.0:
                raise ValueError("betas must lie in [0, 1)")


def adamod_step(state: AdaModState, params: Sequence[Tensor]) -> bool:
    """One AdaMod update of ``params`` in place from their ``.grad``.

    ``m`` and ``v`` are Adam's moments with bias correction; the per-element
    step size ``eta = lr / (sqrt(v_hat) + eps)`` is bounded by its own
    exponential average ``s`` (factor ``beta3``) and the parameter moves by
    ``-min(eta, s) * m_hat``. Parameters without a gradient count as zero
    gradient. Returns False, leaving everything untouched, when any
    gradient is non-finite.
    """
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        k = id(p)
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
            state.s[k] = np.zeros_like(p.data)
        m = state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat, v_hat = m / c1, v / c2
        eta = state.lr / (np.sqrt(v_hat) + state.eps)
        s = state.s[k] = state.beta3 * state.s[k] + (1 - state.beta3) * eta
        p.data = p.data - np.minimum(eta, s) * m_hat
    return True


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"GITC"
_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], manifest_csv=None):
    """Write named arrays to a flat binary file.

    Layout, all integers and floats little-endian: magic ``b"GITC"``,
    ``uint32`` version, ``uint32`` tensor count, then per tensor a
    ``uint16`` name length, the UTF-8 name, a ``uint8`` rank, ``rank``
    ``uint32`` dimensions and the values as ``float64`` in C order.
    ``manifest_csv`` (optional) receives ``name,shape,offset,count`` rows,
    ``offset`` being the byte offset of the first value.
    """
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    rows = []
    pos = sum(len(c) for c in chunks)
    for name, arr in params.items():
        a = np.array(arr, dtype="<f8", order="C")   # keeps rank 0, unlike ascontiguousarray
        nb = name.encode("utf-8")
        head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + \
            struct.pack(f"<{a.ndim}I", *a.shape)
        chunks.append(head)
        pos += len(head)
        rows.append((name, "x".join(map(str, a.shape)), pos, a.size))
        chunks.append(a.tobytes())
        pos += a.nbytes
    Path(path).write_bytes(b"".join(chunks))
    if manifest_csv is not None:
        with open(manifest_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "shape", "offset", "count"])
            w.writerows(rows)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (nd,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", buf, pos)
        pos += 4 * nd
        n = int(np.prod(shape)) if nd else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(float)
        pos += 8 * n
    return out


def parameters(*modules: Iterable[Tensor]) -> list[Tensor]:
    out = []
    for m in modules:
        out.extend(m)
    return out
