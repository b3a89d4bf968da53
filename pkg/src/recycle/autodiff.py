"""Dense float tensors with a reverse-mode differentiation tape.

Small, deterministic, CPU-only engine backed by numpy. It supports exactly
the primitives needed to train small convolutional models with adapter
layers: conv2d (grouped), matmul, add, scale, relu, log, softmax, sum,
2x2 mean pooling, global mean pooling, channel concatenation, and reshape
as a structural helper. Composite operations elsewhere in the package hook
into the same tape through :meth:`Graph.record`.

Storage is 32-bit by default; 64-bit tensors go through the identical code
paths and are used by the finite-difference oracles.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Inconsistent input extents; the message names the offending axis."""


class Tensor:
    """A dense row-major float array, optionally tracked by the active graph.

    Tensors are treated as immutable values by all operations; only an
    optimizer mutates parameter buffers in place, between forward passes.
    """

    __slots__ = ("data", "requires_grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._op_output = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE = threading.local()


def _graph_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered record of operations plus a parameter registry.

    One training run owns one Graph; ops executed while the graph is active
    append tape nodes in execution order, so every node's inputs precede it.
    ``backward`` walks the tape once in reverse and then clears it, leaving
    the registry intact for the next minibatch.
    """

    def __init__(self):
        self.ops: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def register(self, name: str, tensor: Tensor) -> Tensor:
        """Register a trainable parameter under a unique name."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def record(self, out: Tensor, inputs: Sequence[Tensor],
               vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        """Append a tape node.

        ``vjp`` maps the output gradient to one gradient per input (None for
        inputs that do not require one). Composite ops in other modules use
        this entry point to define their own backward rules.
        """
        out._op_output = True
        self.ops.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Reverse-sweep the tape from a scalar loss.

        Returns a gradient map covering every registered parameter (exact
        zeros when the loss does not reach it) and any other grad-requiring
        leaf the loss touched. The tape is consumed.
        """
        if loss.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.ops):
            g = acc.pop(id(node.out), None)
            if g is None:
                continue
            grads_in = node.vjp(g)
            for t, gi in zip(node.inputs, grads_in):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
                if not t._op_output:
                    leaves[key] = t
        self.ops.clear()
        result: dict[Tensor, Tensor] = {}
        for t in self.params.values():
            g = acc.get(id(t))
            result[t] = Tensor(g if g is not None else np.zeros_like(t.data))
        for key, t in leaves.items():
            if t not in result:
                result[t] = Tensor(acc[key])
        return result


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        graph.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    out = x.data + y.data

    def vjp(g):
        gx = _unbroadcast(g, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g, y.shape) if y.requires_grad else None
        return gx, gy

    return _emit(out, (x, y), vjp)


def scale(x: Tensor, s: "Tensor | float") -> Tensor:
    """Multiply a tensor by a scalar (python float or one-element tensor)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale expects a scalar multiplier, got shape {s.shape}")
        s_val = s.data.reshape(-1)[0]
        out = x.data * s_val

        def vjp(g):
            gx = g * s_val if x.requires_grad else None
            gs = np.sum(g * x.data).reshape(s.shape).astype(s.dtype) if s.requires_grad else None
            return gx, gs

        return _emit(out, (x, s), vjp)

    s_const = float(s)
    out = x.data * np.asarray(s_const, dtype=x.dtype)

    def vjp_const(g):
        return (g * s_const if x.requires_grad else None,)

    return _emit(out, (x,), vjp_const)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner axis mismatch: a columns={a.shape[1]} vs b rows={b.shape[0]}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    """Natural log; defined for strictly positive inputs."""
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _emit(out, (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit(out, (x,), vjp)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis=None, scalar output) or one axis."""
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).astype(x.dtype, copy=True),)

    return _emit(np.asarray(out), (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Structural reshape (no data movement in the math sense)."""
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing (channel) axis."""
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    base = parts[0].shape[:-1]
    for i, p in enumerate(parts):
        if p.shape[:-1] != base:
            raise ShapeError(
                f"concat_channels leading extents differ at part {i}: {p.shape[:-1]} vs {base}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=-1)
        return tuple(piece if p.requires_grad else None
                     for piece, p in zip(pieces, parts))

    return _emit(out, tuple(parts), vjp)


def mean_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over N,H,W,C input."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool2x2 expects N,H,W,C input, got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool2x2 needs even spatial extents, got H={h}, W={w}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / np.asarray(4, dtype=x.dtype)
        return (gx.astype(x.dtype, copy=False),)

    return _emit(out.astype(x.dtype, copy=False), (x,), vjp)


def global_mean_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: N,H,W,C -> N,C."""
    if x.ndim != 4:
        raise ShapeError(f"global_mean_pool expects N,H,W,C input, got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def vjp(g):
        gx = np.broadcast_to(g[:, None, None, :], x.shape) / np.asarray(h * w, dtype=x.dtype)
        return (gx.astype(x.dtype, copy=True),)

    return _emit(out.astype(x.dtype, copy=False), (x,), vjp)


def _conv_dense(xd: np.ndarray, wd: np.ndarray, padding: int):
    """Dense (single-group) im2col cross-correlation; returns output, the
    patch matrix, and a backward closure."""
    n, h, width, c_in = xd.shape
    kh, kw, _, c_out = wd.shape
    h2 = h + 2 * padding - kh + 1
    w2 = width + 2 * padding - kw + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
        if padding else xd
    # slab-wise im2col: one strided block copy per kernel tap
    patches = np.empty((n, h2, w2, kh, kw, c_in), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, i, j, :] = xp[:, i:i + h2, j:j + w2, :]
    patches = patches.reshape(n * h2 * w2, kh * kw * c_in)
    filt = wd.reshape(kh * kw * c_in, c_out)
    out = (patches @ filt).reshape(n, h2, w2, c_out)

    def backward(g, need_dx: bool, need_dw: bool):
        gg = g.reshape(n * h2 * w2, c_out)
        dw = (patches.T @ gg).reshape(kh, kw, c_in, c_out) if need_dw else None
        dx = None
        if need_dx:
            dp = (gg @ filt.T).reshape(n, h2, w2, kh, kw, c_in)
            dxp = np.zeros((n, h + 2 * padding, width + 2 * padding, c_in),
                           dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h2, j:j + w2, :] += dp[:, :, :, i, j, :]
            dx = dxp[:, padding:padding + h, padding:padding + width, :] \
                if padding else dxp
        return dx, dw

    return out, backward


def conv2d(x: Tensor, w: Tensor, groups: int = 1, padding: int = 0) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``x`` is N,H,W,C_in; ``w`` is kH,kW,C_in/groups,C_out with output
    channels laid out group-contiguously (group g owns output channels
    ``g*C_out/groups`` onward). Spatial output extent is
    ``H + 2*padding - kH + 1``; stride is always 1.

    Three execution strategies, identical in math: 1x1 kernels contract
    channels directly, single-group convs run one im2col matmul, and
    grouped spatial convs are lifted to a dense conv over a block-diagonal
    filter (BLAS beats per-group loops at these sizes).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N,H,W,C_in, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d filters must be kH,kW,C_in/groups,C_out, got {w.shape}")
    n, h, width, c_in = x.shape
    kh, kw, depth, c_out = w.shape
    if groups < 1:
        raise ValueError(f"groups must be positive, got {groups}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if c_in % groups:
        raise ShapeError(f"conv2d: input channel axis C_in={c_in} not divisible by groups={groups}")
    if c_out % groups:
        raise ShapeError(f"conv2d: output channel axis C_out={c_out} not divisible by groups={groups}")
    cg = c_in // groups
    if depth != cg:
        raise ShapeError(
            f"conv2d: filter depth axis is {depth}, expected C_in/groups = {cg}")
    h2 = h + 2 * padding - kh + 1
    w2 = width + 2 * padding - kw + 1
    if h2 < 1 or w2 < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} with padding {padding} exceeds spatial axes H={h}, W={width}")
    og = c_out // groups

    if kh == 1 and kw == 1 and padding == 0:
        xr = x.data.reshape(n, h, width, groups, cg)
        wr = w.data.reshape(cg, groups, og)
        out = np.einsum("nhwgc,cgo->nhwgo", xr, wr).reshape(n, h, width, c_out)

        def vjp_point(g):
            gr = g.reshape(n, h, width, groups, og)
            gx = gw = None
            if x.requires_grad:
                gx = np.einsum("nhwgo,cgo->nhwgc", gr, wr).reshape(x.shape)
            if w.requires_grad:
                gw = np.einsum("nhwgc,nhwgo->cgo", xr, gr).reshape(w.shape)
            return gx, gw

        return _emit(out, (x, w), vjp_point)

    if groups == 1:
        out, dense_bwd = _conv_dense(x.data, w.data, padding)

        def vjp_dense(g):
            return dense_bwd(g, x.requires_grad, w.requires_grad)

        return _emit(out, (x, w), vjp_dense)

    # block-diagonal lift: zero blocks contribute exact zeros to both the
    # output and the input gradient, so results match a per-group loop
    wd = np.zeros((kh, kw, c_in, c_out), dtype=w.dtype)
    for g_i in range(groups):
        wd[:, :, g_i * cg:(g_i + 1) * cg, g_i * og:(g_i + 1) * og] = \
            w.data[:, :, :, g_i * og:(g_i + 1) * og]
    out, dense_bwd = _conv_dense(x.data, wd, padding)

    def vjp_grouped(g):
        gx, dw_dense = dense_bwd(g, x.requires_grad, w.requires_grad)
        gw = None
        if dw_dense is not None:
            gw = np.empty_like(w.data)
            for g_i in range(groups):
                gw[:, :, :, g_i * og:(g_i + 1) * og] = \
                    dw_dense[:, :, g_i * cg:(g_i + 1) * cg, g_i * og:(g_i + 1) * og]
        return gx, gw

    return _emit(out, (x, w), vjp_grouped)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     eps: float = 1e-3) -> Tensor:
    """Central-difference gradient oracle, one coordinate at a time.

    ``f`` must map a tensor of x's shape to a scalar. The probe dtype follows
    ``x``; use a float64 tensor when the O(eps^2) truncation needs to be the
    dominant error term.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    def evaluate(data: np.ndarray) -> float:
        out = f(Tensor(data))
        if isinstance(out, Tensor):
            if out.size != 1:
                raise ValueError("finite_diff_grad expects a scalar-valued function")
            return float(out.data.reshape(-1)[0])
        return float(out)

    base = x.data.copy()
    grad = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = evaluate(base)
        flat[i] = orig - eps
        f_minus = evaluate(base)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape), dtype=x.dtype)


class Adam:
    """Adam with decoupled weight decay, operating in each parameter's dtype."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            gt = grads.get(p)
            if gt is None:
                continue
            g = gt.data.astype(p.dtype, copy=False)
            dt = p.dtype.type
            if self.weight_decay:
                p.data -= dt(self.lr * self.weight_decay) * p.data
            self._m[i] = dt(b1) * self._m[i] + dt(1 - b1) * g
            self._v[i] = dt(b2) * self._v[i] + dt(1 - b2) * (g * g)
            mhat = self._m[i] / dt(1 - b1 ** self.t)
            vhat = self._v[i] / dt(1 - b2 ** self.t)
            p.data -= dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


# ---------------------------------------------------------------------------
# weight blob serialization
# ---------------------------------------------------------------------------
# One blob per named parameter: a little-endian header (u64 extent count,
# then the extents as u64) followed by the float32 payload. Blobs are
# concatenated in sorted-name order; names and byte offsets live in the
# JSON manifest that indexes the file.

def write_blobs(path, arrays: dict[str, np.ndarray]) -> dict[str, int]:
    """Write named float32 blobs to one file; returns name -> byte offset."""
    offsets: dict[str, int] = {}
    with open(path, "wb") as f:
        for name in sorted(arrays):
            offsets[name] = f.tell()
            a = np.ascontiguousarray(arrays[name], dtype="<f4")
            f.write(struct.pack("<Q", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())
    return offsets


def read_blobs(path, offsets: dict[str, int]) -> dict[str, np.ndarray]:
    """Read named blobs back given the manifest's offsets."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        for name, off in offsets.items():
            f.seek(off)
            (ndim,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out


def params_digest(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over the canonical blob encoding of a named-array dict."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        h.update(name.encode())
        h.update(struct.pack("<Q", a.ndim))
        if a.ndim:
            h.update(struct.pack(f"<{a.ndim}Q", *a.shape))
        h.update(a.tobytes())
    return h.hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
