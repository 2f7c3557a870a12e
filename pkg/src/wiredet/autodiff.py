"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery to train the toy detectors in this package: dense
and convolution layers, a few elementwise maps and reductions, nearest
upsampling / average pooling, an Adam optimizer, a finite-difference
gradient checker, and a flat binary checkpoint container.

Tensors carry no batch dimension; the training driver loops over samples
and accumulates gradients. Arithmetic is float32 by default, with float64
supported for gradient checks. There is no broadcasting: operand shapes
must match exactly except where an op says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLOAT_KINDS = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An n-d float array with an optional gradient buffer.

    ``grad`` has the same shape as ``data`` once ``backward`` has run.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_KINDS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data):
    return Tensor(np.array(data, copy=True), requires_grad=True)


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(root):
    """Backpropagate from a scalar tensor through the recorded graph."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar loss tensor")
    topo = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    _check_same_shape(a, b, "mul")
    _check_same_dtype(a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def neg(a):
    def bw(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), bw)


def add_const(a, c):
    c = float(c)

    def bw(g):
        _accumulate(a, g)

    return _node(a.data + c, (a,), bw)


def rsub_const(c, a):
    """c - a for scalar c."""
    c = float(c)

    def bw(g):
        _accumulate(a, -g)

    return _node(c - a.data, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), bw)


def log(a):
    def bw(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * (0.5 / out_data))

    return _node(out_data, (a,), bw)


def square(a):
    def bw(g):
        _accumulate(a, g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), bw)


def absolute(a):
    """|a|; subgradient 0 at exactly 0."""

    def bw(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), bw)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    _check_same_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), (a, b), bw)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where a is strictly inside."""
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accumulate(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _node(a.data * mask, (a,), bw)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accumulate(a, g * (out_data * (1.0 - out_data)))

    return _node(out_data, (a,), bw)


def activation(a, kind):
    """Named activation: one of relu, sigmoid, linear."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "linear":
        return scale(a, 1.0)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(a):
    shape = a.data.shape
    dtype = a.data.dtype

    def bw(g):
        _accumulate(a, np.full(shape, float(g), dtype=dtype))

    return _node(a.data.sum(dtype=dtype), (a,), bw)


def mean_all(a):
    n = a.data.size
    shape = a.data.shape
    dtype = a.data.dtype

    def bw(g):
        _accumulate(a, np.full(shape, float(g) / n, dtype=dtype))

    return _node(a.data.mean(dtype=dtype), (a,), bw)


def sum_channels(a):
    """(C,H,W) -> (1,H,W), summing over channels."""
    if a.data.ndim != 3:
        raise ValueError("sum_channels expects a (C,H,W) tensor")
    C = a.data.shape[0]

    def bw(g):
        _accumulate(a, np.repeat(g, C, axis=0))

    return _node(a.data.sum(axis=0, keepdims=True), (a,), bw)


def expand_channels(a, channels):
    """(1,H,W) -> (channels,H,W) by repetition; backward sums back."""
    if a.data.ndim != 3 or a.data.shape[0] != 1:
        raise ValueError("expand_channels expects a (1,H,W) tensor")

    def bw(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    return _node(np.repeat(a.data, channels, axis=0), (a,), bw)


def concat_channels(parts):
    """Concatenate (Ci,H,W) tensors along the channel axis."""
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def flatten(a):
    shape = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(shape))

    return _node(a.data.reshape(-1), (a,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """Affine map: weight @ x + bias, x of shape (n,), weight (m,n), bias (m,)."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("dense expects x (n,), weight (m,n), bias (m,)")
    m, n = weight.data.shape
    if x.data.shape[0] != n or bias.data.shape[0] != m:
        raise ValueError(
            f"dense: extent mismatch x{x.data.shape} weight{weight.data.shape} bias{bias.data.shape}"
        )

    def bw(g):
        _accumulate(weight, np.outer(g, x.data))
        _accumulate(bias, g)
        if x.requires_grad:
            _accumulate(x, weight.data.T @ g)

    return _node(weight.data @ x.data + bias.data, (x, weight, bias), bw)


def _conv_out_extent(extent, k, stride, padding, opname):
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"{opname}: output extent ({extent} + 2*{padding} - {k})/{stride} + 1 "
            "is not a positive integer"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride, Ho, Wo):
    C = xp.shape[0]
    cols = np.empty((C * kh * kw, Ho * Wo), dtype=xp.dtype)
    idx = 0
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                cols[idx] = xp[c, i : i + stride * Ho : stride, j : j + stride * Wo : stride].ravel()
                idx += 1
    return cols


def _col2im(dcols, C, kh, kw, stride, Ho, Wo, Hp, Wp):
    dxp = np.zeros((C, Hp, Wp), dtype=dcols.dtype)
    idx = 0
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                dxp[c, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                    idx
                ].reshape(Ho, Wo)
                idx += 1
    return dxp


def conv2d(x, kernel, stride=1, padding=0):
    """2-d cross-correlation of x (C_in,H,W) with kernel (C_out,C_in,k,k).

    k must be odd and stride 1 or 2; the output extent
    (H + 2*padding - k)/stride + 1 must come out a positive integer.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x (C,H,W) and kernel (C_out,C_in,k,k)")
    _check_same_dtype(x, kernel)
    C_out, C_in, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd extent, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.shape[0] != C_in:
        raise ValueError(f"conv2d: input has {x.data.shape[0]} channels, kernel expects {C_in}")
    _, H, W = x.data.shape
    Ho = _conv_out_extent(H, kh, stride, padding, "conv2d")
    Wo = _conv_out_extent(W, kw, stride, padding, "conv2d")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Hp, Wp = xp.shape[1:]
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wflat = kernel.data.reshape(C_out, C_in * kh * kw)
    out = (wflat @ cols).reshape(C_out, Ho, Wo)

    def bw(g):
        gflat = g.reshape(C_out, Ho * Wo)
        _accumulate(kernel, (gflat @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = wflat.T @ gflat
            dxp = _col2im(dcols, C_in, kh, kw, stride, Ho, Wo, Hp, Wp)
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            _accumulate(x, dxp)

    return _node(out, (x, kernel), bw)


def add_channel_bias(x, bias):
    """Add a per-channel bias to a (C,H,W) tensor."""
    if x.data.ndim != 3 or bias.data.ndim != 1 or bias.data.shape[0] != x.data.shape[0]:
        raise ValueError("add_channel_bias expects x (C,H,W) and bias (C,)")

    def bw(g):
        _accumulate(bias, g.sum(axis=(1, 2)))
        _accumulate(x, g)

    return _node(x.data + bias.data[:, None, None], (x, bias), bw)


def upsample_nearest(x, factor):
    """Replicate each pixel factor x factor; backward sums over each block."""
    if x.data.ndim != 3:
        raise ValueError("upsample_nearest expects a (C,H,W) tensor")
    if factor < 2:
        raise ValueError(f"upsample_nearest: factor must be >= 2, got {factor}")
    C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        _accumulate(x, g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)))

    return _node(out, (x,), bw)


def avg_pool2d(x, factor):
    """Non-overlapping factor x factor mean pooling; factor must divide extents."""
    if x.data.ndim != 3:
        raise ValueError("avg_pool2d expects a (C,H,W) tensor")
    C, H, W = x.data.shape
    if factor < 2 or H % factor or W % factor:
        raise ValueError(f"avg_pool2d: factor {factor} must be >= 2 and divide {H}x{W}")
    Ho, Wo = H // factor, W // factor
    out = x.data.reshape(C, Ho, factor, Wo, factor).mean(axis=(2, 4))
    inv = 1.0 / (factor * factor)

    def bw(g):
        gup = np.repeat(np.repeat(g * inv, factor, axis=1), factor, axis=2)
        _accumulate(x, gup)

    return _node(out, (x,), bw)


def assemble_bank(kernels, size):
    """Stack (k_i,k_i) kernels into a (len,1,size,size) bank, zero-padding
    each kernel to the common extent around its center."""
    n = len(kernels)
    dtype = _check_same_dtype(*kernels)
    offs = []
    for k in kernels:
        ke = k.data.shape[0]
        if k.data.ndim != 2 or k.data.shape[0] != k.data.shape[1]:
            raise ValueError("assemble_bank expects square 2-d kernels")
        if ke > size or (size - ke) % 2 != 0:
            raise ValueError(f"kernel extent {ke} does not center-embed in {size}")
        offs.append((size - ke) // 2)
    out = np.zeros((n, 1, size, size), dtype=dtype)
    for i, (k, o) in enumerate(zip(kernels, offs)):
        ke = k.data.shape[0]
        out[i, 0, o : o + ke, o : o + ke] = k.data

    def bw(g):
        for i, (k, o) in enumerate(zip(kernels, offs)):
            ke = k.data.shape[0]
            _accumulate(k, g[i, 0, o : o + ke, o : o + ke])

    return _node(out, tuple(kernels), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moment buffers and step counter for a fixed parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        st.first_moment = [np.zeros_like(p.data) for p in params]
        st.second_moment = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params, grads, state):
    """One Adam update with bias correction; mutates params and state."""
    if len(params) != len(state.first_moment):
        raise ValueError("state was initialized for a different parameter list")
    arrays = []
    for p, g in zip(params, grads):
        ga = g.data if isinstance(g, Tensor) else np.asarray(g)
        if ga.shape != p.data.shape:
            raise ValueError(f"gradient shape {ga.shape} does not match parameter {p.data.shape}")
        arrays.append(ga)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, arrays, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(fn, inputs, epsilon=1e-5, seed=0, max_coords=None):
    """Compare analytic gradients of fn(inputs) against central differences.

    fn maps the input tensors to an output tensor; a fixed random linear
    functional reduces non-scalar outputs to a scalar before checking.
    Returns the worst relative error over all probed coordinates.
    """
    rng = np.random.default_rng(seed)
    probe = None

    def scalar_value():
        out = fn(inputs)
        nonlocal probe
        if probe is None:
            probe = (
                np.ones_like(out.data)
                if out.data.size == 1
                else rng.standard_normal(out.data.shape).astype(out.data.dtype)
            )
        return float((out.data * probe).sum())

    for t in inputs:
        t.zero_grad()
    out = fn(inputs)
    if probe is None:
        probe = (
            np.ones_like(out.data)
            if out.data.size == 1
            else rng.standard_normal(out.data.shape).astype(out.data.dtype)
        )
    loss = sum_all(mul(out, Tensor(probe)))
    backward(loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = scalar_value()
            flat[i] = orig - epsilon
            f_minus = scalar_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "tensor-checkpoint v1"
_CKPT_SEP = b"\n--data--\n"


def save_checkpoint(path, named_arrays):
    """Write (name, array) pairs: text manifest, then raw little-endian f32."""
    lines = [_CKPT_MAGIC, str(len(named_arrays))]
    buffers = []
    for name, arr in named_arrays:
        a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        a = np.ascontiguousarray(a, dtype="<f4")
        dims = " ".join(str(d) for d in a.shape)
        lines.append(f"{name} {a.ndim} {dims}".rstrip())
        buffers.append(a.tobytes())
    blob = "\n".join(lines).encode("utf-8") + _CKPT_SEP + b"".join(buffers)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, data = blob.partition(_CKPT_SEP)
    lines = head.decode("utf-8").split("\n")
    if lines[0] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {lines[0]!r}")
    count = int(lines[1])
    out = {}
    offset = 0
    for line in lines[2 : 2 + count]:
        parts = line.split(" ")
        name = parts[0]
        ndim = int(parts[1])
        shape = tuple(int(d) for d in parts[2 : 2 + ndim])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        out[name] = arr.copy()
        offset += 4 * n
    return out
