"""Rank-4 tensor container and the differentiable primitives everything is built from.

Values are dense (n, c, h, w) float32 arrays (float64 in gradient-checking mode),
stored row-major so flat index = ((n*C + c)*H + y)*W + x. Reverse-mode gradients
are driven by an explicit Tape: ops called with a tape record a backward rule,
ops called with tape=None are plain forward evaluation. backward() replays the
records in reverse and accumulates into each tensor's .grad buffer.

Conventions fixed here: convolution is cross-correlation (no kernel flip) with
zero padding; max-pool ties break to the lowest flat input index; bilinear
upsampling is corner-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InternalError, UsageError

Dims = tuple[int, int, int, int]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor4:
    """Dense (n, c, h, w) array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ConfigError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        n, c, h, w = arr.shape
        if n < 1 or h < 1 or w < 1 or c < 0:
            raise ConfigError(f"bad Tensor4 dims {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def accum_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise InternalError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype})"


def zeros(dims: Dims, dtype=np.float32) -> Tensor4:
    return Tensor4(np.zeros(dims, dtype=dtype))


def scalar(value: float, dtype=np.float32) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


def flat_index(dims: Dims, n: int, c: int, y: int, x: int) -> int:
    """Row-major layout index; inverse of coordinate()."""
    _, C, H, W = dims
    return ((n * C + c) * H + y) * W + x


def coordinate(dims: Dims, idx: int) -> tuple[int, int, int, int]:
    _, C, H, W = dims
    x = idx % W
    y = (idx // W) % H
    c = (idx // (W * H)) % C
    n = idx // (W * H * C)
    return n, c, y, x


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    padding: tuple[int, int] = (1, 1)
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError("conv channels must be >= 1")
        if self.stride < 1:
            raise ConfigError("conv stride must be >= 1")
        if min(self.kernel) < 1 or min(self.padding) < 0:
            raise ConfigError(f"bad kernel/padding {self.kernel}/{self.padding}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.padding
        num_h = h + 2 * ph - kh
        num_w = w + 2 * pw - kw
        if num_h < 0 or num_w < 0 or num_h % self.stride or num_w % self.stride:
            raise ConfigError(
                f"conv output size not a positive integer for input {h}x{w}, "
                f"kernel {self.kernel}, padding {self.padding}, stride {self.stride}"
            )
        return num_h // self.stride + 1, num_w // self.stride + 1


@dataclass(frozen=True)
class IndexMap:
    """Per pooled cell, the flat h*w position of the winning input cell."""

    indices: np.ndarray  # (n, c, oh, ow) int64
    input_hw: tuple[int, int]


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor4, callable]] = []
        self._produced: set[int] = set()

    def __len__(self):
        return len(self._records)

    def record(self, output: Tensor4, backward):
        self._records.append((output, backward))
        self._produced.add(id(output))

    def wants_grad(self, t: Tensor4) -> bool:
        """True when gradient flow can reach t (a parameter or a recorded output)."""
        return t.requires_grad or id(t) in self._produced


def backward(tape: Tape, loss_grad: float = 1.0):
    """Replay the tape in reverse, accumulating into .grad buffers.

    The final record must be a scalar (the loss); its gradient is seeded with
    loss_grad. Tensors never touched by the tape keep their buffers untouched.
    """
    if len(tape) == 0:
        raise UsageError("backward on an empty tape")
    loss, _ = tape._records[-1]
    if loss.data.size != 1:
        raise UsageError("final tape entry must be a scalar loss")
    loss.accum_grad(np.full(loss.data.shape, loss_grad, dtype=loss.data.dtype))
    for out, bwd in reversed(tape._records):
        if out.grad is None:
            continue
        bwd(out.grad)


class ParamStore:
    """Named, ordered collection of learnable tensors (gradients ride on each tensor)."""

    def __init__(self):
        self._params: dict[str, Tensor4] = {}

    def add(self, name: str, data) -> Tensor4:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor4) else Tensor4(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor4:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor4]:
        return list(self._params.values())

    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def grad_global_norm(self) -> float:
        sq = 0.0
        for t in self._params.values():
            if t.grad is not None:
                g = t.grad.ravel()
                sq += float(np.dot(g, g))
        return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# convolution


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the two spatial axes (cheaper than np.pad for the hot path)."""
    if not ph and not pw:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(x: np.ndarray, kernel, padding, stride) -> np.ndarray:
    """Padded input -> (n*oh*ow, c*kh*kw) window matrix (one copy)."""
    x = _pad_hw(x, *padding)
    kh, kw = kernel
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (n,c,oh',ow',kh,kw)
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, (n, oh, ow)


def _corr2d(x: np.ndarray, w: np.ndarray, padding, stride, cols=None):
    """Raw cross-correlation: x (n,c,h,w), w (o,c,kh,kw) -> (n,o,oh,ow)."""
    o = w.shape[0]
    if cols is None:
        cols, (n, oh, ow) = _im2col(x, w.shape[2:], padding, stride)
    else:
        cols, (n, oh, ow) = cols
    out = cols @ w.reshape(o, -1).T  # (n*oh*ow, o)
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    n, o, oh, ow = g.shape
    out = np.zeros((n, o, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _corr2d_input_grad(g: np.ndarray, w: np.ndarray, in_hw, padding, stride) -> np.ndarray:
    """Gradient wrt the input: full correlation of the (dilated) output grad
    with the channel-swapped, spatially flipped kernel."""
    h, w_in = in_hw
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = padding
    gd = _dilate(g, stride)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = _corr2d(gd, wt, (kh - 1, kw - 1), 1)
    if gx.shape[2:] == (h, w_in) and not ph and not pw:
        return gx
    return np.ascontiguousarray(gx[:, :, ph:ph + h, pw:pw + w_in])


def conv2d(x: Tensor4, weights: Tensor4, bias: Tensor4 | None, spec: ConvSpec,
           tape: Tape | None = None) -> Tensor4:
    """2-D cross-correlation with zero padding. weights (out_ch, in_ch, kh, kw),
    bias (1, out_ch, 1, 1) or None."""
    n, c, h, w_in = x.dims
    if c != spec.in_ch:
        raise ConfigError(f"conv2d input has {c} channels, spec expects {spec.in_ch}")
    if weights.dims != (spec.out_ch, spec.in_ch) + spec.kernel:
        raise ConfigError(
            f"conv2d weights {weights.dims} do not match spec "
            f"({spec.out_ch},{spec.in_ch},{spec.kernel[0]},{spec.kernel[1]})"
        )
    if spec.has_bias:
        if bias is None or bias.dims != (1, spec.out_ch, 1, 1):
            raise ConfigError("conv2d bias missing or mis-shaped")
    elif bias is not None:
        raise ConfigError("conv2d got a bias but spec.has_bias is False")
    spec.out_hw(h, w_in)

    cols = _im2col(x.data, spec.kernel, spec.padding, spec.stride)
    out = _corr2d(x.data, weights.data, spec.padding, spec.stride, cols=cols)
    if bias is not None:
        out += bias.data
    y = Tensor4(out)

    if tape is not None:
        need_x = tape.wants_grad(x)
        need_w = tape.wants_grad(weights)
        need_b = bias is not None and tape.wants_grad(bias)
        saved_cols = cols if need_w else None  # reused for the weight gradient

        def bwd(g):
            if need_b:
                bias.accum_grad(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
            if need_w:
                o = spec.out_ch
                g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
                weights.accum_grad((g2.T @ saved_cols[0]).reshape(weights.dims))
            if need_x:
                x.accum_grad(
                    _corr2d_input_grad(g, weights.data, (h, w_in), spec.padding, spec.stride))

        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x: Tensor4, tape: Tape | None = None) -> tuple[Tensor4, IndexMap]:
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2x2 needs even h,w, got {h}x{w}")
    oh, ow = h // 2, w // 2
    # windows laid out row-major so argmax ties resolve to the lowest flat index
    win = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    a4 = win.argmax(axis=-1)
    out = np.take_along_axis(win, a4[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh).reshape(1, 1, oh, 1) + a4 // 2
    cols = 2 * np.arange(ow).reshape(1, 1, 1, ow) + a4 % 2
    idx = IndexMap((rows * w + cols).astype(np.int64), (h, w))
    y = Tensor4(np.ascontiguousarray(out))

    if tape is not None:
        need_x = tape.wants_grad(x)
        flat_idx = idx.indices.reshape(n, c, -1)

        def bwd(g):
            if need_x:
                gx = np.zeros((n, c, h * w), dtype=g.dtype)
                np.put_along_axis(gx, flat_idx, g.reshape(n, c, -1), axis=2)
                x.accum_grad(gx.reshape(n, c, h, w))

        tape.record(y, bwd)
    return y, idx


def maxunpool2x2(x: Tensor4, indices: IndexMap, out_hw: tuple[int, int],
                 tape: Tape | None = None) -> Tensor4:
    n, c, h, w = x.dims
    oh, ow = out_hw
    if indices.input_hw != (oh, ow) or indices.indices.shape != (n, c, h, w):
        raise ConfigError("maxunpool2x2 indices do not match input/output dims")
    if (oh, ow) != (2 * h, 2 * w):
        raise ConfigError(f"maxunpool2x2 expects doubled dims, got {out_hw} from {h}x{w}")
    flat_idx = indices.indices.reshape(n, c, -1)
    if flat_idx.min() < 0 or flat_idx.max() >= oh * ow:
        raise InternalError("unpool index out of range")
    out = np.zeros((n, c, oh * ow), dtype=x.data.dtype)
    np.put_along_axis(out, flat_idx, x.data.reshape(n, c, -1), axis=2)
    y = Tensor4(out.reshape(n, c, oh, ow))

    if tape is not None:
        need_x = tape.wants_grad(x)

        def bwd(g):
            if need_x:
                gx = np.take_along_axis(g.reshape(n, c, -1), flat_idx, axis=2)
                x.accum_grad(gx.reshape(n, c, h, w))

        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# upsampling

_lin_cache: dict[tuple[int, type], np.ndarray] = {}


def _lin_matrix(nin: int, dtype) -> np.ndarray:
    """Corner-aligned 2x linear interpolation matrix (2*nin, nin)."""
    key = (nin, np.dtype(dtype).type)
    m = _lin_cache.get(key)
    if m is not None:
        return m
    nout = 2 * nin
    m = np.zeros((nout, nin), dtype=dtype)
    if nin == 1:
        m[:, 0] = 1.0
    else:
        pos = np.arange(nout, dtype=np.float64) * (nin - 1) / (nout - 1)
        j0 = np.minimum(pos.astype(np.int64), nin - 2)
        frac = pos - j0
        m[np.arange(nout), j0] = (1.0 - frac).astype(dtype)
        m[np.arange(nout), j0 + 1] = frac.astype(dtype)
    _lin_cache[key] = m
    return m


def bilinear_upsample2x(x: Tensor4, tape: Tape | None = None) -> Tensor4:
    n, c, h, w = x.dims
    mh = _lin_matrix(h, x.data.dtype)
    mw = _lin_matrix(w, x.data.dtype)
    y = Tensor4(mh @ x.data @ mw.T)

    if tape is not None:
        need_x = tape.wants_grad(x)

        def bwd(g):
            if need_x:
                x.accum_grad(mh.T @ g @ mw)

        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# pointwise and shape ops


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def pointwise(x: Tensor4, fn: str, tape: Tape | None = None) -> Tensor4:
    if fn == "relu":
        y = Tensor4(np.maximum(x.data, 0))

        def bwd_fn(g):
            return g * (x.data > 0)
    elif fn == "sigmoid":
        y = Tensor4(_stable_sigmoid(x.data))
        yd = y.data

        def bwd_fn(g):
            return g * yd * (1.0 - yd)
    elif fn == "tanh":
        y = Tensor4(np.tanh(x.data))
        yd = y.data

        def bwd_fn(g):
            return g * (1.0 - yd * yd)
    else:
        raise UsageError(f"unknown pointwise fn {fn!r}")

    if tape is not None and tape.wants_grad(x):
        tape.record(y, lambda g: x.accum_grad(bwd_fn(g)))
    elif tape is not None:
        tape.record(y, lambda g: None)
    return y


def relu(x, tape=None):
    return pointwise(x, "relu", tape)


def sigmoid(x, tape=None):
    return pointwise(x, "sigmoid", tape)


def tanh(x, tape=None):
    return pointwise(x, "tanh", tape)


def log_softmax_channels(x: Tensor4, tape: Tape | None = None) -> Tensor4:
    """Per-pixel log-softmax over the channel axis, stabilized by max-subtraction."""
    if x.dims[1] < 2:
        raise ConfigError("log_softmax_channels needs c >= 2")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = Tensor4(z - lse)

    if tape is not None:
        need_x = tape.wants_grad(x)
        yd = y.data

        def bwd(g):
            if need_x:
                x.accum_grad(g - np.exp(yd) * g.sum(axis=1, keepdims=True))

        tape.record(y, bwd)
    return y


def concat_channels(a: Tensor4, b: Tensor4, tape: Tape | None = None) -> Tensor4:
    na, ca, ha, wa = a.dims
    nb, cb, hb, wb = b.dims
    if (na, ha, wa) != (nb, hb, wb):
        raise ConfigError(f"concat_channels spatial mismatch {a.dims} vs {b.dims}")
    y = Tensor4(np.concatenate([a.data, b.data], axis=1))

    if tape is not None:
        need_a = tape.wants_grad(a)
        need_b = tape.wants_grad(b)

        def bwd(g):
            if need_a and ca:
                a.accum_grad(g[:, :ca])
            if need_b and cb:
                b.accum_grad(g[:, ca:])

        tape.record(y, bwd)
    return y


def add(a: Tensor4, b: Tensor4, tape: Tape | None = None) -> Tensor4:
    if a.dims != b.dims:
        raise ConfigError(f"add dims mismatch {a.dims} vs {b.dims}")
    y = Tensor4(a.data + b.data)
    if tape is not None:
        need_a = tape.wants_grad(a)
        need_b = tape.wants_grad(b)

        def bwd(g):
            if need_a:
                a.accum_grad(g)
            if need_b:
                b.accum_grad(g)

        tape.record(y, bwd)
    return y


def mul(a: Tensor4, b: Tensor4, tape: Tape | None = None) -> Tensor4:
    """Hadamard product of same-dims tensors."""
    if a.dims != b.dims:
        raise ConfigError(f"mul dims mismatch {a.dims} vs {b.dims}")
    y = Tensor4(a.data * b.data)
    if tape is not None:
        need_a = tape.wants_grad(a)
        need_b = tape.wants_grad(b)

        def bwd(g):
            if need_a:
                a.accum_grad(g * b.data)
            if need_b:
                b.accum_grad(g * a.data)

        tape.record(y, bwd)
    return y


def cmul(x: Tensor4, v: Tensor4, tape: Tape | None = None) -> Tensor4:
    """Per-channel scale: x (n,c,h,w) * v (1,c,1,1) broadcast over n,h,w."""
    if v.dims != (1, x.dims[1], 1, 1):
        raise ConfigError(f"cmul vector dims {v.dims} do not match channels of {x.dims}")
    y = Tensor4(x.data * v.data)
    if tape is not None:
        need_x = tape.wants_grad(x)
        need_v = tape.wants_grad(v)

        def bwd(g):
            if need_x:
                x.accum_grad(g * v.data)
            if need_v:
                v.accum_grad((g * x.data).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))

        tape.record(y, bwd)
    return y


def cadd(x: Tensor4, v: Tensor4, tape: Tape | None = None) -> Tensor4:
    """Per-channel bias add: x (n,c,h,w) + v (1,c,1,1)."""
    if v.dims != (1, x.dims[1], 1, 1):
        raise ConfigError(f"cadd vector dims {v.dims} do not match channels of {x.dims}")
    y = Tensor4(x.data + v.data)
    if tape is not None:
        need_x = tape.wants_grad(x)
        need_v = tape.wants_grad(v)

        def bwd(g):
            if need_x:
                x.accum_grad(g)
            if need_v:
                v.accum_grad(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))

        tape.record(y, bwd)
    return y


def affine(x: Tensor4, scale: float, shift: float, tape: Tape | None = None) -> Tensor4:
    y = Tensor4(x.data * scale + shift)
    if tape is not None:
        need_x = tape.wants_grad(x)

        def bwd(g):
            if need_x:
                x.accum_grad(g * scale)

        tape.record(y, bwd)
    return y


def dropout(x: Tensor4, p: float, rng: np.random.Generator,
            tape: Tape | None = None) -> Tensor4:
    """Inverted dropout; draws one mask per call from rng."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout rate must be in [0,1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.dims) >= p).astype(x.data.dtype) / (1.0 - p)
    y = Tensor4(x.data * mask)
    if tape is not None:
        need_x = tape.wants_grad(x)

        def bwd(g):
            if need_x:
                x.accum_grad(g * mask)

        tape.record(y, bwd)
    return y


def sum_all(x: Tensor4, tape: Tape | None = None) -> Tensor4:
    y = Tensor4(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        need_x = tape.wants_grad(x)

        def bwd(g):
            if need_x:
                x.accum_grad(np.full(x.dims, g.reshape(-1)[0], dtype=x.data.dtype))

        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build, params: list[Tensor4], eps: float = 1e-3) -> float:
    """Compare backward() against central differences for a scalar-valued graph.

    build(tape) must construct the graph from `params` and return the scalar
    loss tensor; it is re-invoked with tape=None for the finite-difference
    evaluations, so it has to be a pure function of the current param values.
    Returns max over coordinates of |analytic - numeric| / max(|a|, |n|, 1e-8).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise UsageError("grad_check requires float64 parameters")
        p.requires_grad = True
        p.zero_grad()

    tape = Tape()
    loss = build(tape)
    if loss.data.size != 1:
        raise UsageError("grad_check graph must end in a scalar")
    backward(tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build(None).item()
            flat[i] = orig - eps
            f_minus = build(None).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(an_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(an_flat[i] - numeric) / denom)
    return worst
