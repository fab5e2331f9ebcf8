"""The three characteristic blocks: SCNN directional message passing, the
ConvLSTM cell with per-channel peepholes, and the ConvGRU cell, plus the
stacked spatial-temporal runner that consumes a K-frame feature sequence and
returns the final hidden state (sequence-to-one).

ConvLSTM step (* = conv, . = elementwise, peepholes broadcast per channel):

    i  = sigmoid(W_xi*x + W_hi*h + W_ci.c + b_i)
    f  = sigmoid(W_xf*x + W_hf*h + W_cf.c + b_f)
    c' = f.c + i.tanh(W_xc*x + W_hc*h + b_c)
    o  = sigmoid(W_xo*x + W_ho*h + W_co.c' + b_o)
    h' = o.tanh(c')

ConvGRU step (update gate z multiplies the candidate):

    z  = sigmoid(W_zx*x + W_zh*h + b_z)
    r  = sigmoid(W_rx*x + W_rh*h + b_r)
    g  = tanh(W_ox*x + W_oh*(r.h) + b_o)
    h' = z.g + (1 - z).h
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, UsageError
from . import tensor as T
from .tensor import ConvSpec, ParamStore, Tape, Tensor4

SCNN_DIRECTIONS = ("down", "up", "right", "left")
_VERTICAL = ("down", "up")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in [-a, a], a = 1/sqrt(fan_in), drawn as float32."""
    a = 1.0 / np.sqrt(fan_in)
    return ((rng.random(shape, dtype=np.float32) * 2.0) - 1.0) * np.float32(a)


# ---------------------------------------------------------------------------
# SCNN


@dataclass
class ScnnParams:
    """Per direction: shared slice-convolution weights [C,C,1,k] (vertical
    directions) or [C,C,k,1] (horizontal), plus a bias of length C."""

    channels: int
    k: int
    weights: dict[str, Tensor4] = field(default_factory=dict)
    biases: dict[str, Tensor4] = field(default_factory=dict)


def init_scnn_params(store: ParamStore, prefix: str, rng, channels: int, k: int = 9) -> ScnnParams:
    if k % 2 == 0:
        raise ConfigError("SCNN kernel extent must be odd")
    p = ScnnParams(channels=channels, k=k)
    for d in SCNN_DIRECTIONS:
        shape = (channels, channels, 1, k) if d in _VERTICAL else (channels, channels, k, 1)
        p.weights[d] = store.add(f"{prefix}/{d}/w", uniform_init(rng, shape, channels * k))
        p.biases[d] = store.add(f"{prefix}/{d}/b",
                                np.zeros((1, channels, 1, 1), dtype=np.float32))
    return p


def _slice_windows(padbuf: np.ndarray, length: int, k: int) -> np.ndarray:
    """(n, L+2p, C) padded slice -> (n*L, k*C) window matrix (one copy)."""
    n, _, c = padbuf.shape
    s0, s1, s2 = padbuf.strides
    view = np.lib.stride_tricks.as_strided(
        padbuf, shape=(n, length, k, c), strides=(s0, s1, s1, s2))
    return view.reshape(n * length, k * c)


def scnn_pass(x: Tensor4, direction: str, params: ScnnParams,
              tape: Tape | None = None) -> Tensor4:
    """One directional slice recurrence. For "down" the feature map splits into
    H row slices processed top to bottom; slice 0 passes through, and every
    later slice receives its own value plus relu of the shared slice
    convolution of the previous *updated* slice. The other directions run the
    analogous recurrence along their own axis and order. Shape preserving.

    Implemented as one fused tape primitive: the recurrence is sequential by
    nature, so it runs as a channels-last loop of small GEMMs instead of
    per-slice tape records.
    """
    if direction not in SCNN_DIRECTIONS:
        raise ConfigError(f"unknown SCNN direction {direction!r}")
    n, c, h, w = x.dims
    if c != params.channels:
        raise ConfigError(f"SCNN expects {params.channels} channels, got {c}")
    wt = params.weights[direction]
    expect = (c, c, 1, params.k) if direction in _VERTICAL else (c, c, params.k, 1)
    if wt.dims != expect:
        raise ConfigError(f"SCNN weight dims {wt.dims} do not match direction {direction}")
    bias = params.biases[direction]
    k = params.k
    pad = (k - 1) // 2
    dtype = x.data.dtype

    vertical = direction in _VERTICAL
    # channels-last working copy (n, slices, L, C); horizontal directions
    # slice along width, so the spatial axes swap on the way in and out.
    # .copy() is load-bearing: with size-1 axes the transpose can still be
    # contiguous and ascontiguousarray would alias x.data
    s = (x.data.transpose(0, 2, 3, 1) if vertical else x.data.transpose(0, 3, 2, 1)).copy()
    n_slices, length = s.shape[1], s.shape[2]
    if direction in ("down", "right"):
        order = list(range(1, n_slices))
        delta = -1
    else:
        order = list(range(n_slices - 2, -1, -1))
        delta = +1

    wmat = wt.data.reshape(c, c, k)  # (out, in, tap)
    wk = np.ascontiguousarray(wmat.transpose(2, 1, 0)).reshape(k * c, c)  # rows (tap, in)
    bvec = bias.data.reshape(c).astype(dtype, copy=False)

    padbuf = np.zeros((n, length + 2 * pad, c), dtype=dtype)
    preacts = (np.empty((len(order), n, length, c), dtype=dtype) if order else None)
    for step, i in enumerate(order):
        padbuf[:, pad:pad + length, :] = s[:, i + delta]
        u = (_slice_windows(padbuf, length, k) @ wk).reshape(n, length, c)
        u += bvec
        preacts[step] = u
        s[:, i] += np.maximum(u, 0)

    out = np.ascontiguousarray(
        s.transpose(0, 3, 1, 2) if vertical else s.transpose(0, 3, 2, 1))
    y = Tensor4(out)

    if tape is not None:
        need_x = tape.wants_grad(x)
        need_w = tape.wants_grad(wt)
        need_b = tape.wants_grad(bias)
        s_final = s
        # full correlation with the tap-flipped, in/out-swapped kernel; the
        # symmetric padding of an odd kernel keeps the same pad width
        wk_back = np.ascontiguousarray(
            wmat[:, :, ::-1].transpose(2, 0, 1)).reshape(k * c, c)

        def bwd(g):
            gs = (g.transpose(0, 2, 3, 1) if vertical else g.transpose(0, 3, 2, 1)).copy()
            gw = np.zeros((k * c, c), dtype=dtype) if need_w else None
            gb = np.zeros(c, dtype=dtype) if need_b else None
            gpad = np.zeros_like(padbuf)
            for step, i in zip(range(len(order) - 1, -1, -1), reversed(order)):
                gu = gs[:, i] * (preacts[step] > 0)
                if need_b:
                    gb += gu.sum(axis=(0, 1))
                gu2 = gu.reshape(n * length, c)
                if need_w:
                    padbuf[:, pad:pad + length, :] = s_final[:, i + delta]
                    gw += _slice_windows(padbuf, length, k).T @ gu2
                gpad[:, pad:pad + length, :] = gu
                gs[:, i + delta] += (
                    _slice_windows(gpad, length, k) @ wk_back).reshape(n, length, c)
            if need_b:
                bias.accum_grad(gb.reshape(1, c, 1, 1))
            if need_w:
                wt.accum_grad(np.ascontiguousarray(
                    gw.reshape(k, c, c).transpose(2, 1, 0)).reshape(wt.dims))
            if need_x:
                x.accum_grad(np.ascontiguousarray(
                    gs.transpose(0, 3, 1, 2) if vertical else gs.transpose(0, 3, 2, 1)))

        tape.record(y, bwd)
    return y


def scnn_block(x: Tensor4, params: ScnnParams, tape: Tape | None = None) -> Tensor4:
    """The four passes applied sequentially: down, up, right, left."""
    for d in SCNN_DIRECTIONS:
        x = scnn_pass(x, d, params, tape)
    return x


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class RnnState:
    h: Tensor4
    c: Tensor4 | None = None


def zero_state(n: int, hidden: int, h: int, w: int, with_cell: bool,
               dtype=np.float32) -> RnnState:
    z = T.zeros((n, hidden, h, w), dtype=dtype)
    return RnnState(h=z, c=T.zeros((n, hidden, h, w), dtype=dtype) if with_cell else None)


_GATE_SPEC = dict(kernel=(3, 3), padding=(1, 1), stride=1)


@dataclass
class ConvLstmParams:
    in_ch: int
    hidden: int
    # gate convolutions, 3x3 pad 1 so spatial dims are preserved
    w_xi: Tensor4 = None
    w_hi: Tensor4 = None
    w_xf: Tensor4 = None
    w_hf: Tensor4 = None
    w_xc: Tensor4 = None
    w_hc: Tensor4 = None
    w_xo: Tensor4 = None
    w_ho: Tensor4 = None
    # per-channel peepholes, broadcast over h,w
    w_ci: Tensor4 = None
    w_cf: Tensor4 = None
    w_co: Tensor4 = None
    b_i: Tensor4 = None
    b_f: Tensor4 = None
    b_c: Tensor4 = None
    b_o: Tensor4 = None

    def x_spec(self):
        return ConvSpec(self.in_ch, self.hidden, has_bias=False, **_GATE_SPEC)

    def h_spec(self):
        return ConvSpec(self.hidden, self.hidden, has_bias=False, **_GATE_SPEC)


def init_convlstm_params(store: ParamStore, prefix: str, rng, in_ch: int,
                         hidden: int) -> ConvLstmParams:
    p = ConvLstmParams(in_ch=in_ch, hidden=hidden)
    for gate in ("i", "f", "c", "o"):
        wx = uniform_init(rng, (hidden, in_ch, 3, 3), in_ch * 9)
        wh = uniform_init(rng, (hidden, hidden, 3, 3), hidden * 9)
        setattr(p, f"w_x{gate}", store.add(f"{prefix}/w_x{gate}", wx))
        setattr(p, f"w_h{gate}", store.add(f"{prefix}/w_h{gate}", wh))
        setattr(p, f"b_{gate}", store.add(
            f"{prefix}/b_{gate}", np.zeros((1, hidden, 1, 1), dtype=np.float32)))
    for peep in ("ci", "cf", "co"):
        setattr(p, f"w_{peep}", store.add(
            f"{prefix}/w_{peep}", uniform_init(rng, (1, hidden, 1, 1), 1)))
    return p


def convlstm_step(x: Tensor4, state: RnnState, p: ConvLstmParams,
                  tape: Tape | None = None) -> RnnState:
    if state.c is None:
        raise UsageError("ConvLSTM state needs a cell tensor")
    if x.dims[2:] != state.h.dims[2:] or x.dims[0] != state.h.dims[0]:
        raise ConfigError(f"cell input {x.dims} does not match state {state.h.dims}")
    h, c = state.h, state.c
    xs, hs = p.x_spec(), p.h_spec()

    def gate(wx, wh, peep, b, src_c):
        pre = T.add(T.conv2d(x, wx, None, xs, tape), T.conv2d(h, wh, None, hs, tape), tape)
        if peep is not None:
            pre = T.add(pre, T.cmul(src_c, peep, tape), tape)
        return T.sigmoid(T.cadd(pre, b, tape), tape)

    i = gate(p.w_xi, p.w_hi, p.w_ci, p.b_i, c)
    f = gate(p.w_xf, p.w_hf, p.w_cf, p.b_f, c)
    cand = T.tanh(T.cadd(T.add(T.conv2d(x, p.w_xc, None, xs, tape),
                               T.conv2d(h, p.w_hc, None, hs, tape), tape),
                         p.b_c, tape), tape)
    c_new = T.add(T.mul(f, c, tape), T.mul(i, cand, tape), tape)
    o = gate(p.w_xo, p.w_ho, p.w_co, p.b_o, c_new)
    h_new = T.mul(o, T.tanh(c_new, tape), tape)
    return RnnState(h=h_new, c=c_new)


@dataclass
class ConvGruParams:
    in_ch: int
    hidden: int
    train_dropout: float = 0.5
    w_zx: Tensor4 = None
    w_zh: Tensor4 = None
    w_rx: Tensor4 = None
    w_rh: Tensor4 = None
    w_ox: Tensor4 = None
    w_oh: Tensor4 = None
    b_z: Tensor4 = None
    b_r: Tensor4 = None
    b_o: Tensor4 = None

    def x_spec(self):
        return ConvSpec(self.in_ch, self.hidden, has_bias=False, **_GATE_SPEC)

    def h_spec(self):
        return ConvSpec(self.hidden, self.hidden, has_bias=False, **_GATE_SPEC)


def init_convgru_params(store: ParamStore, prefix: str, rng, in_ch: int, hidden: int,
                        train_dropout: float = 0.5) -> ConvGruParams:
    p = ConvGruParams(in_ch=in_ch, hidden=hidden, train_dropout=train_dropout)
    for gate in ("z", "r", "o"):
        wx = uniform_init(rng, (hidden, in_ch, 3, 3), in_ch * 9)
        wh = uniform_init(rng, (hidden, hidden, 3, 3), hidden * 9)
        setattr(p, f"w_{gate}x", store.add(f"{prefix}/w_{gate}x", wx))
        setattr(p, f"w_{gate}h", store.add(f"{prefix}/w_{gate}h", wh))
        setattr(p, f"b_{gate}", store.add(
            f"{prefix}/b_{gate}", np.zeros((1, hidden, 1, 1), dtype=np.float32)))
    return p


def convgru_step(x: Tensor4, state: RnnState, p: ConvGruParams,
                 tape: Tape | None = None, training: bool = False,
                 rng: np.random.Generator | None = None) -> RnnState:
    if x.dims[2:] != state.h.dims[2:] or x.dims[0] != state.h.dims[0]:
        raise ConfigError(f"cell input {x.dims} does not match state {state.h.dims}")
    if training and p.train_dropout > 0.0:
        if rng is None:
            raise UsageError("training-mode ConvGRU needs an rng for dropout")
        x = T.dropout(x, p.train_dropout, rng, tape)
    h = state.h
    xs, hs = p.x_spec(), p.h_spec()

    def pre(wx, wh, hin, b):
        return T.cadd(T.add(T.conv2d(x, wx, None, xs, tape),
                            T.conv2d(hin, wh, None, hs, tape), tape), b, tape)

    z = T.sigmoid(pre(p.w_zx, p.w_zh, h, p.b_z), tape)
    r = T.sigmoid(pre(p.w_rx, p.w_rh, h, p.b_r), tape)
    cand = T.tanh(pre(p.w_ox, p.w_oh, T.mul(r, h, tape), p.b_o), tape)
    one_minus_z = T.affine(z, -1.0, 1.0, tape)
    h_new = T.add(T.mul(z, cand, tape), T.mul(one_minus_z, h, tape), tape)
    return RnnState(h=h_new)


def strnn_run(features: list[Tensor4], cell_type: str, layer_params: list,
              tape: Tape | None = None, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor4:
    """Run 1 or 2 stacked recurrent layers over the K-step feature sequence and
    return the last layer's final hidden state. States start at zero."""
    if not features:
        raise UsageError("strnn_run needs at least one feature tensor")
    if cell_type not in ("convlstm", "convgru"):
        raise ConfigError(f"unknown cell type {cell_type!r}")
    if len(layer_params) not in (1, 2):
        raise ConfigError("ST-RNN supports 1 or 2 layers")
    dims = features[0].dims
    for f in features[1:]:
        if f.dims != dims:
            raise ConfigError("all ST-RNN inputs must share dims")

    seq = features
    n, _, h, w = dims
    dtype = features[0].dtype
    last = None
    for p in layer_params:
        state = zero_state(n, p.hidden, h, w, with_cell=cell_type == "convlstm", dtype=dtype)
        outputs = []
        for x in seq:
            if cell_type == "convlstm":
                state = convlstm_step(x, state, p, tape)
            else:
                state = convgru_step(x, state, p, tape, training=training, rng=rng)
            outputs.append(state.h)
        seq = outputs
        last = state.h
    return last
