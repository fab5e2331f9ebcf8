"""SCNN recurrence, ConvLSTM/ConvGRU cells and the stacked runner, checked
against hand iteration, independent scalar recurrences, and central
differences through unrolled sequences."""

import math

import numpy as np
import pytest

from stlane import layers as L
from stlane import tensor as T
from stlane.errors import ConfigError, UsageError
from stlane.tensor import ParamStore, Tape, Tensor4


def make_scnn(channels, k, dtype=np.float32, weight_fill=None, seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    p = L.init_scnn_params(store, "scnn", rng, channels, k)
    if weight_fill is not None:
        for d in L.SCNN_DIRECTIONS:
            p.weights[d].data[:] = weight_fill
            p.biases[d].data[:] = 0.0
    if dtype is not np.float32:
        for d in L.SCNN_DIRECTIONS:
            p.weights[d].data = p.weights[d].data.astype(dtype)
            p.biases[d].data = p.biases[d].data.astype(dtype)
    return store, p


# ---------------------------------------------------------------------------
# SCNN forward semantics


def test_scnn_zero_params_is_identity():
    store, p = make_scnn(3, 9, weight_fill=0.0)
    x = Tensor4(np.random.default_rng(1).normal(size=(2, 3, 8, 10)).astype(np.float32))
    for d in L.SCNN_DIRECTIONS:
        np.testing.assert_array_equal(L.scnn_pass(x, d, p).data, x.data)
    np.testing.assert_array_equal(L.scnn_block(x, p).data, x.data)


def test_scnn_down_propagates_impulse_row_full_height():
    # C=1, k=1, weight 1, bias 0: a row of ones at slice 0 floods every slice
    store, p = make_scnn(1, 1, weight_fill=1.0)
    x = np.zeros((1, 1, 6, 5), dtype=np.float32)
    x[0, 0, 0, :] = 1.0
    y = L.scnn_pass(Tensor4(x), "down", p)
    np.testing.assert_array_equal(y.data, np.ones_like(x))


def test_scnn_pass_is_shape_preserving():
    store, p = make_scnn(4, 9)
    x = Tensor4(np.random.default_rng(2).normal(size=(1, 4, 64, 128)).astype(np.float32))
    for d in L.SCNN_DIRECTIONS:
        assert L.scnn_pass(x, d, p).dims == x.dims


def test_scnn_block_impulse_reaches_full_row_and_column():
    store, p = make_scnn(1, 1, weight_fill=1.0)
    h, w = 9, 11
    x = np.zeros((1, 1, h, w), dtype=np.float32)
    x[0, 0, 4, 5] = 1.0
    y = L.scnn_block(Tensor4(x), p).data[0, 0]
    assert (y[:, 5] != 0).all(), "impulse column not fully reached"
    assert (y[4, :] != 0).all(), "impulse row not fully reached"


def test_scnn_direction_order_is_down_up_right_left():
    # a kernel that only reacts along the slicing axis: with k=1 passthrough,
    # running down then up is not the same as up then down on an asymmetric input
    store, p = make_scnn(1, 1, weight_fill=1.0)
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x[0, 0, 3, :] = 1.0  # bottom row only
    down_first = L.scnn_pass(Tensor4(x), "down", p)
    assert down_first.data[0, 0, 0].sum() == 0  # down cannot move content upward
    y = L.scnn_block(Tensor4(x), p)
    assert (y.data[0, 0, 0] != 0).all()  # the later up pass does


def test_scnn_rejects_mismatched_channels():
    store, p = make_scnn(3, 9)
    with pytest.raises(ConfigError):
        L.scnn_pass(Tensor4(np.zeros((1, 2, 4, 4), dtype=np.float32)), "down", p)


# ---------------------------------------------------------------------------
# SCNN gradient


@pytest.mark.parametrize("direction", L.SCNN_DIRECTIONS)
@pytest.mark.parametrize("seed", range(5))
def test_grad_check_scnn_pass(direction, seed):
    rng = np.random.default_rng(1000 + seed)
    store, p = make_scnn(2, 3, dtype=np.float64, seed=seed)
    for d in L.SCNN_DIRECTIONS:  # positive weights keep the relu preactivations off the kink
        p.weights[d].data = rng.uniform(0.05, 0.3, size=p.weights[d].dims)
        p.biases[d].data = rng.uniform(0.01, 0.1, size=p.biases[d].dims)
    x = Tensor4(rng.uniform(0.1, 0.6, size=(1, 2, 4, 4)), requires_grad=True)
    w = p.weights[direction]
    b = p.biases[direction]

    def build(tape):
        return T.sum_all(T.tanh(L.scnn_pass(x, direction, p, tape), tape), tape)

    assert T.grad_check(build, [x, w, b]) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_scnn_block(seed):
    rng = np.random.default_rng(1100 + seed)
    store, p = make_scnn(1, 3, dtype=np.float64, seed=seed)
    for d in L.SCNN_DIRECTIONS:
        p.weights[d].data = rng.uniform(0.05, 0.25, size=p.weights[d].dims)
        p.biases[d].data = rng.uniform(0.01, 0.05, size=p.biases[d].dims)
    x = Tensor4(rng.uniform(0.1, 0.5, size=(1, 1, 4, 4)), requires_grad=True)
    params = [x] + [p.weights[d] for d in L.SCNN_DIRECTIONS]

    def build(tape):
        return T.sum_all(T.tanh(L.scnn_block(x, p, tape), tape), tape)

    assert T.grad_check(build, params) < 1e-5


# ---------------------------------------------------------------------------
# scalar oracles. These re-state the gate equations directly on floats and are
# the independent reference for the convolutional cells at 1x1 spatial extent
# (where a padded 3x3 conv reduces to its center tap).


def scalar_lstm_step(x, h, c, q):
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = sig(q["wxi"] * x + q["whi"] * h + q["wci"] * c + q["bi"])
    f = sig(q["wxf"] * x + q["whf"] * h + q["wcf"] * c + q["bf"])
    cn = f * c + i * math.tanh(q["wxc"] * x + q["whc"] * h + q["bc"])
    o = sig(q["wxo"] * x + q["who"] * h + q["wco"] * cn + q["bo"])
    return o * math.tanh(cn), cn


def scalar_gru_step(x, h, q):
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    z = sig(q["wzx"] * x + q["wzh"] * h + q["bz"])
    r = sig(q["wrx"] * x + q["wrh"] * h + q["br"])
    g = math.tanh(q["wox"] * x + q["woh"] * (r * h) + q["bo"])
    return z * g + (1.0 - z) * h


def center_only(value, dtype=np.float64):
    w = np.zeros((1, 1, 3, 3), dtype=dtype)
    w[0, 0, 1, 1] = value
    return w


def build_scalar_lstm_params(q, dtype=np.float64):
    store = ParamStore()
    p = L.ConvLstmParams(in_ch=1, hidden=1)
    for gate, (wx, wh, b) in {
        "i": ("wxi", "whi", "bi"), "f": ("wxf", "whf", "bf"),
        "c": ("wxc", "whc", "bc"), "o": ("wxo", "who", "bo"),
    }.items():
        setattr(p, f"w_x{gate}", store.add(f"w_x{gate}", center_only(q[wx], dtype)))
        setattr(p, f"w_h{gate}", store.add(f"w_h{gate}", center_only(q[wh], dtype)))
        setattr(p, f"b_{gate}", store.add(
            f"b_{gate}", np.full((1, 1, 1, 1), q[b], dtype=dtype)))
    for peep, key in (("ci", "wci"), ("cf", "wcf"), ("co", "wco")):
        setattr(p, f"w_{peep}", store.add(
            f"w_{peep}", np.full((1, 1, 1, 1), q[key], dtype=dtype)))
    return store, p


def build_scalar_gru_params(q, dtype=np.float64):
    store = ParamStore()
    p = L.ConvGruParams(in_ch=1, hidden=1, train_dropout=0.0)
    for gate, (wx, wh, b) in {
        "z": ("wzx", "wzh", "bz"), "r": ("wrx", "wrh", "br"), "o": ("wox", "woh", "bo"),
    }.items():
        setattr(p, f"w_{gate}x", store.add(f"w_{gate}x", center_only(q[wx], dtype)))
        setattr(p, f"w_{gate}h", store.add(f"w_{gate}h", center_only(q[wh], dtype)))
        setattr(p, f"b_{gate}", store.add(
            f"b_{gate}", np.full((1, 1, 1, 1), q[b], dtype=dtype)))
    return store, p


LSTM_KEYS = ["wxi", "whi", "wci", "bi", "wxf", "whf", "wcf", "bf",
             "wxc", "whc", "bc", "wxo", "who", "wco", "bo"]
GRU_KEYS = ["wzx", "wzh", "bz", "wrx", "wrh", "br", "wox", "woh", "bo"]


def test_convlstm_matches_scalar_oracle_over_100_draws():
    rng = np.random.default_rng(42)
    for _ in range(100):
        q = {k: float(rng.uniform(-1.5, 1.5)) for k in LSTM_KEYS}
        _, p = build_scalar_lstm_params(q)
        x_val, h_val, c_val = rng.uniform(-1.5, 1.5, size=3)
        state = L.RnnState(
            h=Tensor4(np.full((1, 1, 1, 1), h_val)),
            c=Tensor4(np.full((1, 1, 1, 1), c_val)))
        out = L.convlstm_step(Tensor4(np.full((1, 1, 1, 1), x_val)), state, p)
        h_ref, c_ref = scalar_lstm_step(x_val, h_val, c_val, q)
        assert abs(out.h.item() - h_ref) < 1e-6
        assert abs(out.c.item() - c_ref) < 1e-6


def test_convgru_matches_scalar_oracle_over_100_draws():
    rng = np.random.default_rng(43)
    for _ in range(100):
        q = {k: float(rng.uniform(-1.5, 1.5)) for k in GRU_KEYS}
        _, p = build_scalar_gru_params(q)
        x_val, h_val = rng.uniform(-1.5, 1.5, size=2)
        state = L.RnnState(h=Tensor4(np.full((1, 1, 1, 1), h_val)))
        out = L.convgru_step(Tensor4(np.full((1, 1, 1, 1), x_val)), state, p)
        assert abs(out.h.item() - scalar_gru_step(x_val, h_val, q)) < 1e-6


def test_convlstm_zero_params_zero_state():
    q = {k: 0.0 for k in LSTM_KEYS}
    _, p = build_scalar_lstm_params(q)
    state = L.zero_state(1, 1, 1, 1, with_cell=True, dtype=np.float64)
    out = L.convlstm_step(Tensor4(np.full((1, 1, 1, 1), 0.7)), state, p)
    # gates all sit at sigmoid(0)=0.5, candidate tanh(...) with zero weights is 0
    assert out.c.item() == 0.0 and out.h.item() == 0.0


def test_convlstm_saturated_forget_gate_preserves_memory():
    q = {k: 0.0 for k in LSTM_KEYS}
    q["bf"] = 20.0
    _, p = build_scalar_lstm_params(q)
    state = L.RnnState(h=Tensor4(np.zeros((1, 1, 1, 1))),
                       c=Tensor4(np.ones((1, 1, 1, 1))))
    out = L.convlstm_step(Tensor4(np.zeros((1, 1, 1, 1))), state, p)
    assert abs(out.c.item() - 1.0) < 1e-6


def test_convgru_zero_params():
    q = {k: 0.0 for k in GRU_KEYS}
    _, p = build_scalar_gru_params(q)
    out = L.convgru_step(Tensor4(np.zeros((1, 1, 1, 1))),
                         L.RnnState(h=Tensor4(np.zeros((1, 1, 1, 1)))), p)
    assert out.h.item() == 0.0
    out2 = L.convgru_step(Tensor4(np.zeros((1, 1, 1, 1))),
                          L.RnnState(h=Tensor4(np.ones((1, 1, 1, 1)))), p)
    assert abs(out2.h.item() - 0.5) < 1e-12  # 0.5*0 + 0.5*1


def test_convgru_saturated_update_gate_takes_candidate():
    rng = np.random.default_rng(44)
    q = {k: float(rng.uniform(-1, 1)) for k in GRU_KEYS}
    q["bz"] = 20.0
    _, p = build_scalar_gru_params(q)
    x_val, h_val = 0.4, -0.8
    out = L.convgru_step(Tensor4(np.full((1, 1, 1, 1), x_val)),
                         L.RnnState(h=Tensor4(np.full((1, 1, 1, 1), h_val))), p)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    r = sig(q["wrx"] * x_val + q["wrh"] * h_val + q["br"])
    cand = math.tanh(q["wox"] * x_val + q["woh"] * (r * h_val) + q["bo"])
    assert abs(out.h.item() - cand) < 1e-6


def test_hidden_state_is_bounded_by_one():
    rng = np.random.default_rng(45)
    for cell in ("convlstm", "convgru"):
        store = ParamStore()
        if cell == "convlstm":
            p = L.init_convlstm_params(store, "c", rng, 3, 3)
        else:
            p = L.init_convgru_params(store, "c", rng, 3, 3, train_dropout=0.0)
        for t in store.tensors():  # exaggerate the weights
            t.data *= 20.0
        feats = [Tensor4(rng.normal(size=(2, 3, 4, 4)).astype(np.float32) * 10)
                 for _ in range(6)]
        out = L.strnn_run(feats, cell, [p])
        assert np.abs(out.data).max() <= 1.0 + 1e-6


# ---------------------------------------------------------------------------
# cell gradients through a K=3 unrolled sequence


def rand_lstm_params(rng, in_ch, hidden, scale=0.25):
    store = ParamStore()
    p = L.ConvLstmParams(in_ch=in_ch, hidden=hidden)
    for gate in ("i", "f", "c", "o"):
        setattr(p, f"w_x{gate}", store.add(
            f"w_x{gate}", rng.uniform(-scale, scale, size=(hidden, in_ch, 3, 3))))
        setattr(p, f"w_h{gate}", store.add(
            f"w_h{gate}", rng.uniform(-scale, scale, size=(hidden, hidden, 3, 3))))
        setattr(p, f"b_{gate}", store.add(
            f"b_{gate}", rng.uniform(-scale, scale, size=(1, hidden, 1, 1))))
    for peep in ("ci", "cf", "co"):
        setattr(p, f"w_{peep}", store.add(
            f"w_{peep}", rng.uniform(-scale, scale, size=(1, hidden, 1, 1))))
    return store, p


def rand_gru_params(rng, in_ch, hidden, scale=0.25):
    store = ParamStore()
    p = L.ConvGruParams(in_ch=in_ch, hidden=hidden, train_dropout=0.0)
    for gate in ("z", "r", "o"):
        setattr(p, f"w_{gate}x", store.add(
            f"w_{gate}x", rng.uniform(-scale, scale, size=(hidden, in_ch, 3, 3))))
        setattr(p, f"w_{gate}h", store.add(
            f"w_{gate}h", rng.uniform(-scale, scale, size=(hidden, hidden, 3, 3))))
        setattr(p, f"b_{gate}", store.add(
            f"b_{gate}", rng.uniform(-scale, scale, size=(1, hidden, 1, 1))))
    return store, p


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_convlstm_k3_unrolled(seed):
    rng = np.random.default_rng(2000 + seed)
    store, p = rand_lstm_params(rng, 2, 2)
    feats = [Tensor4(rng.uniform(-0.5, 0.5, size=(1, 2, 2, 2)), requires_grad=True)
             for _ in range(3)]

    def build(tape):
        return T.sum_all(L.strnn_run(feats, "convlstm", [p], tape), tape)

    assert T.grad_check(build, feats + store.tensors()) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_convgru_k3_unrolled(seed):
    rng = np.random.default_rng(2100 + seed)
    store, p = rand_gru_params(rng, 2, 2)
    feats = [Tensor4(rng.uniform(-0.5, 0.5, size=(1, 2, 2, 2)), requires_grad=True)
             for _ in range(3)]

    def build(tape):
        return T.sum_all(L.strnn_run(feats, "convgru", [p], tape), tape)

    assert T.grad_check(build, feats + store.tensors()) < 1e-5


def test_grad_check_two_layer_stack():
    rng = np.random.default_rng(2200)
    store1, p1 = rand_lstm_params(rng, 1, 2, scale=0.2)
    store2, p2 = rand_lstm_params(rng, 2, 2, scale=0.2)
    feats = [Tensor4(rng.uniform(-0.5, 0.5, size=(1, 1, 2, 2)), requires_grad=True)
             for _ in range(3)]

    def build(tape):
        return T.sum_all(L.strnn_run(feats, "convlstm", [p1, p2], tape), tape)

    assert T.grad_check(build, feats + store1.tensors() + store2.tensors()) < 1e-5


# ---------------------------------------------------------------------------
# runner semantics


def test_strnn_empty_sequence_is_usage_error():
    store = ParamStore()
    p = L.init_convlstm_params(store, "c", np.random.default_rng(0), 2, 2)
    with pytest.raises(UsageError):
        L.strnn_run([], "convlstm", [p])


def test_strnn_single_gru_layer_zero_params_gives_zero():
    q = {k: 0.0 for k in GRU_KEYS}
    _, p = build_scalar_gru_params(q)
    out = L.strnn_run([Tensor4(np.full((1, 1, 1, 1), 0.9))], "convgru", [p])
    assert out.item() == 0.0


def test_strnn_preserves_bottleneck_dims():
    rng = np.random.default_rng(46)
    store = ParamStore()
    p1 = L.init_convlstm_params(store, "l1", rng, 8, 8)
    p2 = L.init_convlstm_params(store, "l2", rng, 8, 8)
    feats = [Tensor4(rng.normal(size=(2, 8, 4, 8)).astype(np.float32)) for _ in range(5)]
    out = L.strnn_run(feats, "convlstm", [p1, p2])
    assert out.dims == (2, 8, 4, 8)


def test_strnn_constant_input_saturated_gates_independent_of_k():
    # LSTM: saturated forget keeps c at zero, closed input gate admits nothing
    q = {k: 0.0 for k in LSTM_KEYS}
    q["bf"], q["bi"] = 20.0, -20.0
    _, p = build_scalar_lstm_params(q)
    frame = Tensor4(np.full((1, 1, 1, 1), 0.8))
    outs = [L.strnn_run([frame] * k, "convlstm", [p]).item() for k in (1, 2, 5)]
    assert max(outs) - min(outs) < 1e-9

    # GRU: saturated update gate with no state feedback reproduces tanh(wox*x+bo)
    qg = {k: 0.0 for k in GRU_KEYS}
    qg["bz"], qg["wox"], qg["bo"] = 20.0, 0.7, 0.1
    _, pg = build_scalar_gru_params(qg)
    outs = [L.strnn_run([frame] * k, "convgru", [pg]).item() for k in (1, 2, 5)]
    assert max(outs) - min(outs) < 1e-7


def test_strnn_batch_permutation_invariance():
    rng = np.random.default_rng(47)
    store = ParamStore()
    p = L.init_convgru_params(store, "c", rng, 3, 3, train_dropout=0.0)
    feats = [rng.normal(size=(4, 3, 3, 3)).astype(np.float32) for _ in range(4)]
    perm = np.array([2, 0, 3, 1])
    out = L.strnn_run([Tensor4(f) for f in feats], "convgru", [p])
    out_perm = L.strnn_run([Tensor4(f[perm]) for f in feats], "convgru", [p])
    np.testing.assert_allclose(out_perm.data, out.data[perm], rtol=1e-6, atol=1e-7)


def test_gru_dropout_only_in_training_mode():
    rng = np.random.default_rng(48)
    store = ParamStore()
    p = L.init_convgru_params(store, "c", rng, 2, 2)  # dropout 0.5
    x = Tensor4(rng.normal(size=(1, 2, 3, 3)).astype(np.float32))
    state = L.zero_state(1, 2, 3, 3, with_cell=False)
    eval_a = L.convgru_step(x, state, p)
    eval_b = L.convgru_step(x, state, p)
    np.testing.assert_array_equal(eval_a.h.data, eval_b.h.data)
    with pytest.raises(UsageError):
        L.convgru_step(x, state, p, training=True)  # rng required
    tr = L.convgru_step(x, state, p, training=True, rng=np.random.default_rng(0))
    assert not np.array_equal(tr.h.data, eval_a.h.data)
