"""Declarative model construction for the sequence-to-one lane detector.

A ModelConfig names one variant: backbone (segnet / unet / unetlight), SCNN
placement, recurrent cell type and depth, frame count K, geometry and width
scale. From it a single layer plan is derived that drives three consumers:
the runnable Model (parameters + forward), the analytic complexity counters
(count_params / count_macs), and the shape audit trace.

The encoder runs once per input frame with shared weights; the K bottleneck
feature maps feed the recurrent block; the decoder runs once on its final
hidden state. Skip tensors (unet) and pooling indices (segnet) are taken from
the last frame's encoder pass, the frame being predicted.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import ConvSpec, ParamStore, Tape, Tensor4

BACKBONES = ("segnet", "unet", "unetlight")
SCNN_LOCATIONS = ("none", "input", "after_first_block")
RNN_TYPES = ("convlstm", "convgru", "none")

IN_CHANNELS = 3
OUT_CHANNELS = 2
SCNN_KERNEL = 9


@dataclass
class ModelConfig:
    backbone: str = "unet"
    scnn_location: str = "after_first_block"
    rnn: str = "convlstm"
    rnn_layers: int = 2
    k_frames: int = 5
    input_hw: tuple[int, int] = (128, 256)
    width_scale: Fraction = Fraction(1)
    hidden_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.scnn_location not in SCNN_LOCATIONS:
            raise ConfigError(f"unknown scnn_location {self.scnn_location!r}")
        if self.rnn not in RNN_TYPES:
            raise ConfigError(f"unknown rnn {self.rnn!r}")
        if self.rnn_layers not in (1, 2):
            raise ConfigError("rnn_layers must be 1 or 2")
        self.width_scale = Fraction(self.width_scale)
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if self.rnn == "none":
            self.k_frames = 1  # single-frame baseline
        if self.k_frames < 1:
            raise ConfigError("k_frames must be >= 1")
        self.input_hw = (int(self.input_hw[0]), int(self.input_hw[1]))
        h, w = self.input_hw
        depth = 32 if self.backbone == "segnet" else 16
        if h % depth or w % depth:
            raise ConfigError(
                f"input {h}x{w} must be divisible by {depth} for backbone {self.backbone}")
        derived = self.scaled(512 if self.backbone != "unetlight" else 256)
        if self.hidden_dim is None:
            self.hidden_dim = derived
        elif self.hidden_dim != derived:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must equal the scaled encoder "
                f"output width {derived}")

    def scaled(self, ch: int) -> int:
        v = ch * self.width_scale
        if v.denominator != 1 or v < 1:
            raise ConfigError(
                f"width_scale {self.width_scale} makes {ch} channels non-integral")
        return int(v)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "scnn_location": self.scnn_location,
            "rnn": self.rnn,
            "rnn_layers": self.rnn_layers,
            "k_frames": self.k_frames,
            "input_h": self.input_hw[0],
            "input_w": self.input_hw[1],
            "width_scale": str(self.width_scale),
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        try:
            h = int(d.pop("input_h"))
            w = int(d.pop("input_w"))
        except KeyError as e:
            raise ConfigError(f"model config missing key {e}")
        allowed = {"backbone", "scnn_location", "rnn", "rnn_layers", "k_frames",
                   "width_scale", "hidden_dim", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d["width_scale"] = Fraction(str(d.get("width_scale", "1")))
        for key in ("rnn_layers", "k_frames", "seed"):
            if key in d:
                d[key] = int(d[key])
        if d.get("hidden_dim") is not None:
            d["hidden_dim"] = int(d["hidden_dim"])
        return cls(input_hw=(h, w), **d)


def desk_config(**overrides) -> ModelConfig:
    """Desk-scale preset: the full architecture at 1/8 width on 32x64 frames,
    small enough to train on a laptop CPU in minutes."""
    kw = dict(backbone="unet", scnn_location="after_first_block", rnn="convlstm",
              rnn_layers=2, k_frames=5, input_hw=(32, 64), width_scale=Fraction(1, 8))
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# layer plan


@dataclass(frozen=True)
class PlanRow:
    name: str
    kind: str  # conv | pool | unpool | upsample | scnn | concat
    in_c: int
    in_h: int
    in_w: int
    out_c: int
    out_h: int
    out_w: int
    kernel: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None
    stride: int = 1
    activation: str = ""
    ref: str = ""  # pool row for unpool, skip source row for concat


@dataclass(frozen=True)
class RnnPlan:
    cell_type: str
    layers: int
    channels: int
    h: int
    w: int
    k: int


@dataclass(frozen=True)
class Plan:
    encoder: tuple[PlanRow, ...]
    rnn: RnnPlan | None
    decoder: tuple[PlanRow, ...]


def _conv(name, in_c, c, h, w, act="relu", kernel=(3, 3)) -> PlanRow:
    pad = (kernel[0] // 2, kernel[1] // 2)
    return PlanRow(name, "conv", in_c, h, w, c, h, w, kernel, pad, 1, act)


def _pool(name, c, h, w) -> PlanRow:
    return PlanRow(name, "pool", c, h, w, c, h // 2, w // 2, (2, 2), (0, 0), 2)


def _scnn(c, h, w) -> PlanRow:
    return PlanRow("SCNN", "scnn", c, h, w, c, h, w, kernel=(1, SCNN_KERNEL))


def build_plan(config: ModelConfig) -> Plan:
    s = config.scaled
    h, w = config.input_hw
    enc: list[PlanRow] = []

    if config.scnn_location == "input":
        enc.append(_scnn(IN_CHANNELS, h, w))

    if config.backbone == "segnet":
        stages = [s(c) for c in (64, 128, 256, 512, 512)]
        convs_per = (2, 2, 3, 3, 3)
        c_prev = IN_CHANNELS
        for i, (c, reps) in enumerate(zip(stages, convs_per), start=1):
            for j in range(1, reps + 1):
                enc.append(_conv(f"Conv_{i}_{j}", c_prev, c, h, w))
                c_prev = c
            enc.append(_pool(f"Maxpool{i}", c, h, w))
            h, w = h // 2, w // 2
            if i == 1 and config.scnn_location == "after_first_block":
                enc.append(_scnn(c, h, w))
    else:
        light = config.backbone == "unetlight"
        base = (32, 64, 128, 256, 256) if light else (64, 128, 256, 512, 512)
        stages = [s(c) for c in base]
        enc.append(_conv("In_Conv_1", IN_CHANNELS, stages[0], h, w))
        enc.append(_conv("In_Conv_2", stages[0], stages[0], h, w))
        if config.scnn_location == "after_first_block":
            enc.append(_scnn(stages[0], h, w))
        c_prev = stages[0]
        for i, c in enumerate(stages[1:], start=1):
            enc.append(_pool(f"Maxpool{i}", c_prev, h, w))
            h, w = h // 2, w // 2
            enc.append(_conv(f"Conv_{i}_1", c_prev, c, h, w))
            enc.append(_conv(f"Conv_{i}_2", c, c, h, w))
            c_prev = c

    rnn_c = stages[-1]
    rnn = None
    if config.rnn != "none":
        rnn = RnnPlan(config.rnn, config.rnn_layers, rnn_c, h, w, config.k_frames)

    dec: list[PlanRow] = []
    c_prev = rnn_c
    if config.backbone == "segnet":
        # conv-out ladder per up block, mirroring the encoder in reverse
        c_seq = [
            (stages[4], stages[4], stages[4]),
            (stages[4], stages[4], stages[2]),
            (stages[2], stages[2], stages[1]),
            (stages[1], stages[0]),
            (stages[0], OUT_CHANNELS),
        ]
        for bi, outs in enumerate(c_seq):
            dec.append(PlanRow(f"MaxUnpool{bi + 1}", "unpool", c_prev, h, w,
                               c_prev, h * 2, w * 2, (2, 2), (0, 0), 2,
                               ref=f"Maxpool{5 - bi}"))
            h, w = h * 2, w * 2
            up_block = 5 - bi
            for j, c in enumerate(outs, start=1):
                act = "logsoftmax" if (bi == 4 and j == len(outs)) else "relu"
                dec.append(_conv(f"Up_Conv_{up_block}_{j}", c_prev, c, h, w, act))
                c_prev = c
    else:
        # skip source for up block N = the row feeding MaxpoolN
        skip_src = {}
        skip_ch = {}
        for i, row in enumerate(enc):
            if row.kind == "pool":
                n = int(row.name.removeprefix("Maxpool"))
                skip_src[n] = enc[i - 1].name
                skip_ch[n] = row.in_c
        up_outs = {4: stages[2], 3: stages[1], 2: stages[0], 1: stages[0]}
        for idx, ub in enumerate((4, 3, 2, 1), start=1):
            dec.append(PlanRow(f"UpsamplingBilinear2D_{idx}", "upsample", c_prev, h, w,
                               c_prev, h * 2, w * 2, (2, 2), (0, 0), 2))
            h, w = h * 2, w * 2
            dec.append(PlanRow(f"Concat_{ub}", "concat", c_prev, h, w,
                               c_prev + skip_ch[ub], h, w, ref=skip_src[ub]))
            c_prev = c_prev + skip_ch[ub]
            c1 = up_outs[ub]
            dec.append(_conv(f"Up_Conv_{ub}_1", c_prev, c1, h, w))
            dec.append(_conv(f"Up_Conv_{ub}_2", c1, c1, h, w))
            c_prev = c1
        dec.append(_conv("Out_Conv", c_prev, OUT_CHANNELS, h, w, act="", kernel=(1, 1)))

    return Plan(tuple(enc), rnn, tuple(dec))


# ---------------------------------------------------------------------------
# runnable model


class Model:
    """Parameters plus the forward pass for one configured variant."""

    def __init__(self, config: ModelConfig, params: ParamStore, plan: Plan,
                 conv_layers: dict, scnn_params, rnn_params: list):
        self.config = config
        self.params = params
        self.plan = plan
        self._convs = conv_layers        # row name -> (weight, bias, ConvSpec)
        self._scnn = scnn_params
        self._rnn = rnn_params

    # -- execution ---------------------------------------------------------

    def _run_conv(self, row: PlanRow, x: Tensor4, tape) -> Tensor4:
        w, b, spec = self._convs[row.name]
        y = T.conv2d(x, w, b, spec, tape)
        if row.activation == "relu":
            y = T.relu(y, tape)
        elif row.activation == "logsoftmax":
            y = T.log_softmax_channels(y, tape)
        return y

    def encode_frame(self, x: Tensor4, tape=None):
        """Run the shared encoder on one frame; returns the bottleneck features
        and every named intermediate (skip tensors and pooling index maps)."""
        saved: dict[str, object] = {}
        for row in self.plan.encoder:
            if row.kind == "conv":
                x = self._run_conv(row, x, tape)
            elif row.kind == "pool":
                x, idx = T.maxpool2x2(x, tape)
                saved[row.name] = idx
            elif row.kind == "scnn":
                x = L.scnn_block(x, self._scnn, tape)
            else:
                raise ConfigError(f"unexpected encoder row kind {row.kind}")
            if row.kind != "pool":
                saved[row.name] = x
        return x, saved

    def decode(self, x: Tensor4, saved: dict, tape=None,
               record: dict | None = None) -> Tensor4:
        for row in self.plan.decoder:
            if row.kind == "conv":
                x = self._run_conv(row, x, tape)
            elif row.kind == "unpool":
                x = T.maxunpool2x2(x, saved[row.ref], (row.out_h, row.out_w), tape)
            elif row.kind == "upsample":
                x = T.bilinear_upsample2x(x, tape)
            elif row.kind == "concat":
                x = T.concat_channels(x, saved[row.ref], tape)
            else:
                raise ConfigError(f"unexpected decoder row kind {row.kind}")
            if record is not None:
                record[row.name] = x.dims
        if self.config.backbone != "segnet":
            # the 1x1 head emits raw scores; normalize so both backbones share
            # one log-probability output contract
            x = T.log_softmax_channels(x, tape)
        return x

    def forward(self, frames: list[Tensor4], tape: Tape | None = None,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor4:
        cfg = self.config
        if len(frames) != cfg.k_frames:
            raise UsageError(f"expected {cfg.k_frames} frames, got {len(frames)}")
        h, w = cfg.input_hw
        for f in frames:
            if f.dims[1:] != (IN_CHANNELS, h, w):
                raise UsageError(
                    f"frame dims {f.dims} do not match configured {IN_CHANNELS}x{h}x{w}")

        feats = []
        saved_last = None
        for f in frames:
            feat, saved = self.encode_frame(f, tape)
            feats.append(feat)
            saved_last = saved
        if self.plan.rnn is not None:
            x = L.strnn_run(feats, self.plan.rnn.cell_type, self._rnn, tape,
                            training=training, rng=rng)
        else:
            x = feats[-1]
        return self.decode(x, saved_last, tape)

    # -- reporting ---------------------------------------------------------

    def shape_trace(self) -> list[tuple[str, str, str]]:
        return shape_trace(self.config)


def build_model(config: ModelConfig) -> Model:
    plan = build_plan(config)
    store = ParamStore()
    rng = np.random.default_rng(config.seed)
    convs: dict[str, tuple] = {}
    scnn_params = None
    rnn_params: list = []

    for row in plan.encoder + plan.decoder:
        if row.kind == "conv":
            kh, kw = row.kernel
            spec = ConvSpec(row.in_c, row.out_c, row.kernel, row.padding, row.stride)
            w = store.add(f"{row.name}/w",
                          L.uniform_init(rng, (row.out_c, row.in_c, kh, kw),
                                         row.in_c * kh * kw))
            b = store.add(f"{row.name}/b",
                          np.zeros((1, row.out_c, 1, 1), dtype=np.float32))
            convs[row.name] = (w, b, spec)
        elif row.kind == "scnn":
            scnn_params = L.init_scnn_params(store, "SCNN", rng, row.in_c, SCNN_KERNEL)

    rp = plan.rnn
    if rp is not None:
        for li in range(rp.layers):
            prefix = f"ST-RNN-L{li + 1}"
            if rp.cell_type == "convlstm":
                rnn_params.append(
                    L.init_convlstm_params(store, prefix, rng, rp.channels, rp.channels))
            else:
                rnn_params.append(
                    L.init_convgru_params(store, prefix, rng, rp.channels, rp.channels))

    return Model(config, store, plan, convs, scnn_params, rnn_params)


# ---------------------------------------------------------------------------
# analytic complexity


def count_params(config: ModelConfig) -> int:
    """Exact learnable-parameter count; equals the built model's store total."""
    plan = build_plan(config)
    total = 0
    for row in plan.encoder + plan.decoder:
        if row.kind == "conv":
            kh, kw = row.kernel
            total += row.out_c * row.in_c * kh * kw + row.out_c
        elif row.kind == "scnn":
            c = row.in_c
            total += 4 * (c * c * SCNN_KERNEL + c)
    rp = plan.rnn
    if rp is not None:
        c = rp.channels
        gate_conv = c * c * 9
        if rp.cell_type == "convlstm":
            per_layer = 8 * gate_conv + 4 * c + 3 * c  # convs, biases, peepholes
        else:
            per_layer = 6 * gate_conv + 3 * c
        total += rp.layers * per_layer
    return total


def count_macs(config: ModelConfig, input_hw: tuple[int, int] | None = None) -> int:
    """Multiply-accumulate count for one sequence-to-one forward pass.

    Convention (chosen to reproduce the published complexity figures for the
    UNet family, documented in the README): each of the K frames runs through
    the encoder (including any SCNN block), the recurrent gates are counted
    per time step per layer, and the decoder runs once. One MAC = one
    multiply-accumulate; pooling, unpooling, upsampling, activations and bias
    adds are not counted.
    """
    if input_hw is not None and tuple(input_hw) != config.input_hw:
        config = _with_input(config, tuple(input_hw))
    plan = build_plan(config)
    k = config.k_frames
    total = 0
    for row in plan.encoder:
        total += k * _row_macs(row)
    for row in plan.decoder:
        total += _row_macs(row)
    rp = plan.rnn
    if rp is not None:
        c = rp.channels
        per_gate_conv = c * rp.h * rp.w * c * 9
        n_convs = 8 if rp.cell_type == "convlstm" else 6
        total += rp.layers * rp.k * n_convs * per_gate_conv
    return total


def _with_input(config: ModelConfig, input_hw) -> ModelConfig:
    d = config.to_dict()
    d["input_h"], d["input_w"] = input_hw
    return ModelConfig.from_dict(d)


def _row_macs(row: PlanRow) -> int:
    if row.kind == "conv":
        kh, kw = row.kernel
        return row.out_c * row.out_h * row.out_w * row.in_c * kh * kw
    if row.kind == "scnn":
        c, h, w = row.in_c, row.in_h, row.in_w
        vertical = 2 * (h - 1) * (c * w) * (c * SCNN_KERNEL)
        horizontal = 2 * (w - 1) * (c * h) * (c * SCNN_KERNEL)
        return vertical + horizontal
    return 0


# ---------------------------------------------------------------------------
# shape audit trace


def _chw(c, h, w):
    return f"{c}x{h}x{w}"


def shape_trace(config: ModelConfig) -> list[tuple[str, str, str]]:
    """(layer name, input CxHxW, output CxHxW) rows, analytically derived.
    SCNN rows report single-slice dims; the recurrent block reports one row
    per layer with its own input dims."""
    plan = build_plan(config)
    rows = []

    def emit(row: PlanRow):
        if row.kind == "scnn":
            c, h, w = row.in_c, row.in_h, row.in_w
            rows.append(("SCNN_Down", _chw(c, 1, w), _chw(c, 1, w)))
            rows.append(("SCNN_Up", _chw(c, 1, w), _chw(c, 1, w)))
            rows.append(("SCNN_Right", _chw(c, h, 1), _chw(c, h, 1)))
            rows.append(("SCNN_Left", _chw(c, h, 1), _chw(c, h, 1)))
        elif row.kind == "concat":
            return  # folded into the following conv's input dims
        else:
            rows.append((row.name, _chw(row.in_c, row.in_h, row.in_w),
                         _chw(row.out_c, row.out_h, row.out_w)))

    for row in plan.encoder:
        emit(row)
    rp = plan.rnn
    if rp is not None:
        cell = "ConvLSTMCell" if rp.cell_type == "convlstm" else "ConvGRUCell"
        for li in range(rp.layers):
            rows.append((f"ST-RNN Layer{li + 1}",
                         f"{rp.k} * {cell}(input=({_chw(rp.channels, rp.h, rp.w)}))",
                         _chw(rp.channels, rp.h, rp.w)))
    for row in plan.decoder:
        emit(row)
    return rows


# ---------------------------------------------------------------------------
# named full-size variants


def _variant(backbone, scnn, rnn, layers) -> ModelConfig:
    return ModelConfig(backbone=backbone, scnn_location=scnn, rnn=rnn,
                       rnn_layers=layers, k_frames=5, input_hw=(128, 256))


VARIANTS: dict[str, ModelConfig] = {
    "U-Net": _variant("unet", "none", "none", 2),
    "SegNet": _variant("segnet", "none", "none", 2),
    "UNet_ConvLSTM": _variant("unet", "none", "convlstm", 2),
    "SegNet_ConvLSTM": _variant("segnet", "none", "convlstm", 2),
    "SCNN_SegNet_ConvGRU1": _variant("segnet", "after_first_block", "convgru", 1),
    "SCNN_SegNet_ConvGRU2": _variant("segnet", "after_first_block", "convgru", 2),
    "SCNN_SegNet_ConvLSTM1": _variant("segnet", "after_first_block", "convlstm", 1),
    "SCNN_SegNet_ConvLSTM2": _variant("segnet", "after_first_block", "convlstm", 2),
    "SCNN_UNet_ConvGRU1": _variant("unet", "after_first_block", "convgru", 1),
    "SCNN_UNet_ConvGRU2": _variant("unet", "after_first_block", "convgru", 2),
    "SCNN_UNet_ConvLSTM1": _variant("unet", "after_first_block", "convlstm", 1),
    "SCNN_UNet_ConvLSTM2": _variant("unet", "after_first_block", "convlstm", 2),
    "SCNN_UNetLight_ConvGRU1": _variant("unetlight", "after_first_block", "convgru", 1),
    "SCNN_UNetLight_ConvGRU2": _variant("unetlight", "after_first_block", "convgru", 2),
    "SCNN_UNetLight_ConvLSTM1": _variant("unetlight", "after_first_block", "convlstm", 1),
    "SCNN_UNetLight_ConvLSTM2": _variant("unetlight", "after_first_block", "convlstm", 2),
}
