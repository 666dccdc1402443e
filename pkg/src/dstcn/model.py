"""Dual-scale multi-stage TCN: stage 1 labels per-repetition (micro) classes from
raw IMU, later stages label and refine whole-exercise (macro) classes from the
previous stage's probabilities. Also covers the no-micro ablation (all stages
macro) and the two-micro-stage variant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx

MODES = ("dual_scale", "ablation_no_micro", "dual_scale_two_micro")

CHECKPOINT_MAGIC = b"DSTCNCK1"
CHECKPOINT_VERSION = 1


def receptive_field(num_layers):
    """Window of input samples influencing one output sample of a stage."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    return 2 ** (num_layers + 1) - 1


@dataclass(frozen=True)
class StageConfig:
    scale: str  # "micro" | "macro"
    in_channels: int
    out_classes: int
    num_layers: int = 9
    num_filters: int = 64


@dataclass(frozen=True)
class ModelConfig:
    micro_classes: tuple
    macro_classes: tuple
    mode: str = "dual_scale"
    num_layers: int = 9
    num_filters: int = 64
    in_channels: int = 6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    def stages(self):
        n_micro = len(self.micro_classes)
        n_macro = len(self.macro_classes)
        mk = lambda scale, cin, cout: StageConfig(
            scale, cin, cout, self.num_layers, self.num_filters
        )
        if self.mode == "dual_scale":
            scales = ["micro", "macro", "macro", "macro"]
        elif self.mode == "ablation_no_micro":
            scales = ["macro", "macro", "macro", "macro"]
        else:
            scales = ["micro", "micro", "macro", "macro", "macro"]
        stages = []
        cin = self.in_channels
        for scale in scales:
            cout = n_micro if scale == "micro" else n_macro
            stages.append(mk(scale, cin, cout))
            cin = cout
        return stages

    def to_meta(self):
        return {
            "mode": self.mode,
            "micro_classes": list(self.micro_classes),
            "macro_classes": list(self.macro_classes),
            "num_layers": self.num_layers,
            "num_filters": self.num_filters,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            micro_classes=tuple(meta["micro_classes"]),
            macro_classes=tuple(meta["macro_classes"]),
            mode=meta["mode"],
            num_layers=int(meta["num_layers"]),
            num_filters=int(meta["num_filters"]),
            in_channels=int(meta["in_channels"]),
        )


def parameter_shapes(config):
    """Name -> shape for every learnable array, a pure function of the config."""
    shapes = {}
    for s, stage in enumerate(config.stages(), start=1):
        d = stage.num_filters
        p = f"stage{s}"
        shapes[f"{p}/in_proj/weight"] = (d, stage.in_channels)
        shapes[f"{p}/in_proj/bias"] = (d,)
        for l in range(stage.num_layers):
            shapes[f"{p}/block{l}/dilated/weight"] = (d, d, 3)
            shapes[f"{p}/block{l}/dilated/bias"] = (d,)
            shapes[f"{p}/block{l}/pointwise/weight"] = (d, d)
            shapes[f"{p}/block{l}/pointwise/bias"] = (d,)
        shapes[f"{p}/head/weight"] = (stage.out_classes, d)
        shapes[f"{p}/head/bias"] = (stage.out_classes,)
    return shapes


def count_parameters(config):
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


def init_parameters(config, seed):
    """Uniform +-1/sqrt(fan_in) init per layer (weights and biases), seeded."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("/weight"):
            fan_in = shape[1] * (shape[2] if len(shape) == 3 else 1)
            bound = 1.0 / np.sqrt(fan_in)
        else:
            weight_shape = parameter_shapes(config)[name[: -len("/bias")] + "/weight"]
            fan_in = weight_shape[1] * (weight_shape[2] if len(weight_shape) == 3 else 1)
            bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def residual_block(tape, x, w_dilated, b_dilated, w_pointwise, b_pointwise, dilation, seg_len=None):
    """x + conv1x1(relu(dilated_conv1d(x, dilation)))."""
    return nx.residual_unit(tape, x, w_dilated, b_dilated, w_pointwise, b_pointwise, dilation, seg_len)


def _stage_param(params, name):
    return nx.Param(name, params[name])


def sstcn_forward(tape, x, params, stage, prefix, seg_len=None):
    """One single-stage TCN: 1x1 in-projection, dilated residual blocks with
    dilations 1, 2, 4, ..., a 1x1 head, and a channel softmax."""
    if x.value.shape[0] != stage.in_channels:
        raise ValueError(
            f"{prefix}: input has {x.value.shape[0]} channels, config expects {stage.in_channels}"
        )
    P = lambda suffix: _stage_param(params, f"{prefix}/{suffix}")
    h = nx.conv1x1(tape, x, P("in_proj/weight"), P("in_proj/bias"))
    for l in range(stage.num_layers):
        h = residual_block(
            tape,
            h,
            P(f"block{l}/dilated/weight"),
            P(f"block{l}/dilated/bias"),
            P(f"block{l}/pointwise/weight"),
            P(f"block{l}/pointwise/bias"),
            2 ** l,
            seg_len,
        )
    logits = nx.conv1x1(tape, h, P("head/weight"), P("head/bias"))
    return nx.softmax_channels(tape, logits)


@dataclass
class ForwardResult:
    """Per-stage probability outputs, in stage order."""

    scales: list
    probs: list  # list of Node, each (classes, time)

    @property
    def final(self):
        return self.probs[-1]

    def by_scale(self, scale):
        return [p for sc, p in zip(self.scales, self.probs) if sc == scale]


def forward(tape, imu, config, params, seg_len=None):
    """Run all stages; stage 1 consumes the IMU signal, each later stage the
    previous stage's probabilities."""
    x = imu if isinstance(imu, nx.Node) else nx.Node(nx.as_sequence(imu, "imu"))
    if x.value.shape[0] != config.in_channels:
        raise ValueError(
            f"imu input has {x.value.shape[0]} channels, model expects {config.in_channels}"
        )
    scales, probs = [], []
    h = x
    for s, stage in enumerate(config.stages(), start=1):
        h = sstcn_forward(tape, h, params, stage, f"stage{s}", seg_len)
        scales.append(stage.scale)
        probs.append(h)
    return ForwardResult(scales, probs)


def predict_labels(probs):
    """Per-sample argmax decode; ties resolve to the lowest class id (0 = others)."""
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise ValueError(f"expected (classes, time) probabilities, got ndim={probs.ndim}")
    return np.argmax(probs, axis=0)


def save_checkpoint(path, arrays, meta):
    """Binary checkpoint: magic, version, JSON meta block, then per named array
    its name, shape and row-major float64 little-endian payload."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            value = np.ascontiguousarray(arrays[name], dtype="<f8")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(value.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            arrays[name] = data.reshape(shape)
    return arrays, meta


def load_model_checkpoint(path, expected_config=None):
    """Load parameters + config from a checkpoint; reject shape/config mismatches."""
    arrays, meta = load_checkpoint(path)
    config = ModelConfig.from_meta(meta["model"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"{path}: checkpoint model config {config.to_meta()} does not match "
            f"expected {expected_config.to_meta()}"
        )
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name not in arrays:
            raise ValueError(f"{path}: checkpoint is missing parameter {name}")
        if arrays[name].shape != shape:
            raise ValueError(
                f"{path}: parameter {name} has shape {arrays[name].shape}, expected {shape}"
            )
        params[name] = arrays[name]
    extra = {k: v for k, v in arrays.items() if k not in params}
    return params, config, meta, extra
