"""Detector architecture: config, parameter store, forward/backward.

The network is a stack of plain 2-D convolutions and two residual block
kinds built around a frequency path and a temporal path:

* f2: depthwise 3x1 frequency convolution (frequency-padded, optional
  frequency stride) followed by sub-spectral norm.
* f1: frequency average pool -> depthwise 1x3 temporal convolution
  (dilated, never time-padded) -> batch norm -> swish -> 1x1 convolution
  -> channel dropout -> broadcast back across frequency.

A Broadcast block keeps its channel count and computes
    y = relu(trim(x) + trim(f2(x)) + f1(f2(x)))
while a Transition block changes it via a pointwise convolution first:
    v = relu(BN(pointwise(x))),  y = relu(trim(f2(v)) + f1(f2(v)))
where trim drops `dilation` frames from each end of the time axis so the
skip paths line up with the temporal convolution output.

No temporal convolution uses time padding, so one output frame depends on
exactly R input frames, R = 1 + sum(dilation * (kernel_t - 1)); feeding
T >= R frames yields T - R + 1 output frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, HeimdalError, InputTooShortError
from .ops import ConvSpec

WEIGHT_MAGIC = b"HMDL"
WEIGHT_VERSION = 1

KIND_CONV = "Conv"
KIND_TRANSITION = "Transition"
KIND_BROADCAST = "Broadcast"
KIND_HEAD = "Head"


@dataclass
class LayerSpec:
    kind: str
    out_channels: int | None = None
    repeat: int = 1
    freq_stride: int = 1
    time_dilation: int = 1
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None

    def validate(self, index: int) -> None:
        if self.kind not in (KIND_CONV, KIND_TRANSITION, KIND_BROADCAST,
                             KIND_HEAD):
            raise ConfigError(f"layer {index}: unknown kind {self.kind!r}")
        if self.repeat < 1:
            raise ConfigError(f"layer {index}: repeat must be >= 1")
        if self.time_dilation < 1:
            raise ConfigError(f"layer {index}: dilation must be >= 1")
        if self.kind == KIND_CONV:
            if self.out_channels is None or self.kernel is None:
                raise ConfigError(
                    f"layer {index}: Conv needs out_channels and kernel")
        elif self.kind == KIND_HEAD:
            if self.kernel is None:
                raise ConfigError(f"layer {index}: Head needs a kernel")
        elif self.out_channels is None:
            raise ConfigError(f"layer {index}: {self.kind} needs out_channels")


@dataclass
class ModelConfig:
    layers: list[LayerSpec]
    name: str = "unnamed"
    input_freq: int = 16
    ssn_groups: int = 2
    dropout: float = 0.1

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            layers = []
            for entry in d["layers"]:
                fields = dict(entry)
                for key in ("kernel", "stride", "padding"):
                    if fields.get(key) is not None:
                        fields[key] = tuple(fields[key])
                layers.append(LayerSpec(**fields))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        return ModelConfig(
            layers=layers,
            name=d.get("name", "unnamed"),
            input_freq=d.get("input_freq", 16),
            ssn_groups=d.get("ssn_groups", 2),
            dropout=d.get("dropout", 0.1),
        )

    def to_dict(self) -> dict:
        out = {"name": self.name, "input_freq": self.input_freq,
               "ssn_groups": self.ssn_groups, "dropout": self.dropout,
               "layers": []}
        for spec in self.layers:
            entry = {"kind": spec.kind}
            if spec.out_channels is not None:
                entry["out_channels"] = spec.out_channels
            if spec.repeat != 1:
                entry["repeat"] = spec.repeat
            if spec.freq_stride != 1:
                entry["freq_stride"] = spec.freq_stride
            if spec.time_dilation != 1:
                entry["time_dilation"] = spec.time_dilation
            for key in ("kernel", "stride", "padding"):
                value = getattr(spec, key)
                if value is not None:
                    entry[key] = list(value)
            out["layers"].append(entry)
        return out


# The shipped architecture: 16 mel-frequency bins in, receptive field 131
# frames, two outputs (detection logit and start offset) per frame.
CANONICAL_NAME = "heimdal-13k"

_PRESETS = {
    "heimdal-13k": {
        "name": "heimdal-13k",
        "input_freq": 16,
        "ssn_groups": 2,
        "dropout": 0.1,
        "layers": [
            {"kind": "Conv", "out_channels": 12, "kernel": [5, 5],
             "stride": [2, 1], "padding": [2, 0]},
            {"kind": "Transition", "out_channels": 16, "time_dilation": 1},
            {"kind": "Broadcast", "out_channels": 16, "time_dilation": 1},
            {"kind": "Transition", "out_channels": 16, "time_dilation": 2,
             "freq_stride": 2},
            {"kind": "Broadcast", "out_channels": 16, "time_dilation": 2},
            {"kind": "Transition", "out_channels": 32, "time_dilation": 4},
            {"kind": "Broadcast", "out_channels": 32, "time_dilation": 4,
             "repeat": 3},
            {"kind": "Transition", "out_channels": 16, "time_dilation": 8},
            {"kind": "Broadcast", "out_channels": 16, "time_dilation": 8,
             "repeat": 3},
            {"kind": "Transition", "out_channels": 16, "time_dilation": 4},
            {"kind": "Broadcast", "out_channels": 16, "time_dilation": 4},
            {"kind": "Conv", "out_channels": 16, "kernel": [3, 3]},
            {"kind": "Conv", "out_channels": 8, "kernel": [1, 1]},
            {"kind": "Head", "kernel": [2, 1]},
        ],
    },
    # Smaller receptive field (35 frames) for desk-scale training runs.
    "heimdal-mini": {
        "name": "heimdal-mini",
        "input_freq": 16,
        "ssn_groups": 2,
        "dropout": 0.1,
        "layers": [
            {"kind": "Conv", "out_channels": 8, "kernel": [5, 5],
             "stride": [2, 1], "padding": [2, 0]},
            {"kind": "Transition", "out_channels": 12, "time_dilation": 1},
            {"kind": "Broadcast", "out_channels": 12, "time_dilation": 1},
            {"kind": "Transition", "out_channels": 12, "time_dilation": 2,
             "freq_stride": 2},
            {"kind": "Broadcast", "out_channels": 12, "time_dilation": 2},
            {"kind": "Transition", "out_channels": 16, "time_dilation": 4},
            {"kind": "Broadcast", "out_channels": 16, "time_dilation": 4},
            {"kind": "Conv", "out_channels": 16, "kernel": [3, 3]},
            {"kind": "Conv", "out_channels": 8, "kernel": [1, 1]},
            {"kind": "Head", "kernel": [2, 1]},
        ],
    },
}


def preset_config(name: str) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(_PRESETS)}")
    return ModelConfig.from_dict(_PRESETS[name])


def load_config(path_or_preset: str) -> ModelConfig:
    """Load a model config from a JSON file, or by preset name."""
    if path_or_preset in _PRESETS:
        return preset_config(path_or_preset)
    try:
        with open(path_or_preset) as f:
            return ModelConfig.from_dict(json.load(f))
    except FileNotFoundError:
        raise ConfigError(
            f"{path_or_preset!r} is neither a preset name nor a config file")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path_or_preset}: invalid JSON ({exc})")


@dataclass
class ModelOutput:
    """Per-frame detection logits and start offsets, each [.., 1, 1, L']."""

    detection_logits: np.ndarray
    offsets: np.ndarray


# ---------------------------------------------------------------------------
# Parameter initialization helpers
# ---------------------------------------------------------------------------

INIT_KERNEL = "kernel"
INIT_ZERO = "zero"
INIT_ONE = "one"


def _init_tensor(rng, shape, kind):
    if kind == INIT_KERNEL:
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)
    if kind == INIT_ONE:
        return np.ones(shape, dtype=np.float32)
    return np.zeros(shape, dtype=np.float32)


def _norm_param_specs(prefix, n):
    return [
        (f"{prefix}.scale", (n,), INIT_ONE, True),
        (f"{prefix}.shift", (n,), INIT_ZERO, True),
        (f"{prefix}.running_mean", (n,), INIT_ZERO, False),
        (f"{prefix}.running_var", (n,), INIT_ONE, False),
    ]


class _Ring:
    """Fixed-capacity ring of columns for the streaming path."""

    def __init__(self, cap, shape, dtype=np.float32):
        self.cap = cap
        self.buf = np.zeros((cap,) + shape, dtype=dtype)
        self.count = 0
        self._head = 0

    def push(self, col):
        self.buf[self._head] = col
        self._head = (self._head + 1) % self.cap
        self.count += 1

    @property
    def full(self):
        return self.count >= self.cap

    def tap(self, ago):
        """Column pushed `ago` steps before the most recent push."""
        return self.buf[(self._head - 1 - ago) % self.cap]

    def reset(self):
        self.buf[:] = 0
        self.count = 0
        self._head = 0

    def capacity_values(self):
        return self.buf.size


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class _PlainConv:
    def __init__(self, prefix, in_channels, spec: LayerSpec):
        kf, kt = spec.kernel
        stride = spec.stride or (1, 1)
        padding = spec.padding or (0, 0)
        if padding[1] != 0:
            raise ConfigError(f"{prefix}: time padding is not allowed")
        self.prefix = prefix
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        self.spec = ConvSpec(kernel=(kf, kt), stride=stride,
                             dilation=(1, spec.time_dilation), padding=padding)

    def param_specs(self):
        kf, kt = self.spec.kernel
        return [
            (f"{self.prefix}.W",
             (self.out_channels, self.in_channels, kf, kt), INIT_KERNEL, True),
            (f"{self.prefix}.b", (self.out_channels,), INIT_ZERO, True),
        ]

    def out_cf(self, c, f):
        return self.out_channels, self.spec.out_extent(0, f)

    def time_receptive(self):
        return self.spec.dilation[1] * (self.spec.kernel[1] - 1)

    def forward(self, params, x, mode, rng):
        y = ops.conv2d_forward(x, params[f"{self.prefix}.W"],
                               params[f"{self.prefix}.b"], self.spec)
        return y, x

    def backward(self, params, cache, gy):
        gx, gw, gb = ops.conv2d_backward(gy, cache,
                                         params[f"{self.prefix}.W"], self.spec)
        return gx, {f"{self.prefix}.W": gw, f"{self.prefix}.b": gb}

    # --- streaming ---

    def stream_new(self, in_freq):
        kt = self.spec.kernel[1]
        span = self.spec.dilation[1] * (kt - 1) + 1
        if span == 1:
            return None
        return _Ring(span, (self.in_channels, in_freq))

    def stream_step(self, params, state, col):
        kt = self.spec.kernel[1]
        dt = self.spec.dilation[1]
        if state is None:
            window = col[:, :, None]
        else:
            state.push(col)
            if not state.full:
                return None
            window = np.stack(
                [state.tap((kt - 1 - j) * dt) for j in range(kt)], axis=2)
        dense = ConvSpec(kernel=self.spec.kernel, stride=self.spec.stride,
                         padding=self.spec.padding)
        y = ops.conv2d_forward(window, params[f"{self.prefix}.W"],
                               params[f"{self.prefix}.b"], dense)
        return y[:, :, 0]


class _F2:
    """Frequency depthwise conv + sub-spectral norm."""

    def __init__(self, prefix, channels, freq_stride, ssn_groups):
        self.prefix = prefix
        self.channels = channels
        self.ssn_groups = ssn_groups
        self.spec = ConvSpec(kernel=(3, 1), stride=(freq_stride, 1),
                             padding=(1, 0), groups=channels)

    def param_specs(self):
        c = self.channels
        specs = [
            (f"{self.prefix}.f2.W", (c, 1, 3, 1), INIT_KERNEL, True),
            (f"{self.prefix}.f2.b", (c,), INIT_ZERO, True),
        ]
        specs += _norm_param_specs(f"{self.prefix}.ssn", c * self.ssn_groups)
        return specs

    def forward(self, params, x, mode):
        c1 = ops.conv2d_forward(x, params[f"{self.prefix}.f2.W"],
                                params[f"{self.prefix}.f2.b"], self.spec)
        y, ssn_cache = ops.subspectral_forward(
            c1, params[f"{self.prefix}.ssn.scale"],
            params[f"{self.prefix}.ssn.shift"],
            params[f"{self.prefix}.ssn.running_mean"],
            params[f"{self.prefix}.ssn.running_var"],
            self.ssn_groups, mode)
        return y, (x, ssn_cache)

    def backward(self, params, cache, gy):
        x, ssn_cache = cache
        g1, gscale, gshift = ops.subspectral_backward(gy, ssn_cache)
        gx, gw, gb = ops.conv2d_backward(g1, x, params[f"{self.prefix}.f2.W"],
                                         self.spec)
        return gx, {
            f"{self.prefix}.f2.W": gw,
            f"{self.prefix}.f2.b": gb,
            f"{self.prefix}.ssn.scale": gscale,
            f"{self.prefix}.ssn.shift": gshift,
        }

    def column(self, params, col):
        """Streaming path: one [C, F] column in, one [C, F'] column out."""
        y, _ = self.forward(params, col[:, :, None], "infer")
        return y[:, :, 0]


class _F1:
    """Temporal path: pool -> dilated depthwise 1x3 -> BN -> swish -> 1x1
    -> channel dropout. Output has frequency extent 1."""

    def __init__(self, prefix, channels, dilation, dropout):
        self.prefix = prefix
        self.channels = channels
        self.dilation = dilation
        self.dropout = dropout
        self.tspec = ConvSpec(kernel=(1, 3), dilation=(1, dilation),
                              groups=channels)
        self.pwspec = ConvSpec(kernel=(1, 1))

    def param_specs(self):
        c = self.channels
        specs = [
            (f"{self.prefix}.f1.tconv.W", (c, 1, 1, 3), INIT_KERNEL, True),
            (f"{self.prefix}.f1.tconv.b", (c,), INIT_ZERO, True),
        ]
        specs += _norm_param_specs(f"{self.prefix}.f1.bn", c)
        specs += [
            (f"{self.prefix}.f1.pw.W", (c, c, 1, 1), INIT_KERNEL, True),
            (f"{self.prefix}.f1.pw.b", (c,), INIT_ZERO, True),
        ]
        return specs

    def forward(self, params, x, mode, rng):
        p = self.prefix
        u0, pool_cache = ops.freq_avgpool_forward(x)
        u1 = ops.conv2d_forward(u0, params[f"{p}.f1.tconv.W"],
                                params[f"{p}.f1.tconv.b"], self.tspec)
        u2, bn_cache = ops.batchnorm_forward(
            u1, params[f"{p}.f1.bn.scale"], params[f"{p}.f1.bn.shift"],
            params[f"{p}.f1.bn.running_mean"], params[f"{p}.f1.bn.running_var"],
            mode)
        u3, swish_cache = ops.swish_forward(u2)
        u4 = ops.conv2d_forward(u3, params[f"{p}.f1.pw.W"],
                                params[f"{p}.f1.pw.b"], self.pwspec)
        u5, drop_cache = ops.channel_dropout_forward(u4, self.dropout, mode,
                                                     rng)
        cache = (pool_cache, u0, bn_cache, swish_cache, u3, drop_cache, mode)
        return u5, cache

    def backward(self, params, cache, gy):
        p = self.prefix
        pool_cache, u0, bn_cache, swish_cache, u3, drop_cache, mode = cache
        if mode != "train":
            raise HeimdalError("backward requires a train-mode cache")
        g4 = ops.channel_dropout_backward(gy, drop_cache)
        g3, gpw_w, gpw_b = ops.conv2d_backward(g4, u3,
                                               params[f"{p}.f1.pw.W"],
                                               self.pwspec)
        g2 = ops.swish_backward(g3, swish_cache)
        g1, gscale, gshift = ops.batchnorm_backward(g2, bn_cache)
        g0, gt_w, gt_b = ops.conv2d_backward(g1, u0,
                                             params[f"{p}.f1.tconv.W"],
                                             self.tspec)
        gx = ops.freq_avgpool_backward(g0, pool_cache)
        return gx, {
            f"{p}.f1.tconv.W": gt_w,
            f"{p}.f1.tconv.b": gt_b,
            f"{p}.f1.bn.scale": gscale,
            f"{p}.f1.bn.shift": gshift,
            f"{p}.f1.pw.W": gpw_w,
            f"{p}.f1.pw.b": gpw_b,
        }

    def column(self, params, pooled_ring):
        """Streaming path: gather the three dilated taps of pooled history
        and produce the [C] temporal-path column."""
        p = self.prefix
        d = self.dilation
        window = np.stack([pooled_ring.tap((2 - j) * d) for j in range(3)],
                          axis=1)[:, None, :]
        dense = ConvSpec(kernel=(1, 3), groups=self.channels)
        u1 = ops.conv2d_forward(window, params[f"{p}.f1.tconv.W"],
                                params[f"{p}.f1.tconv.b"], dense)
        u2, _ = ops.batchnorm_forward(
            u1, params[f"{p}.f1.bn.scale"], params[f"{p}.f1.bn.shift"],
            params[f"{p}.f1.bn.running_mean"],
            params[f"{p}.f1.bn.running_var"], "infer")
        u3, _ = ops.swish_forward(u2)
        u4 = ops.conv2d_forward(u3, params[f"{p}.f1.pw.W"],
                                params[f"{p}.f1.pw.b"], self.pwspec)
        return u4[:, 0, 0]


class _BroadcastBlock:
    def __init__(self, prefix, in_channels, spec: LayerSpec, config):
        if spec.out_channels != in_channels:
            raise ConfigError(
                f"{prefix}: Broadcast blocks keep their channel count "
                f"({in_channels} in, {spec.out_channels} requested)")
        if spec.freq_stride != 1:
            raise ConfigError(f"{prefix}: Broadcast blocks cannot stride")
        self.prefix = prefix
        self.channels = in_channels
        self.dilation = spec.time_dilation
        self.f2 = _F2(prefix, in_channels, 1, config.ssn_groups)
        self.f1 = _F1(prefix, in_channels, spec.time_dilation, config.dropout)

    def param_specs(self):
        return self.f2.param_specs() + self.f1.param_specs()

    def out_cf(self, c, f):
        return c, f

    def time_receptive(self):
        return 2 * self.dilation

    def forward(self, params, x, mode, rng):
        d = self.dilation
        f2x, f2_cache = self.f2.forward(params, x, mode)
        u5, f1_cache = self.f1.forward(params, f2x, mode, rng)
        xt, trim_cache = ops.time_trim_forward(x, d, d)
        f2t, _ = ops.time_trim_forward(f2x, d, d)
        pre = xt + f2t + u5
        y, relu_mask = ops.relu_forward(pre)
        return y, (f2_cache, f1_cache, trim_cache, relu_mask)

    def backward(self, params, cache, gy):
        f2_cache, f1_cache, trim_cache, relu_mask = cache
        gpre = ops.relu_backward(gy, relu_mask)
        g_u5, _ = ops.freq_broadcast_add_backward(gpre)
        g_f2_from_f1, f1_grads = self.f1.backward(params, f1_cache, g_u5)
        g_f2 = ops.time_trim_backward(gpre, trim_cache) + g_f2_from_f1
        g_x_skip = ops.time_trim_backward(gpre, trim_cache)
        gx, f2_grads = self.f2.backward(params, f2_cache, g_f2)
        gx = gx + g_x_skip
        return gx, {**f1_grads, **f2_grads}

    # --- streaming ---

    def stream_new(self, in_freq):
        d = self.dilation
        return {
            "pooled": _Ring(2 * d + 1, (self.channels,)),
            "f2": _Ring(d + 1, (self.channels, in_freq)),
            "x": _Ring(d + 1, (self.channels, in_freq)),
        }

    def stream_step(self, params, state, col):
        d = self.dilation
        f2col = self.f2.column(params, col)
        state["pooled"].push(f2col.mean(axis=1))
        state["f2"].push(f2col)
        state["x"].push(col)
        if not state["pooled"].full:
            return None
        f1col = self.f1.column(params, state["pooled"])
        pre = state["x"].tap(d) + state["f2"].tap(d) + f1col[:, None]
        return np.maximum(pre, 0.0)


class _TransitionBlock:
    def __init__(self, prefix, in_channels, spec: LayerSpec, config):
        self.prefix = prefix
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        self.dilation = spec.time_dilation
        self.freq_stride = spec.freq_stride
        self.pwspec = ConvSpec(kernel=(1, 1))
        self.f2 = _F2(prefix, spec.out_channels, spec.freq_stride,
                      config.ssn_groups)
        self.f1 = _F1(prefix, spec.out_channels, spec.time_dilation,
                      config.dropout)

    def param_specs(self):
        specs = [
            (f"{self.prefix}.pw.W",
             (self.out_channels, self.in_channels, 1, 1), INIT_KERNEL, True),
            (f"{self.prefix}.pw.b", (self.out_channels,), INIT_ZERO, True),
        ]
        specs += _norm_param_specs(f"{self.prefix}.bn0", self.out_channels)
        specs += self.f2.param_specs() + self.f1.param_specs()
        return specs

    def out_cf(self, c, f):
        return self.out_channels, self.f2.spec.out_extent(0, f)

    def time_receptive(self):
        return 2 * self.dilation

    def forward(self, params, x, mode, rng):
        p = self.prefix
        d = self.dilation
        a = ops.conv2d_forward(x, params[f"{p}.pw.W"], params[f"{p}.pw.b"],
                               self.pwspec)
        b, bn0_cache = ops.batchnorm_forward(
            a, params[f"{p}.bn0.scale"], params[f"{p}.bn0.shift"],
            params[f"{p}.bn0.running_mean"], params[f"{p}.bn0.running_var"],
            mode)
        v, v_mask = ops.relu_forward(b)
        f2v, f2_cache = self.f2.forward(params, v, mode)
        u5, f1_cache = self.f1.forward(params, f2v, mode, rng)
        f2t, trim_cache = ops.time_trim_forward(f2v, d, d)
        pre = f2t + u5
        y, relu_mask = ops.relu_forward(pre)
        return y, (x, bn0_cache, v_mask, v, f2_cache, f1_cache, trim_cache,
                   relu_mask)

    def backward(self, params, cache, gy):
        p = self.prefix
        (x, bn0_cache, v_mask, v, f2_cache, f1_cache, trim_cache,
         relu_mask) = cache
        gpre = ops.relu_backward(gy, relu_mask)
        g_u5, _ = ops.freq_broadcast_add_backward(gpre)
        g_f2_from_f1, f1_grads = self.f1.backward(params, f1_cache, g_u5)
        g_f2 = ops.time_trim_backward(gpre, trim_cache) + g_f2_from_f1
        gv, f2_grads = self.f2.backward(params, f2_cache, g_f2)
        gb = ops.relu_backward(gv, v_mask)
        ga, gscale, gshift = ops.batchnorm_backward(gb, bn0_cache)
        gx, gpw_w, gpw_b = ops.conv2d_backward(ga, x, params[f"{p}.pw.W"],
                                               self.pwspec)
        grads = {
            f"{p}.pw.W": gpw_w,
            f"{p}.pw.b": gpw_b,
            f"{p}.bn0.scale": gscale,
            f"{p}.bn0.shift": gshift,
        }
        grads.update(f1_grads)
        grads.update(f2_grads)
        return gx, grads

    # --- streaming ---

    def stream_new(self, in_freq):
        d = self.dilation
        out_freq = self.f2.spec.out_extent(0, in_freq)
        return {
            "pooled": _Ring(2 * d + 1, (self.out_channels,)),
            "f2": _Ring(d + 1, (self.out_channels, out_freq)),
        }

    def _v_column(self, params, col):
        p = self.prefix
        a = ops.conv2d_forward(col[:, :, None], params[f"{p}.pw.W"],
                               params[f"{p}.pw.b"], self.pwspec)
        b, _ = ops.batchnorm_forward(
            a, params[f"{p}.bn0.scale"], params[f"{p}.bn0.shift"],
            params[f"{p}.bn0.running_mean"], params[f"{p}.bn0.running_var"],
            "infer")
        return np.maximum(b, 0.0)

    def stream_step(self, params, state, col):
        d = self.dilation
        v = self._v_column(params, col)
        f2col = self.f2.column(params, v[:, :, 0])
        state["pooled"].push(f2col.mean(axis=1))
        state["f2"].push(f2col)
        if not state["pooled"].full:
            return None
        f1col = self.f1.column(params, state["pooled"])
        pre = state["f2"].tap(d) + f1col[:, None]
        return np.maximum(pre, 0.0)


class _Head:
    """Two parallel single-channel convolutions: detection and offset."""

    def __init__(self, prefix, in_channels, spec: LayerSpec):
        kf, kt = spec.kernel
        if kt != 1:
            raise ConfigError(f"{prefix}: head kernel must have time extent 1")
        self.prefix = prefix
        self.in_channels = in_channels
        self.spec = ConvSpec(kernel=(kf, kt))

    def param_specs(self):
        kf, kt = self.spec.kernel
        shape = (1, self.in_channels, kf, kt)
        return [
            (f"{self.prefix}.det.W", shape, INIT_KERNEL, True),
            (f"{self.prefix}.det.b", (1,), INIT_ZERO, True),
            (f"{self.prefix}.off.W", shape, INIT_KERNEL, True),
            (f"{self.prefix}.off.b", (1,), INIT_ZERO, True),
        ]

    def out_cf(self, c, f):
        return 2, self.spec.out_extent(0, f)

    def time_receptive(self):
        return 0

    def forward(self, params, x, mode, rng):
        p = self.prefix
        det = ops.conv2d_forward(x, params[f"{p}.det.W"], params[f"{p}.det.b"],
                                 self.spec)
        off = ops.conv2d_forward(x, params[f"{p}.off.W"], params[f"{p}.off.b"],
                                 self.spec)
        return (det, off), x

    def backward(self, params, cache, g_det, g_off):
        p = self.prefix
        gx1, gdw, gdb = ops.conv2d_backward(g_det, cache, params[f"{p}.det.W"],
                                            self.spec)
        gx2, gow, gob = ops.conv2d_backward(g_off, cache, params[f"{p}.off.W"],
                                            self.spec)
        return gx1 + gx2, {
            f"{p}.det.W": gdw, f"{p}.det.b": gdb,
            f"{p}.off.W": gow, f"{p}.off.b": gob,
        }

    def stream_new(self, in_freq):
        return None

    def stream_step(self, params, state, col):
        p = self.prefix
        det = ops.conv2d_forward(col[:, :, None], params[f"{p}.det.W"],
                                 params[f"{p}.det.b"], self.spec)
        off = ops.conv2d_forward(col[:, :, None], params[f"{p}.off.W"],
                                 params[f"{p}.off.b"], self.spec)
        return float(det[0, 0, 0]), float(off[0, 0, 0])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """Builds and runs the configured network.

    Weights live in a plain dict name -> float32 ndarray (the weight
    store); the Model itself holds only structure. Train-mode forward
    updates running norm statistics in the store and returns a cache that
    backward consumes exactly once.
    """

    def __init__(self, config: ModelConfig):
        if not config.layers:
            raise ConfigError("config has no layers")
        if config.layers[-1].kind != KIND_HEAD:
            raise ConfigError("config must end with a Head layer")
        self.config = config
        self.layers = []
        self._shape_ledger = []

        c, f = 1, config.input_freq
        index = 0
        for spec in config.layers:
            spec.validate(index)
            for _ in range(spec.repeat):
                prefix = f"l{index:02d}.{spec.kind.lower()}"
                try:
                    layer = self._build_layer(prefix, c, spec)
                    c2, f2 = layer.out_cf(c, f)
                    if spec.kind in (KIND_TRANSITION, KIND_BROADCAST):
                        if f2 % config.ssn_groups != 0:
                            raise ConfigError(
                                f"frequency extent {f2} not divisible by "
                                f"ssn_groups={config.ssn_groups}")
                except HeimdalError as exc:
                    raise ConfigError(f"layer {index} ({spec.kind}): {exc}")
                self.layers.append(layer)
                self._shape_ledger.append((prefix, (c, f), (c2, f2),
                                           layer.time_receptive()))
                c, f = c2, f2
                index += 1
        if f != 1:
            raise ConfigError(
                f"final frequency extent is {f}, expected 1 (adjust the Head "
                "kernel or the strides)")
        self.out_channels = c
        self.receptive_field_frames = 1 + sum(
            layer.time_receptive() for layer in self.layers)

    def _build_layer(self, prefix, in_channels, spec):
        if spec.kind == KIND_CONV:
            return _PlainConv(prefix, in_channels, spec)
        if spec.kind == KIND_TRANSITION:
            return _TransitionBlock(prefix, in_channels, spec, self.config)
        if spec.kind == KIND_BROADCAST:
            return _BroadcastBlock(prefix, in_channels, spec, self.config)
        return _Head(prefix, in_channels, spec)

    # --- parameters ---

    def param_specs(self):
        specs = []
        for layer in self.layers:
            specs.extend(layer.param_specs())
        return specs

    def init_weights(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape, kind, _ in self.param_specs():
            if name in weights:
                raise ConfigError(f"duplicate parameter name {name}")
            weights[name] = _init_tensor(rng, shape, kind)
        return weights

    def trainable_names(self):
        return [name for name, _, _, trainable in self.param_specs()
                if trainable]

    def param_count(self) -> int:
        """Number of trainable values (running statistics excluded)."""
        return sum(int(np.prod(shape))
                   for _, shape, _, trainable in self.param_specs()
                   if trainable)

    def check_weights(self, weights: dict) -> None:
        specs = {name: shape for name, shape, _, _ in self.param_specs()}
        missing = sorted(set(specs) - set(weights))
        if missing:
            raise FormatError(f"weight store is missing tensors: {missing[:4]}")
        for name, shape in specs.items():
            if weights[name].shape != shape:
                raise FormatError(
                    f"weight {name} has shape {weights[name].shape}, "
                    f"config expects {shape}")

    # --- execution ---

    def receptive_field(self) -> int:
        return self.receptive_field_frames

    def shape_ledger(self, frames: int):
        """Per-layer (name, in_shape, out_shape) rows for a T-frame input."""
        rows = []
        t = frames
        c, f = 1, self.config.input_freq
        for layer, (name, (ci, fi), (co, fo), spent) in zip(
                self.layers, self._shape_ledger):
            t_out = t - spent
            rows.append((name, (ci, fi, t), (co, fo, t_out)))
            t = t_out
            c, f = co, fo
        return rows

    def _canon_input(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            return x[None, None], 2
        if x.ndim == 3:
            return x[None], 3
        if x.ndim == 4:
            return x, 4
        raise HeimdalError(f"bad input ndim {x.ndim}")

    def forward(self, weights, features, mode="infer", rng=None):
        """Run the network on [16 x T] features (or a [N,1,16,T] batch).

        Returns (ModelOutput, cache). The cache is None in infer mode; in
        train mode pass it to backward exactly once.
        """
        x, in_ndim = self._canon_input(features)
        if x.shape[2] != self.config.input_freq:
            raise HeimdalError(
                f"input frequency extent {x.shape[2]} != "
                f"{self.config.input_freq}")
        t = x.shape[3]
        r = self.receptive_field_frames
        if t < r:
            raise InputTooShortError(t, r)
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

        caches = []
        for layer in self.layers[:-1]:
            x, cache = layer.forward(weights, x, mode, rng)
            caches.append(cache)
        (det, off), head_cache = self.layers[-1].forward(weights, x, mode, rng)
        caches.append(head_cache)

        if in_ndim < 4:
            det, off = det[0], off[0]
        output = ModelOutput(detection_logits=det, offsets=off)
        if mode == "infer":
            return output, None
        return output, {"caches": caches, "used": False, "in_ndim": in_ndim}

    def backward(self, weights, cache, grad_detection, grad_offset):
        """Exact adjoint of a train-mode forward; returns grads by name."""
        if cache is None or cache.get("used"):
            raise HeimdalError(
                "backward needs a fresh cache from a train-mode forward")
        cache["used"] = True
        caches = cache["caches"]
        g_det = np.asarray(grad_detection)
        g_off = np.asarray(grad_offset)
        if cache["in_ndim"] < 4:
            if g_det.ndim != 3 or g_off.ndim != 3:
                raise HeimdalError(
                    "gradient rank does not match the forward output rank")
            g_det, g_off = g_det[None], g_off[None]
        elif g_det.ndim != 4 or g_off.ndim != 4:
            raise HeimdalError(
                "gradient rank does not match the forward output rank")

        grads = {}
        gx, head_grads = self.layers[-1].backward(weights, caches[-1],
                                                  g_det, g_off)
        grads.update(head_grads)
        for layer, layer_cache in zip(reversed(self.layers[:-1]),
                                      reversed(caches[:-1])):
            gx, layer_grads = layer.backward(weights, layer_cache, gx)
            grads.update(layer_grads)
        return grads


def build(config: ModelConfig, seed: int) -> dict:
    """Initialize a weight store for the given config."""
    return Model(config).init_weights(seed)


# ---------------------------------------------------------------------------
# Weight file I/O ("HMDL"): magic, u32 version, u32 tensor count; per
# tensor a u16 name length, UTF-8 name, u8 ndim, u32 dims, then float32
# little-endian values. Round trips are bit-exact.
# ---------------------------------------------------------------------------

def save_weights(weights: dict, path) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(weights)))
        for name in sorted(weights):
            tensor = np.ascontiguousarray(weights[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(tensor.tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(
            f"{path}: weight file version {version}, expected "
            f"{WEIGHT_VERSION}")
    weights = {}
    pos = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            if len(data[pos:pos + name_len]) < name_len:
                raise FormatError(f"{path}: truncated tensor name")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n_values = int(np.prod(dims)) if ndim else 1
            end = pos + 4 * n_values
            if end > len(data):
                raise FormatError(f"{path}: truncated tensor payload")
            values = np.frombuffer(data, dtype="<f4", count=n_values,
                                   offset=pos)
            weights[name] = values.reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated weight file ({exc})")
    return weights
