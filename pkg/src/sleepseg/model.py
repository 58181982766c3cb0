"""The encoder-decoder-segment-classifier network for dense 1D segmentation.

Encoder: four blocks of two dilated same-padded convolutions (conv -> ReLU
-> batch norm) followed by valid max pooling; two more convolutions at the
bottom. Decoder: nearest-neighbour upsampling, a convolution whose width
equals the upsampling factor, a centered skip concatenation, and two more
convolutions per block. A width-1 convolution with tanh produces per-sample
class scores; the segment head mean-pools those over one segment and applies
a small convolution across neighbouring segments plus a softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    AlignmentError,
    BatchNormState,
    ConvParams,
    InsufficientLengthError,
    Tensor,
    avg_pool1d,
    batch_norm,
    conv1d,
    crop_concat,
    max_pool1d,
    no_grad,
    relu,
    softmax,
    tanh,
    upsample_nearest,
    zero_pad_end,
)


class ConstructionError(ValueError):
    """A model configuration violates one of its invariants."""


@dataclass
class UTimeConfig:
    """Architecture hyperparameters.

    `transition_window` is the number of segments a training window spans;
    `transition_kernel` is the width of the segment-axis convolution in the
    classifier head. With the defaults below (and one input channel, five
    classes) the trainable parameter count is 1,187,589.
    """

    in_channels: int = 1
    classes: int = 5
    segment_samples: int = 3000
    depth: int = 4
    pool_windows: tuple = (10, 8, 6, 4)
    base_filters: int = 16
    kernel_width: int = 5
    dilation: int = 2
    decoder_kernels: tuple = (4, 6, 8, 10)
    transition_window: int = 35
    transition_kernel: int = 3
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        self.pool_windows = tuple(int(w) for w in self.pool_windows)
        self.decoder_kernels = tuple(int(k) for k in self.decoder_kernels)

    @property
    def min_input_length(self) -> int:
        return int(np.prod(self.pool_windows)) if self.pool_windows else 1

    def validate(self) -> None:
        problems = []
        if len(self.pool_windows) != self.depth:
            problems.append(f"len(pool_windows)={len(self.pool_windows)} != depth={self.depth}")
        if len(self.decoder_kernels) != self.depth:
            problems.append(f"len(decoder_kernels)={len(self.decoder_kernels)} != depth={self.depth}")
        elif tuple(self.decoder_kernels) != tuple(reversed(self.pool_windows)):
            problems.append(
                "decoder kernel must equal the upsampling factor at its level: "
                f"expected {tuple(reversed(self.pool_windows))}, got {tuple(self.decoder_kernels)}")
        for name in ("in_channels", "classes", "segment_samples", "base_filters",
                     "kernel_width", "dilation", "transition_window", "transition_kernel"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(w < 1 for w in self.pool_windows):
            problems.append(f"pool windows must be >= 1, got {self.pool_windows}")
        if problems:
            raise ConstructionError("; ".join(problems))


def canonical_config(in_channels: int = 1, classes: int = 5) -> UTimeConfig:
    return UTimeConfig(in_channels=in_channels, classes=classes)


# ---------------------------------------------------------------------------
# layers


@dataclass
class _ConvBN:
    conv: ConvParams
    bn: BatchNormState
    activation: str = "relu"

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = conv1d(x, self.conv)
        if self.activation == "relu":
            y = relu(y)
        elif self.activation == "tanh":
            y = tanh(y)
        return batch_norm(y, self.bn, mode=mode)


def _glorot_kernel(rng, width, cin, cout, dtype):
    fan_in = width * cin
    fan_out = width * cout
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (width, cin, cout)).astype(dtype)


class UTimeModel:
    """Built layer graph plus all trainable parameters and BN statistics."""

    def __init__(self, config: UTimeConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self._params: list[tuple[str, Tensor]] = []
        self._bn_states: list[tuple[str, BatchNormState]] = []
        rng = np.random.default_rng(seed)

        cfg = config
        self.encoder = []
        cin = cfg.in_channels
        for level in range(cfg.depth):
            f = cfg.base_filters * (2 ** level)
            block = {
                "conv1": self._conv_bn(rng, f"enc{level}.conv1", cfg.kernel_width, cin, f, cfg.dilation),
                "conv2": self._conv_bn(rng, f"enc{level}.conv2", cfg.kernel_width, f, f, cfg.dilation),
                "pool": cfg.pool_windows[level],
            }
            self.encoder.append(block)
            cin = f

        f_bottom = cfg.base_filters * (2 ** cfg.depth)
        self.bottom = {
            "conv1": self._conv_bn(rng, "bottom.conv1", cfg.kernel_width, cin, f_bottom, cfg.dilation),
            "conv2": self._conv_bn(rng, "bottom.conv2", cfg.kernel_width, f_bottom, f_bottom, cfg.dilation),
        }

        self.decoder = []
        cin = f_bottom
        for d, factor in enumerate(cfg.decoder_kernels):
            f = cfg.base_filters * (2 ** (cfg.depth - 1 - d))
            block = {
                "factor": factor,
                "upconv": self._conv_bn(rng, f"dec{d}.upconv", factor, cin, f, 1),
                "conv1": self._conv_bn(rng, f"dec{d}.conv1", cfg.kernel_width, 2 * f, f, 1),
                "conv2": self._conv_bn(rng, f"dec{d}.conv2", cfg.kernel_width, f, f, 1),
            }
            self.decoder.append(block)
            cin = f

        self.dense_conv = self._conv(rng, "dense.conv", 1, cin, cfg.classes, 1)
        self.segment_conv = self._conv(rng, "segment.conv", cfg.transition_kernel,
                                       cfg.classes, cfg.classes, 1)

    # -- construction helpers

    def _conv(self, rng, name, width, cin, cout, dilation) -> ConvParams:
        kernel = Tensor(_glorot_kernel(rng, width, cin, cout, self.dtype),
                        requires_grad=True, name=f"{name}.kernel")
        bias = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=f"{name}.bias")
        self._params += [(kernel.name, kernel), (bias.name, bias)]
        return ConvParams(kernel=kernel, bias=bias, dilation=dilation, padding_mode="same")

    def _conv_bn(self, rng, name, width, cin, cout, dilation, activation="relu") -> _ConvBN:
        conv = self._conv(rng, name, width, cin, cout, dilation)
        bn = BatchNormState.create(cout, dtype=self.dtype, momentum=self.config.bn_momentum,
                                   epsilon=self.config.bn_epsilon, name=f"{name}.bn")
        self._params += [(bn.gamma.name, bn.gamma), (bn.beta.name, bn.beta)]
        self._bn_states.append((f"{name}.bn", bn))
        return _ConvBN(conv=conv, bn=bn, activation=activation)

    # -- parameter access

    def named_parameters(self) -> list:
        return list(self._params)

    def count_parameters(self) -> int:
        """Trainable values only; BN running statistics are excluded."""
        return sum(t.size for _, t in self._params)

    def state_entries(self) -> list:
        """Everything a checkpoint stores, as (name, ndarray): parameters
        plus BN running statistics."""
        entries = [(name, t.data) for name, t in self._params]
        for name, bn in self._bn_states:
            entries.append((f"{name}.running_mean", bn.running_mean))
            entries.append((f"{name}.running_var", bn.running_var))
        return entries

    def load_state(self, arrays: dict) -> None:
        for name, target in self._params:
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            src = arrays[name]
            if tuple(src.shape) != tuple(target.shape):
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
            target.data = src.astype(self.dtype)
        for name, bn in self._bn_states:
            bn.running_mean = arrays[f"{name}.running_mean"].astype(self.dtype)
            bn.running_var = arrays[f"{name}.running_var"].astype(self.dtype)
            bn.initialized = True

    def seed_bn_identity(self) -> None:
        for _, bn in self._bn_states:
            bn.seed_identity()

    # -- forward paths

    def _check_input(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            x = Tensor(x.data[None], requires_grad=x.requires_grad)
        if x.ndim != 3:
            raise AlignmentError(f"expected (B, t, C) input, got shape {x.shape}")
        if x.shape[2] != self.config.in_channels:
            raise AlignmentError(
                f"input has {x.shape[2]} channels, model expects {self.config.in_channels}")
        t_min = self.config.min_input_length
        if x.shape[1] < t_min:
            raise InsufficientLengthError(
                f"input length {x.shape[1]} is below the minimum t_min={t_min} "
                "required by the pooling stages")
        return x

    def _trace(self, trace, name, tensor):
        if trace is not None:
            trace.append((name, tuple(tensor.shape[1:])))

    def dense_scores(self, x: Tensor, mode: str = "infer", trace=None) -> Tensor:
        """Per-sample class scores (tanh, pre-classifier), padded to the input length."""
        x = self._check_input(x)
        t = x.shape[1]
        if trace is not None:
            i = self.config.segment_samples
            if t % i == 0:
                trace.append(("input", (t // i, i, self.config.in_channels)))
            trace.append(("reshape", (t, self.config.in_channels)))

        h = x
        skips = []
        for level, block in enumerate(self.encoder):
            h = block["conv1"](h, mode)
            self._trace(trace, f"enc{level}.conv1", h)
            h = block["conv2"](h, mode)
            self._trace(trace, f"enc{level}.conv2", h)
            skips.append(h)
            h = max_pool1d(h, block["pool"])
            self._trace(trace, f"enc{level}.pool", h)

        h = self.bottom["conv1"](h, mode)
        self._trace(trace, "bottom.conv1", h)
        h = self.bottom["conv2"](h, mode)
        self._trace(trace, "bottom.conv2", h)

        for d, block in enumerate(self.decoder):
            h = upsample_nearest(h, block["factor"])
            self._trace(trace, f"dec{d}.upsample", h)
            h = block["upconv"](h, mode)
            self._trace(trace, f"dec{d}.upconv", h)
            h = crop_concat(skips[len(self.encoder) - 1 - d], h)
            self._trace(trace, f"dec{d}.concat", h)
            h = block["conv1"](h, mode)
            self._trace(trace, f"dec{d}.conv1", h)
            h = block["conv2"](h, mode)
            self._trace(trace, f"dec{d}.conv2", h)

        h = tanh(conv1d(h, self.dense_conv))
        self._trace(trace, "dense.conv", h)
        h = zero_pad_end(h, t)
        self._trace(trace, "pad", h)
        return h

    def forward(self, x: Tensor, mode: str = "infer", segment_samples: int | None = None,
                trace=None) -> Tensor:
        """Class probabilities per segment: (B, t / segment_samples, K).

        Inference mode uses BN running statistics and builds no gradient
        tape, so it is a pure function of the input.
        """
        i = self.config.segment_samples if segment_samples is None else int(segment_samples)
        if i < 1:
            raise AlignmentError(f"segment width must be >= 1, got {i}")

        def run():
            h = self.dense_scores(x, mode=mode, trace=trace)
            t = h.shape[1]
            if t % i != 0:
                raise AlignmentError(
                    f"input length {t} is not a multiple of the segment width {i}")
            if trace is not None and i > 1:
                trace.append(("segments", (t // i, i, self.config.classes)))
            if i > 1:
                h = avg_pool1d(h, i, i)
            self._trace(trace, "segment_pool", h)
            h = conv1d(h, self.segment_conv)
            h = softmax(h, axis=-1)
            self._trace(trace, "segment_conv", h)
            return h

        if mode == "infer":
            with no_grad():
                return run()
        return run()

    def forward_dense(self, x: Tensor, mode: str = "infer") -> Tensor:
        """Per-sample class probabilities: the segment head applied at width 1."""
        return self.forward(x, mode=mode, segment_samples=1)


def build_model(config: UTimeConfig, seed: int = 0, dtype=np.float32) -> UTimeModel:
    return UTimeModel(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# shape and receptive-field arithmetic


def shape_trace(model: UTimeModel, t: int) -> list:
    """Layer-by-layer output shapes for a length-t forward pass."""
    trace = []
    x = Tensor(np.zeros((1, t, model.config.in_channels), model.dtype))
    model.seed_bn_identity()
    model.forward(x, mode="infer", trace=trace)
    return trace


def compose_receptive_field(stages) -> int:
    """Receptive field of a chain of (effective_width, stride) stages."""
    rf = 1
    jump = 1
    for width, stride in stages:
        rf += (width - 1) * jump
        jump *= stride
    return rf


def receptive_field(config: UTimeConfig) -> int:
    """Input-sample span feeding one activation of the last encoder convolution.

    Standard stride/kernel composition over the down-sampling path: the
    pooling chain (window = stride) followed by the bottom block's dilated
    convolutions. The same-padded convolutions inside the encoder blocks
    widen context at finer scales but are not part of this span; see
    receptive_field_full for the whole-stack figure.
    """
    config.validate()
    eff = (config.kernel_width - 1) * config.dilation + 1
    stages = [(w, w) for w in config.pool_windows]
    stages += [(eff, 1), (eff, 1)]  # bottom block convolutions
    return compose_receptive_field(stages)


def receptive_field_full(config: UTimeConfig) -> int:
    """Whole-encoder composition, counting every convolution and pool."""
    config.validate()
    eff = (config.kernel_width - 1) * config.dilation + 1
    stages = []
    for w in config.pool_windows:
        stages += [(eff, 1), (eff, 1), (w, w)]
    stages += [(eff, 1), (eff, 1)]
    return compose_receptive_field(stages)
