"""Miniature Inception-style and Residual-style feature extractors."""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import functional as F
from .exceptions import ConfigurationError, DimensionError
from .functional import ConvSpec
from .nn import BatchNorm, Conv2d, Dense, Module
from .tensor import Tensor


def count_macs(spec: ConvSpec, input_h: int, input_w: int) -> int:
    """Multiply-accumulate count of one convolution over one image."""
    out_h, out_w = spec.output_size(input_h, input_w)
    return out_h * out_w * spec.out_channels * spec.kernel_h * spec.kernel_w * spec.in_channels


@dataclass(frozen=True)
class InceptionBlockSpec:
    """Channel counts for the four paths of an inception block.

    Paths: 1x1; 1x1 reduce -> 3x3; 1x1 reduce -> 5x5; 3x3 max-pool -> 1x1.
    """

    in_channels: int
    c1: int
    c3_reduce: int
    c3: int
    c5_reduce: int
    c5: int
    pool_proj: int

    def __post_init__(self):
        if min(self.in_channels, self.c1, self.c3_reduce, self.c3,
               self.c5_reduce, self.c5, self.pool_proj) < 1:
            raise ConfigurationError("every inception path needs at least one channel")

    @property
    def out_channels(self):
        return self.c1 + self.c3 + self.c5 + self.pool_proj

    @classmethod
    def for_width(cls, in_channels, width):
        if width % 8:
            raise ConfigurationError(f"inception block width {width} must be a multiple of 8")
        eighth = width // 8
        return cls(in_channels, c1=2 * eighth, c3_reduce=2 * eighth, c3=3 * eighth,
                   c5_reduce=eighth, c5=eighth, pool_proj=2 * eighth)


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    @property
    def projection(self):
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass
class BranchOutput:
    features: Tensor
    aux_logits: List[Tensor] = field(default_factory=list)


def _conv(in_c, out_c, k, rng, stride=1, bias=True):
    return Conv2d(ConvSpec(in_c, out_c, k, k, stride, k // 2), rng, bias)


class InceptionBlock(Module):
    def __init__(self, spec: InceptionBlockSpec, rng):
        self.spec = spec
        self.path1 = _conv(spec.in_channels, spec.c1, 1, rng)
        self.path3_reduce = _conv(spec.in_channels, spec.c3_reduce, 1, rng)
        self.path3 = _conv(spec.c3_reduce, spec.c3, 3, rng)
        self.path5_reduce = _conv(spec.in_channels, spec.c5_reduce, 1, rng)
        self.path5 = _conv(spec.c5_reduce, spec.c5, 5, rng)
        self.pool_proj = _conv(spec.in_channels, spec.pool_proj, 1, rng)

    def paths(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"inception block expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        a = F.relu(self.path1(x))
        b = F.relu(self.path3(F.relu(self.path3_reduce(x))))
        c = F.relu(self.path5(F.relu(self.path5_reduce(x))))
        d = F.relu(self.pool_proj(F.max_pool2d(x, 3, 1, 1)))
        return a, b, c, d

    def forward(self, x):
        a, b, c, d = self.paths(x)
        return F.concat_channels(F.concat_channels(F.concat_channels(a, b), c), d)


class ResidualBlock(Module):
    """``relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))``."""

    def __init__(self, spec: ResidualBlockSpec, rng):
        self.spec = spec
        self.conv1 = _conv(spec.in_channels, spec.out_channels, 3, rng, spec.stride, bias=False)
        self.bn1 = BatchNorm(spec.out_channels)
        self.conv2 = _conv(spec.out_channels, spec.out_channels, 3, rng, bias=False)
        self.bn2 = BatchNorm(spec.out_channels)
        if spec.projection:
            self.shortcut = _conv(spec.in_channels, spec.out_channels, 1, rng, spec.stride)
        else:
            self.shortcut = None

    def main_path(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"residual block expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))

    def skip_path(self, x):
        return x if self.shortcut is None else self.shortcut(x)

    def forward(self, x):
        return F.relu(self.main_path(x) + self.skip_path(x))


class AuxClassifier(Module):
    """Training-only classifier tapped from an intermediate feature map.

    avg-pool -> 1x1 conv -> ReLU -> flatten -> dense -> ReLU -> dropout -> dense.
    The pool is 5x5 stride 3; taps smaller than 5x5 fall back to 3x3 stride 1.
    """

    def __init__(self, in_channels, tap_size, num_classes, rng,
                 reduce_channels=128, hidden=128, dropout=0.7):
        if tap_size >= 5:
            self.pool_kernel, self.pool_stride = 5, 3
        elif tap_size >= 3:
            self.pool_kernel, self.pool_stride = 3, 1
        else:
            raise ConfigurationError(f"aux classifier tap {tap_size}x{tap_size} is smaller than 3x3")
        pooled = F.conv_output_size(tap_size, self.pool_kernel, self.pool_stride, 0)
        self.tap_size = tap_size
        self.dropout = dropout
        self.reduce = _conv(in_channels, reduce_channels, 1, rng)
        self.fc1 = Dense(reduce_channels * pooled * pooled, hidden, rng)
        self.fc2 = Dense(hidden, num_classes, rng)

    def forward(self, x, rng=None):
        if x.shape[2] < self.pool_kernel or x.shape[3] < self.pool_kernel:
            raise ConfigurationError(f"aux tap {x.shape[2:]} smaller than pool {self.pool_kernel}")
        h = F.avg_pool2d(x, self.pool_kernel, self.pool_stride)
        h = F.relu(self.reduce(h)).flatten()
        h = F.relu(self.fc1(h))
        h = F.dropout(h, self.dropout, self.training, rng)
        return self.fc2(h)


class Stem(Module):
    """3x3 conv -> BN -> ReLU -> 2x2 max-pool (halves H and W)."""

    def __init__(self, out_channels, rng):
        self.conv = _conv(1, out_channels, 3, rng, bias=False)
        self.bn = BatchNorm(out_channels)

    def forward(self, x):
        return F.max_pool2d(F.relu(self.bn(self.conv(x))), 2, 2)


def inception_widths(stem, final):
    """Block output widths growing from ``stem`` to ``final`` in multiples of 8."""
    widths = []
    for i in (1, 2):
        w = stem + (final - stem) * i / 3
        widths.append(max(8, int(round(w / 8)) * 8))
    widths.append(final)
    return widths


def residual_widths(final):
    return [max(1, final // 4), max(1, final // 2), final]


class InceptionBranch(Module):
    """stem -> inception -> max-pool -> inception -> [aux tap] -> inception."""

    def __init__(self, config, rng):
        self.input_size = config.input_size
        self.stem = Stem(config.stem_channels, rng)
        w1, w2, w3 = inception_widths(config.stem_channels, config.branch_channels)
        self.block1 = InceptionBlock(InceptionBlockSpec.for_width(config.stem_channels, w1), rng)
        self.block2 = InceptionBlock(InceptionBlockSpec.for_width(w1, w2), rng)
        self.block3 = InceptionBlock(InceptionBlockSpec.for_width(w2, w3), rng)
        self.aux = AuxClassifier(w2, config.feature_size, config.num_classes, rng,
                                 config.aux_channels, config.aux_hidden, config.aux_dropout)
        self.out_channels = w3

    def forward(self, x, rng=None):
        _check_input(x, self.input_size)
        h = self.block1(self.stem(x))
        h = self.block2(F.max_pool2d(h, 2, 2))
        aux = [self.aux(h, rng)] if self.training else []
        return BranchOutput(self.block3(h), aux)


class ResidualBranch(Module):
    """stem -> three residual stages (the middle one downsamples)."""

    def __init__(self, config, rng):
        self.input_size = config.input_size
        self.stem = Stem(config.stem_channels, rng)
        widths = residual_widths(config.branch_channels)
        specs = [
            ResidualBlockSpec(config.stem_channels, widths[0], 1),
            ResidualBlockSpec(widths[0], widths[1], 2),
            ResidualBlockSpec(widths[1], widths[2], 1),
        ]
        self.stages = [ResidualBlock(spec, rng) for spec in specs]
        self.out_channels = widths[2]

    def forward(self, x, rng=None):
        _check_input(x, self.input_size)
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return BranchOutput(h, [])


def _check_input(x, size):
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise DimensionError(f"branch input must be (B, 1, {size}, {size}), got {x.shape}")


def model_macs(module, input_size):
    """Total conv MACs of ``module`` for one image, by shape walk over its convolutions.

    Uses a dry forward pass on a zero image with recording disabled.
    """
    from .tensor import no_grad

    totals = []
    originals = []
    for _, m in module.named_modules():
        if isinstance(m, Conv2d):
            def hooked(x, _m=m, _orig=m.forward):
                totals.append(count_macs(_m.spec, x.shape[2], x.shape[3]))
                return _orig(x)
            originals.append((m, m.__dict__.get("forward")))
            m.forward = hooked
    was_training = module.training
    module.eval()
    try:
        with no_grad():
            module(Tensor(np.zeros((1, 1, input_size, input_size), dtype=np.float32)))
    finally:
        for m, orig in originals:
            if orig is None:
                del m.forward
            else:
                m.forward = orig
        module.train(was_training)
    return int(sum(totals))
