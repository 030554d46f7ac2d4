"""Ensemble fusion, channel attention, classification head and the full network."""

import numpy as np

from . import functional as F
from .branches import BranchOutput, InceptionBranch, ResidualBranch
from .exceptions import ConfigurationError, FusionError
from .nn import BatchNorm, Dense, Module


def ensemble_fuse(a: BranchOutput, b: BranchOutput):
    """Concatenate two branch feature maps along channels, ``a`` first."""
    fa, fb = a.features, b.features
    if fa.shape[0] != fb.shape[0] or fa.shape[2:] != fb.shape[2:]:
        raise FusionError(f"cannot fuse feature maps of shapes {fa.shape} and {fb.shape}")
    return F.concat_channels(fa, fb)


class ChannelAttention(Module):
    """Per-channel non-negative gates computed from pooled statistics.

    gates = relu(dense(relu(bn(dense(gap(x)))))), output = x * gates.
    The squeeze width is ``channels // reduction``.
    """

    def __init__(self, channels, rng, reduction=8):
        if channels % reduction:
            raise ConfigurationError(
                f"attention needs channels divisible by {reduction}, got {channels}"
            )
        hidden = channels // reduction
        self.channels = channels
        self.squeeze = Dense(channels, hidden, rng, bias=False)
        self.bn = BatchNorm(hidden)
        self.excite = Dense(hidden, channels, rng)
        # start near the neutral gate so no channel begins dead
        self.excite.weight.data *= 0.1
        self.excite.bias.data[:] = 1.0

    def gates(self, x):
        s = F.global_avg_pool(x)
        z = F.relu(self.bn(self.squeeze(s)))
        return F.relu(self.excite(z))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"attention expects {self.channels} channels, got {x.shape[1]}")
        return F.channel_scale(x, self.gates(x))

    def set_neutral(self):
        """Make every gate exactly 1 regardless of input."""
        self.excite.weight.data[:] = 0.0
        self.excite.bias.data[:] = 1.0


class ClassificationHead(Module):
    """GAP -> dropout -> dense; returns logits."""

    def __init__(self, channels, num_classes, rng, dropout=0.5):
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError("head dropout must lie in [0, 1)")
        self.dropout = dropout
        self.fc = Dense(channels, num_classes, rng)

    def forward(self, x, rng=None):
        h = F.global_avg_pool(x)
        h = F.dropout(h, self.dropout, self.training, rng)
        return self.fc(h)


class MANETL(Module):
    """Two-branch attention network (or a single-branch ablation variant).

    ``forward`` returns ``(logits, aux_logits)``; auxiliary logits are only
    produced in training mode.
    """

    def __init__(self, config, seed=0):
        if config.num_classes < 1:
            raise ConfigurationError("num_classes must be set before building a model")
        self.config = config
        rng = np.random.default_rng(seed)
        self.inception = None
        self.residual = None
        if config.variant in ("ensemble", "inception"):
            self.inception = InceptionBranch(config, rng)
        if config.variant in ("ensemble", "residual"):
            self.residual = ResidualBranch(config, rng)
        channels = config.fused_channels
        self.attention = ChannelAttention(channels, rng, config.attention_reduction)
        self.head = ClassificationHead(channels, config.num_classes, rng, config.head_dropout)
        self.dropout_rng = np.random.default_rng(seed)

    def features(self, x, rng=None):
        """Fused (or single-branch) feature map plus auxiliary logits."""
        outputs = []
        if self.inception is not None:
            outputs.append(self.inception(x, rng))
        if self.residual is not None:
            outputs.append(self.residual(x, rng))
        if len(outputs) == 2:
            fused = ensemble_fuse(*outputs)
        else:
            fused = outputs[0].features
        aux = [logits for out in outputs for logits in out.aux_logits]
        return fused, aux

    def forward(self, x, rng=None):
        rng = self.dropout_rng if rng is None else rng
        fused, aux = self.features(x, rng)
        attended = self.attention(fused)
        return self.head(attended, rng), aux


def total_loss(logits, aux_logits, labels, aux_weight=0.3):
    """Main cross-entropy plus ``aux_weight`` times each auxiliary cross-entropy."""
    loss = F.cross_entropy(logits, labels)
    for aux in aux_logits:
        loss = loss + F.cross_entropy(aux, labels) * aux_weight
    return loss
