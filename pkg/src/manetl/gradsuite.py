"""Finite-difference checks over every primitive and the composed network.

Each check builds a float64 problem, projects the op output onto a fixed random
tensor to get a scalar, and compares analytic against central-difference
gradients. Inputs to kinked ops (relu, max-pool) are drawn away from their
kinks so the central difference is valid.
"""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .branches import (AuxClassifier, InceptionBlock, InceptionBlockSpec, InceptionBranch,
                       ResidualBlock, ResidualBlockSpec, ResidualBranch)
from .config import ModelConfig
from .gradcheck import finite_diff_check
from .model import MANETL, ChannelAttention, ClassificationHead, total_loss
from .tensor import Parameter, Tensor

PRIMITIVE_TOL = 1e-4
COMPOSED_TOL = 1e-3
FD_STEP = 1e-3
# deep ReLU stacks have kinks everywhere; a small step keeps both probes on one side
COMPOSED_STEP = 1e-6

TINY_CONFIG = ModelConfig(num_classes=4, variant="ensemble", input_size=16, stem_channels=4,
                          branch_channels=8, aux_channels=4, aux_hidden=8)


@dataclass
class CheckResult:
    name: str
    report: object
    tol: float

    @property
    def passed(self):
        return self.report.max_error < self.tol


def _param(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.sign(data) * (np.abs(data) + low)
    return Parameter(data, dtype=np.float64)


def _projected(out, proj):
    return (out * Tensor(proj, dtype=np.float64)).sum()


def _check(name, build, params, names, rng, tol=PRIMITIVE_TOL, h=None, max_elements=None):
    h = FD_STEP if h is None else h
    out = build()
    proj = rng.standard_normal(out.shape)
    if out.ndim == 0:
        report = finite_diff_check(build, params, h=h, tol=tol, names=names,
                                   max_elements=max_elements, rng=rng)
    else:
        report = finite_diff_check(lambda: _projected(build(), proj), params, h=h, tol=tol,
                                   names=names, max_elements=max_elements, rng=rng)
    return CheckResult(name, report, tol)


def _distinct(rng, shape, gap=0.05):
    """Values with pairwise gaps of ``gap`` so max-pool argmaxes never flip under +-h."""
    n = int(np.prod(shape))
    return Parameter((rng.permutation(n) * gap - n * gap / 2).reshape(shape), dtype=np.float64)


def primitive_checks(seed=0):
    rng = np.random.default_rng(seed)
    results = []

    x = _param(rng, 2, 3, 5, 5)
    w = _param(rng, 4, 3, 3, 3)
    b = _param(rng, 4)
    results.append(_check("conv2d", lambda: F.conv2d(x, w, b, stride=2, padding=1),
                          [x, w, b], ["input", "weight", "bias"], rng))
    w1 = _param(rng, 3, 3, 1, 1)
    b1 = _param(rng, 3)
    results.append(_check("conv2d_1x1", lambda: F.conv2d(x, w1, b1, stride=2),
                          [x, w1, b1], ["input", "weight", "bias"], rng))

    xd = _param(rng, 4, 5)
    wd = _param(rng, 3, 5)
    bd = _param(rng, 3)
    results.append(_check("dense", lambda: F.dense(xd, wd, bd), [xd, wd, bd],
                          ["input", "weight", "bias"], rng))

    xb = _param(rng, 6, 4)
    gamma = _param(rng, 4)
    beta = _param(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)
    results.append(_check("batch_norm_train",
                          lambda: F.batch_norm(xb, gamma, beta, rm.copy(), rv.copy(), True),
                          [xb, gamma, beta], ["input", "gamma", "beta"], rng))
    rm_eval, rv_eval = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    results.append(_check("batch_norm_eval",
                          lambda: F.batch_norm(xb, gamma, beta, rm_eval, rv_eval, False),
                          [xb, gamma, beta], ["input", "gamma", "beta"], rng))
    xb4 = _param(rng, 3, 2, 3, 3)
    g2, b2 = _param(rng, 2), _param(rng, 2)
    results.append(_check("batch_norm_spatial",
                          lambda: F.batch_norm(xb4, g2, b2, np.zeros(2), np.ones(2), True),
                          [xb4, g2, b2], ["input", "gamma", "beta"], rng))

    xr = _param(rng, 3, 4, low=0.05)
    results.append(_check("relu", lambda: F.relu(xr), [xr], ["input"], rng))

    xp = _param(rng, 2, 2, 7, 7)
    results.append(_check("avg_pool2d", lambda: F.avg_pool2d(xp, 3, 2), [xp], ["input"], rng))
    xm = _distinct(rng, (2, 2, 6, 6))
    results.append(_check("max_pool2d", lambda: F.max_pool2d(xm, 3, 1, 1), [xm], ["input"], rng))
    results.append(_check("global_avg_pool", lambda: F.global_avg_pool(xp), [xp], ["input"], rng))

    xs = _param(rng, 3, 5)
    results.append(_check("softmax", lambda: F.softmax(xs), [xs], ["input"], rng))

    xdrop = _param(rng, 4, 6)
    results.append(_check("dropout",
                          lambda: F.dropout(xdrop, 0.7, True, np.random.default_rng(7)),
                          [xdrop], ["input"], rng))

    ca, cb = _param(rng, 2, 2, 3, 3), _param(rng, 2, 3, 3, 3)
    results.append(_check("concat_channels", lambda: F.concat_channels(ca, cb), [ca, cb],
                          ["a", "b"], rng))

    gates = _param(rng, 2, 3)
    results.append(_check("channel_scale", lambda: F.channel_scale(cb, gates), [cb, gates],
                          ["input", "gates"], rng))

    logits = _param(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    results.append(_check("cross_entropy", lambda: F.cross_entropy(logits, labels), [logits],
                          ["logits"], rng))

    xa, xb2 = _param(rng, 3, 4), _param(rng, 1, 4)
    results.append(_check("add_mul", lambda: (xa + xb2) * xb2 * 0.5, [xa, xb2], ["a", "b"], rng))
    return results


def _module_check(name, module, forward, rng, max_elements=None, tol=COMPOSED_TOL):
    module.astype(np.float64)
    named = list(module.named_parameters())
    # zero-initialised biases put a ReLU input exactly on its kink wherever
    # the preceding activations are all zero; nudge them off it
    for pname, p in named:
        if pname.endswith("bias") or pname.endswith("beta"):
            p.data += rng.uniform(0.05, 0.15, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    return _check(name, forward, [p for _, p in named], [n for n, _ in named], rng, tol=tol,
                  h=COMPOSED_STEP, max_elements=max_elements)


def _input(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def composed_checks(seed=0, config=TINY_CONFIG, max_elements=4):
    """Layer compositions up to the full network, all in float64."""
    rng = np.random.default_rng(seed)
    results = []
    init = np.random.default_rng(seed + 1000)

    x = _input(rng, 3, 2, 6, 6)
    labels3 = rng.integers(0, 3, 3)
    w = _param(rng, 3, 2, 3, 3)
    b = _param(rng, 3)
    results.append(_check(
        "conv2d+cross_entropy",
        lambda: F.cross_entropy(F.global_avg_pool(F.conv2d(x, w, b, 1, 1)), labels3),
        [w, b], ["weight", "bias"], rng, tol=PRIMITIVE_TOL, h=COMPOSED_STEP))

    block = InceptionBlock(InceptionBlockSpec(2, 2, 2, 2, 1, 2, 2), init)
    results.append(_module_check("inception_block", block, lambda: block(x), rng, max_elements))

    res = ResidualBlock(ResidualBlockSpec(2, 4, 2), init).train()
    results.append(_module_check("residual_block", res, lambda: res(x), rng, max_elements))

    aux = AuxClassifier(2, 6, 3, init, reduce_channels=3, hidden=5, dropout=0.7).train()
    results.append(_module_check(
        "aux_classifier", aux, lambda: aux(x, np.random.default_rng(3)), rng, max_elements))

    xin = _input(rng, 3, 1, config.input_size, config.input_size)
    ib = InceptionBranch(config, init).eval()
    results.append(_module_check("inception_branch", ib, lambda: ib(xin).features, rng,
                                 max_elements))
    rb = ResidualBranch(config, init).train()
    results.append(_module_check("residual_branch", rb, lambda: rb(xin).features, rng,
                                 max_elements))

    feats = _input(rng, 4, 16, 3, 3)
    att = ChannelAttention(16, init).train()
    results.append(_module_check("channel_attention", att, lambda: att(feats), rng, max_elements))
    head = ClassificationHead(16, 4, init, 0.5).train()
    results.append(_module_check(
        "classification_head", head, lambda: head(feats, np.random.default_rng(5)), rng,
        max_elements))

    model = MANETL(config, seed=seed).train()
    labels = rng.integers(0, config.num_classes, 3)

    def full():
        logits, aux_logits = model(xin, rng=np.random.default_rng(11))
        return total_loss(logits, aux_logits, labels, 0.3)

    results.append(_module_check("manetl_full", model, full, rng, max_elements))
    return results
