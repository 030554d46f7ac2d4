"""Parameter containers built on the functional primitives."""

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Parameter


class Module:
    """Minimal layer container.

    Parameters, buffers and sub-modules are discovered from instance
    attributes in assignment order, which keeps parameter naming and
    checkpoint layout deterministic.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffer_names", ()):
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and buffer in place (used for float64 checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = dict(self.named_parameters())
        buffers = {}
        for prefix, m in self.named_modules():
            for name in getattr(m, "_buffer_names", ()):
                buffers[f"{prefix}.{name}" if prefix else name] = (m, name)
        missing = (set(expected) | set(buffers)) - set(state)
        unexpected = set(state) - set(expected) - set(buffers)
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in expected.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, (m, attr) in buffers.items():
            current = getattr(m, attr)
            setattr(m, attr, np.asarray(state[name]).astype(current.dtype, copy=True))


def fan_in_uniform(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    """He-uniform draw: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec, rng, bias=True):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.weight = Parameter(fan_in_uniform(
            rng, (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w), fan_in))
        # a bias feeding straight into batch norm is cancelled by it, so callers drop it
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(fan_in_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return F.dense(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization for (B, N) or (B, C, H, W) inputs."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, features):
        self.features = features
        self.gamma = Parameter(np.ones(features, dtype=DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(features, dtype=DEFAULT_DTYPE))
        self.running_mean = np.zeros(features, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(features, dtype=DEFAULT_DTYPE)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training)


def count_params(module):
    """Number of learnable scalars (weights, biases, batch-norm affine terms)."""
    return int(sum(p.data.size for p in module.parameters()))
