"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError

NOISE_MARGIN = 1e3


@dataclass
class GradCheckReport:
    """Outcome of :func:`finite_diff_check`.

    ``errors`` maps each parameter name to its relative error: the largest
    absolute analytic/numeric discrepancy divided by the largest gradient
    magnitude seen for that parameter. The divisor never drops below
    ``NOISE_MARGIN`` times the resolution of a central difference,
    ``eps * max(1, |f|) / h``; gradients under that floor cannot be told
    apart from zero.
    """

    errors: dict = field(default_factory=dict)
    tol: float = 1e-4
    checked: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tol

    def failures(self):
        return {name: err for name, err in self.errors.items() if not err < self.tol}

    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _evaluate(f):
    value = f()
    scalar = float(np.asarray(value.data if hasattr(value, "data") else value))
    if not np.isfinite(scalar):
        raise NumericalError("finite_diff_check: objective returned a non-finite value")
    return value, scalar


def finite_diff_check(f, params, h=1e-3, tol=1e-4, max_elements=None, rng=None, names=None):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar :class:`~manetl.tensor.Tensor`
    built from ``params``; it must be deterministic (reset any dropout
    generator inside it). Parameters should be float64 for a trustworthy check.
    ``max_elements`` caps how many entries of each parameter are perturbed;
    the entries are drawn from ``rng`` without replacement.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss, base = _evaluate(f)
    loss.backward()
    floor = max(1e-10, NOISE_MARGIN * np.finfo(np.float64).eps * max(1.0, abs(base)) / h)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    for name, p, grad in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(indices))
        for k, idx in enumerate(indices):
            orig = flat[idx]
            flat[idx] = orig + h
            _, up = _evaluate(f)
            flat[idx] = orig - h
            _, down = _evaluate(f)
            flat[idx] = orig
            numeric[k] = (up - down) / (2.0 * h)
        exact = grad.reshape(-1)[indices].astype(np.float64)
        scale = max(np.abs(exact).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(exact - numeric).max(initial=0.0)
        report.errors[name] = float(diff / max(scale, floor))
        report.checked[name] = len(indices)
    for p in params:
        p.grad = None
    return report
