"""Reverse-mode vs central-difference gradient comparison."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self):
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}

    def format(self):
        lines = [f"{name:40s} {err:.3e}" for name, err in sorted(self.errors.items())]
        lines.append(f"max relative error {self.max_error:.3e} "
                     f"(tolerance {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def block_relative_error(analytic, numeric, floor=1e-12):
    """max |a - n| scaled by the block's largest gradient magnitude.

    ``floor`` keeps blocks whose true gradient vanishes (e.g. attention key
    biases) from dividing round-off noise by zero.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(f, params, tolerance=1e-4, h=1e-5, names=None, max_entries=None, rng=None):
    """Compare ``f``'s reverse-mode gradient with central differences.

    Errors are per block, relative to the block's largest gradient entry but
    never to less than 1e-3 of the largest entry over all blocks.
    ``f`` is a zero-argument callable that reads ``params`` (a dict of
    Tensors) and returns a scalar Tensor. ``max_entries`` caps the number of
    probed coordinates per block (chosen with ``rng``); ``None`` probes all.
    """
    names = list(params) if names is None else list(names)
    for name in names:
        params[name].zero_grad()
    loss = f()
    loss.backward()
    analytic = {n: params[n].grad.copy() for n in names}
    global_scale = max(np.abs(a).max(initial=0.0) for a in analytic.values())
    floor = max(1e-3 * global_scale, 1e-12)
    report = GradCheckReport(tolerance)
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        report.errors[name] = block_relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
    return report
