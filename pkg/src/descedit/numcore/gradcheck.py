"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tensor, backward


class NondeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for e in self.entries)

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean([e.rel_error for e in self.entries]))

    def __str__(self) -> str:
        return (f"gradcheck: {len(self.entries)} scalars, max rel err {self.max_rel_error:.3e}, "
                f"mean rel err {self.mean_rel_error:.3e}")


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    samples: int = 100,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled scalars.

    Only non-frozen entries are sampled, uniformly over their scalars.
    ``params`` is restored to its original tensors afterwards.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    first = f(params)
    second = f(params)
    if not np.array_equal(first.data, second.data):
        raise NondeterministicError(
            f"f returned {first.item()!r} then {second.item()!r} for identical parameters")

    params.zero_grad()
    backward(f(params))
    names = [n for n in params if not params.is_frozen(n)]
    if not names:
        raise ValueError("no trainable parameters to check")
    sizes = np.array([params[n].size for n in names])
    analytic = {n: params[n].grad.reshape(-1).copy() for n in names}

    report = GradCheckReport()
    flat_ids = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    for flat in flat_ids:
        k = int(np.searchsorted(bounds, flat, side="right"))
        name = names[k]
        idx = int(flat - (bounds[k] - sizes[k]))
        original = params[name]
        base = original.data.reshape(-1)

        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert[idx] += sign * h
            params.set(name, pert.reshape(original.shape))
            vals.append(f(params).item())
        params.restore(name, original)
        numeric = (vals[0] - vals[1]) / (2 * h)
        a = float(analytic[name][idx])
        report.entries.append(GradCheckEntry(name, idx, a, numeric, relative_error(a, numeric)))
    return report
