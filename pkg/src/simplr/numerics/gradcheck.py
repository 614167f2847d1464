"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GradcheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoordinateError:
    input: int  # position among the inputs that require grad
    index: int  # flat coordinate
    analytic: float
    numeric: float
    relative: float
    step: float = 1e-5
    kink: bool = False  # one-sided slopes still disagree at the smallest step


ROUNDOFF = 1e-13  # conservative relative round-off of one scalar loss evaluation


def _probe(fn, inputs, flat, i, step):
    orig = flat[i]
    flat[i] = orig + step
    fp = float(fn(*inputs).data)
    flat[i] = orig - step
    fm = float(fn(*inputs).data)
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise GradcheckError(f"non-finite evaluation at coordinate {i}")
    return fp, fm


def _asymmetric(fp, fm, f0, step, floor) -> tuple[bool, float, float]:
    """(slopes disagree, slope scale, round-off estimate) for one central difference."""
    right, left = (fp - f0) / step, (f0 - fm) / step
    scale = max(abs(right), abs(left), floor)
    # smooth: the slopes differ by O(step * curvature) plus round-off
    noise = ROUNDOFF * max(abs(f0), 1.0) / step
    return abs(right - left) > 1e-3 * scale + noise, scale, noise


def gradient_errors(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    robust: bool = False,
) -> list[CoordinateError]:
    """Per-coordinate comparison of analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor.  Every input with
    ``requires_grad`` is perturbed in place, one coordinate at a time, and
    restored.  Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    With ``max_coords`` set, a random subset of coordinates per input is
    checked instead of all of them.

    ``robust`` adds two refinements for composed, piecewise-smooth functions:

    * The two one-sided slopes are compared.  When they disagree the interval
      straddles a point of non-differentiability (a bilinear texel line, a
      clamp), so the step shrinks by 10x, then 100x.  A coordinate still
      asymmetric at the smallest step, or whose round-off there swamps its
      slope, is marked ``kink``.
    * A slope too small for the central difference to resolve to 1e-4
      against round-off is re-estimated by Richardson extrapolation at a
      100x larger step, whose truncation error is fourth order.
    """
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise GradcheckError(f"function must be scalar-valued, got shape {out.shape}")
    out.backward()
    f0 = float(out.data)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
    for t in targets:
        t.grad = None

    rng = rng or np.random.default_rng(0)
    records = []
    for which, (t, ga) in enumerate(zip(targets, analytic)):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            a = float(ga.reshape(-1)[i])
            kink = False
            for attempt, step in enumerate((h, h / 10, h / 100) if robust else (h,)):
                fp, fm = _probe(fn, inputs, flat, i, step)
                num = (fp - fm) / (2 * step)
                if not robust:
                    break
                kink, scale, noise = _asymmetric(fp, fm, f0, step, floor)
                if attempt > 0 and noise > 1e-2 * scale:
                    kink = True  # a shrunken step only settles the question while round-off stays small
                if not kink:
                    break
            if robust and not kink and step == h and abs(num) > floor:
                resolution = ROUNDOFF * max(abs(f0), 1.0) / h
                if resolution > 1e-5 * abs(num):
                    big = 100 * h
                    fp2, fm2 = _probe(fn, inputs, flat, i, big)
                    fp1, fm1 = _probe(fn, inputs, flat, i, big / 2)
                    if not (_asymmetric(fp2, fm2, f0, big, floor)[0] or _asymmetric(fp1, fm1, f0, big / 2, floor)[0]):
                        d2, d1 = (fp2 - fm2) / (2 * big), (fp1 - fm1) / big
                        num, step = (4 * d1 - d2) / 3, big
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            records.append(CoordinateError(which, int(i), a, num, rel, step, kink))
    return records


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error over :func:`gradient_errors`."""
    records = gradient_errors(fn, inputs, h, floor, max_coords, rng)
    return max((r.relative for r in records), default=0.0)


def split_kinks(records: Sequence[CoordinateError]) -> tuple[list[CoordinateError], list[CoordinateError]]:
    """(smooth coordinates, coordinates sitting on a kink)."""
    return [r for r in records if not r.kink], [r for r in records if r.kink]


def split_flat(records: Sequence[CoordinateError], zero: float = 1e-12
               ) -> tuple[list[CoordinateError], list[CoordinateError]]:
    """Separate coordinates whose analytic gradient is exactly flat (|g| <= zero).

    Composite networks contain parameters the loss is invariant to (a bias
    ahead of a per-channel normalization, the key bias of softmax attention).
    Their central differences are pure round-off, so the relative measure is
    meaningless there; callers bound those coordinates in absolute terms.
    """
    flat = [r for r in records if abs(r.analytic) <= zero]
    return [r for r in records if abs(r.analytic) > zero], flat
