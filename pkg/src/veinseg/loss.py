"""Smoothed two-term dice coefficient and the derived training loss.

The coefficient is the sum of a foreground-overlap ratio and a
background-overlap ratio, each smoothed by eps in numerator and
denominator; at perfect binary agreement and large pixel counts each
ratio approaches 1/2. The loss is one minus the coefficient.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Node, add, div, mul, reduce_sum, sub
from .errors import DomainError, ShapeError
from .tensor import Tensor4, full


def _check_dice_inputs(p: Node, y: Node) -> None:
    if p.dims != y.dims:
        raise ShapeError(f"dims mismatch: predictions {p.dims} vs labels {y.dims}")
    pv, yv = p.data, y.data
    if not ((pv >= 0) & (pv <= 1)).all():
        raise DomainError("predictions must lie in [0, 1]")
    if not ((yv == 0) | (yv == 1)).all():
        raise DomainError("labels must be binary (0 or 1)")


def dice_coefficient(p: Node, y: Node, eps: float = 1.0,
                     classical: bool = False) -> Node:
    """Tape-recorded dice coefficient of predictions `p` against binary
    labels `y`.

    Default form (two smoothed terms):
        (sum(p*y) + eps) / (sum(p + y) + eps)
        + (sum((1-p)*(1-y)) + eps) / (sum(2 - p - y) + eps)

    `classical=True` switches to the single-term 2*overlap/total form.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    _check_dice_inputs(p, y)
    tape = p.tape
    dtype = p.value.dtype
    ones = tape.constant(full(p.dims, 1.0, dtype=dtype))
    eps_s = tape.constant(full((1, 1, 1, 1), eps, dtype=dtype))

    overlap = reduce_sum(mul(p, y))
    total = reduce_sum(add(p, y))
    if classical:
        two = tape.constant(full((1, 1, 1, 1), 2.0, dtype=dtype))
        return div(add(mul(two, overlap), eps_s), add(total, eps_s))

    term1 = div(add(overlap, eps_s), add(total, eps_s))
    not_p = sub(ones, p)
    not_y = sub(ones, y)
    bg_overlap = reduce_sum(mul(not_p, not_y))
    bg_total = reduce_sum(add(not_p, not_y))
    term2 = div(add(bg_overlap, eps_s), add(bg_total, eps_s))
    return add(term1, term2)


def dice_loss(p: Node, y: Node, eps: float = 1.0, classical: bool = False) -> Node:
    """1 - dice_coefficient, minimized during training."""
    dcl = dice_coefficient(p, y, eps=eps, classical=classical)
    one = p.tape.constant(full((1, 1, 1, 1), 1.0, dtype=p.value.dtype))
    return sub(one, dcl)


def dice_coefficient_value(p: np.ndarray, y: np.ndarray, eps: float = 1.0) -> float:
    """Plain-array evaluation of the default coefficient (no tape)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t1 = (float((p * y).sum()) + eps) / (float((p + y).sum()) + eps)
    t2 = (float(((1 - p) * (1 - y)).sum()) + eps) / (float((2 - p - y).sum()) + eps)
    return t1 + t2
