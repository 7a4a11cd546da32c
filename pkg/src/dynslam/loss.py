"""Colour, depth, free-space, SDF and zero-offset losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TERMS = ("color", "depth", "space", "sdf", "zero")


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    depth: float = 0.5
    space: float = 2.0
    sdf: float = 5.0
    zero: float = 10.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * getattr(self, n) for n in TERMS))


@dataclass
class LossBreakdown:
    total: ad.Var
    parts: dict[str, ad.Var]
    n_space: int = 0
    n_trunc: int = 0
    starved: bool = False

    def values(self) -> dict[str, float]:
        out = {"total": float(self.total.value)}
        out.update({k: float(v.value) for k, v in self.parts.items()})
        return out


def _zero(tape):
    return tape.const(0.0)


def color_depth_loss(C: ad.Var, D: ad.Var, gt_color: np.ndarray, gt_depth: np.ndarray):
    """Mean per-ray L1 colour error (channels summed) and mean L1 depth error
    over rays with valid ground-truth depth.

    Returns ``(L_color, L_depth, starved)``.
    """
    tape = C.tape
    n = C.value.shape[0]
    if n == 0:
        return _zero(tape), _zero(tape), True
    l_color = ad.sum(ad.abs(C - tape.const(gt_color))) * (1.0 / n)
    valid = np.flatnonzero(np.asarray(gt_depth) > 0)
    if len(valid) == 0:
        return l_color, _zero(tape), False
    diff = ad.take_rows(D, valid) - tape.const(np.asarray(gt_depth)[valid])
    l_depth = ad.sum(ad.abs(diff)) * (1.0 / len(valid))
    return l_color, l_depth, False


def classify_samples(sample_depth: np.ndarray, gt_depth: np.ndarray, tr: float):
    """Free-space (in front of the truncation band) and truncation-band masks.

    Samples behind the band, or on rays without valid depth, are in neither.
    """
    gt_depth = np.asarray(gt_depth)
    has = gt_depth > 0
    gap = gt_depth - np.asarray(sample_depth)
    space = has & (gap > tr)
    trunc = has & (np.abs(gap) <= tr)
    return space, trunc


def balance_weights(n_space: int, n_trunc: int) -> tuple[float, float]:
    """``(beta_space, beta_sdf)``: each set is weighted by the other set's share."""
    total = n_space + n_trunc
    if total == 0:
        return 0.0, 0.0
    return 1.0 - n_space / total, 1.0 - n_trunc / total


def space_sdf_loss(sdf: ad.Var, sample_depth: np.ndarray, gt_depth: np.ndarray, tr: float):
    """Free-space loss pulling s to +tr and SDF loss pulling s to the
    truncated signed distance, each rebalanced by the other set's share.

    Returns ``(L_space, L_sdf, n_space, n_trunc)``.
    """
    tape = sdf.tape
    space, trunc = classify_samples(sample_depth, gt_depth, tr)
    n_space, n_trunc = int(space.sum()), int(trunc.sum())
    if n_space + n_trunc == 0:
        return _zero(tape), _zero(tape), 0, 0
    beta_space, beta_sdf = balance_weights(n_space, n_trunc)
    if n_space:
        s = ad.take_rows(sdf, np.flatnonzero(space))
        l_space = ad.sum(ad.square(s - tr)) * beta_space
    else:
        l_space = _zero(tape)
    if n_trunc:
        idx = np.flatnonzero(trunc)
        target = np.clip(np.asarray(gt_depth)[idx] - np.asarray(sample_depth)[idx], -tr, tr)
        s = ad.take_rows(sdf, idx)
        l_sdf = ad.sum(ad.square(s - tape.const(target))) * beta_sdf
    else:
        l_sdf = _zero(tape)
    return l_space, l_sdf, n_space, n_trunc


def zero_offset_loss(offset: ad.Var, background: np.ndarray) -> ad.Var:
    """Mean squared offset norm over samples on background (non-dynamic) rays."""
    tape = offset.tape
    idx = np.flatnonzero(background)
    if len(idx) == 0:
        return _zero(tape)
    sq = ad.sum(ad.square(ad.take_rows(offset, idx)))
    return sq * (1.0 / len(idx))


def total_loss(parts: dict[str, ad.Var], weights: LossWeights, n_space: int = 0, n_trunc: int = 0,
               starved: bool = False) -> LossBreakdown:
    for name in TERMS:
        v = float(parts[name].value)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is not finite ({v})")
    total = None
    for name in TERMS:
        term = parts[name] * getattr(weights, name)
        total = term if total is None else total + term
    return LossBreakdown(total, dict(parts), n_space, n_trunc, starved)


def frame_loss(result, rays, tr: float, weights: LossWeights) -> LossBreakdown:
    """All five terms for one rendered batch."""
    keep = np.flatnonzero(result.renderable)
    l_color, l_depth, starved = color_depth_loss(
        result.color, result.depth, rays.gt_color[keep], rays.gt_depth[keep]
    )
    gt_per_sample = rays.gt_depth[result.sample_ray]
    l_space, l_sdf, n_space, n_trunc = space_sdf_loss(result.sdf, result.sample_depth, gt_per_sample, tr)
    background = ~rays.in_dynamic_mask[result.sample_ray]
    l_zero = zero_offset_loss(result.offset, background)
    parts = {"color": l_color, "depth": l_depth, "space": l_space, "sdf": l_sdf, "zero": l_zero}
    return total_loss(parts, weights, n_space, n_trunc, starved)
