"""Proposal seeding, local minimization of the fit distance, and dedup.

Initial proposals are seeded at every predicted center point.  Each proposal
is then driven to a local minimum of the truncated-L2 distance by a damped
Newton method (Levenberg-style diagonal damping with an adaptive multiplier,
falling back to gradient descent when the damped system cannot be solved).
The active assignment is re-derived after every accepted step, so the
optimizer tracks the piecewise structure of the objective.  Distinct local
minima are collected by greedy parameter-space clustering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitfunc import FitConfig, PrimitiveSet, distance_gradient, distance_hessian, distance_value
from .geometry import N_PARAMS, OrientedBox, PrimitiveType, box_from_params

_LAMBDA_MAX = 1e12
_LAMBDA_MIN = 1e-12


class RefinementError(RuntimeError):
    """Raised when the objective turns non-finite during refinement."""


@dataclass(frozen=True)
class RefineTrace:
    """Record of one refinement run.

    iterations counts accepted steps; boundary_warnings counts iterations at
    which the derivative evaluation sat near an assignment tie or truncation
    boundary.  final_value is never above the value at the initial box.
    """

    iterations: int
    initial: OrientedBox
    final: OrientedBox
    final_value: float
    converged: bool
    boundary_warnings: int


def seed_proposals(
    preds: PrimitiveSet, default_scales: np.ndarray, default_yaw: float = 0.0
) -> list[OrientedBox]:
    """One proposal per predicted center point, in input order."""
    scales = np.asarray(default_scales, dtype=np.float64).reshape(3)
    if not np.all(scales > 0):
        raise ValueError("default scales must be positive")
    return [
        OrientedBox(e.position, scales, default_yaw)
        for e in preds
        if e.kind is PrimitiveType.CENTER
    ]


def _clamp(params: np.ndarray, min_scale: float) -> np.ndarray:
    out = params.copy()
    out[3:6] = np.maximum(out[3:6], min_scale)
    return out


def refine_proposal(init: OrientedBox, preds: PrimitiveSet, cfg: FitConfig) -> RefineTrace:
    """Minimize the fit distance from an initial box; monotone descent."""
    free = np.ones(N_PARAMS, dtype=bool)
    if cfg.freeze_yaw:
        free[6] = False

    x = _clamp(init.params(), cfg.min_scale)

    def value(p: np.ndarray) -> float:
        v = distance_value(preds, box_from_params(p), cfg)
        if not np.isfinite(v):
            raise RefinementError(f"non-finite objective at parameters {p}")
        return v

    f = value(x)
    lam = cfg.lambda_init
    iters = 0
    boundary = 0
    converged = False

    for _ in range(cfg.max_iters):
        box = box_from_params(x)
        grad, flag = distance_gradient(preds, box, cfg)
        boundary += int(flag)
        if np.max(np.abs(grad[free]), initial=0.0) < cfg.tol_g:
            converged = True
            break
        hess, _ = distance_hessian(preds, box, cfg)
        gf = grad[free]
        hf = hess[np.ix_(free, free)]

        accepted = False
        x_new = x
        f_new = f
        while lam <= _LAMBDA_MAX:
            try:
                step_f = np.linalg.solve(hf + lam * np.eye(len(gf)), -gf)
            except np.linalg.LinAlgError:
                step_f = -gf / (np.abs(hf).max() + lam)
            step = np.zeros(N_PARAMS)
            step[free] = step_f
            candidate = _clamp(x + step, cfg.min_scale)
            f_cand = value(candidate)
            if f_cand < f:
                x_new, f_new = candidate, f_cand
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break

        step_inf = float(np.max(np.abs(x_new - x)))
        x, f = x_new, f_new
        iters += 1
        lam = max(lam / 3.0, _LAMBDA_MIN)
        if step_inf < cfg.tol_x:
            converged = True
            break

    final = box_from_params(x, class_label=init.class_label, score=init.score)
    return RefineTrace(iters, init, final, f, converged, boundary)


def dedup_indices(
    refined: list[OrientedBox],
    values: list[float],
    tol_c: float = 0.05,
    tol_s: float = 0.05,
    tol_yaw: float = 0.05,
) -> list[int]:
    """Indices of the distinct proposals, ordered by ascending value.

    Two proposals are duplicates when their centers and scales differ by less
    than tol_c / tol_s (Euclidean) and their yaws by less than tol_yaw.  The
    lowest-value member of each cluster survives.  Boxes identical only up to
    the yaw -> yaw + pi (with x/y scale swap) symmetry are NOT merged.
    """
    if len(refined) != len(values):
        raise ValueError("refined boxes and values must be parallel lists")
    order = sorted(range(len(refined)), key=lambda i: (values[i], i))
    kept: list[int] = []
    for i in order:
        box = refined[i]
        duplicate = False
        for j in kept:
            other = refined[j]
            if (
                np.linalg.norm(box.center - other.center) < tol_c
                and np.linalg.norm(box.scales - other.scales) < tol_s
                and abs(box.yaw - other.yaw) < tol_yaw
            ):
                duplicate = True
                break
        if not duplicate:
            kept.append(i)
    return kept


def dedup_proposals(
    refined: list[OrientedBox],
    values: list[float],
    tol_c: float = 0.05,
    tol_s: float = 0.05,
    tol_yaw: float = 0.05,
) -> list[OrientedBox]:
    """The distinct refined proposals, ordered by ascending value."""
    return [refined[i] for i in dedup_indices(refined, values, tol_c, tol_s, tol_yaw)]
