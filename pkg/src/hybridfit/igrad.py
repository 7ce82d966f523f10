"""Differentiating refined proposals with respect to the predicted points.

A refined proposal is a local minimum x* of the fit distance, viewed as a
function of the stacked predicted-point coordinates theta.  Because the
gradient vanishes at x*, perturbing theta moves the minimum by
dx*/dtheta = -H^{-1} M, where H is the Hessian in the box parameters and M
the mixed second derivative.  That Jacobian chains into the squared
parameter-alignment loss between each refined proposal and its nearest
ground-truth box, giving the loss gradient over all prediction coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fitfunc import (
    Assignment,
    FitConfig,
    PrimitiveSet,
    assignment,
    distance_gradient,
    distance_hessian,
)
from .geometry import N_PARAMS, OrientedBox, primitive_jacobian, wrap_angle_diff

_MIN_EIG = 1e-12


class DegenerateMinimumError(RuntimeError):
    """The Hessian at the minimum is singular or indefinite beyond the damping budget.

    Typically means the minimum is under-constrained, e.g. a box held by a
    single center prediction leaves its scales and yaw flat.
    """

    def __init__(self, message: str, smallest_eigenvalue: float, condition: float):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue
        self.condition = condition


@dataclass(frozen=True, eq=False)
class ImplicitJacobian:
    """Sensitivity of a local minimum to the predicted-point coordinates.

    matrix has shape (7, 3 * n_predictions): rows are the box parameters of
    the minimum, columns the flattened prediction coordinates in entry order.
    """

    matrix: np.ndarray
    condition_estimate: float


def param_residual(x_star: OrientedBox, x_gt: OrientedBox) -> np.ndarray:
    """7-vector parameter difference with the yaw component wrapped to (-pi, pi]."""
    d = x_star.params() - x_gt.params()
    d[6] = wrap_angle_diff(d[6])
    return d


def lm_loss(x_star: OrientedBox, x_gt: OrientedBox) -> float:
    """Squared parameter distance between a refined proposal and a target box."""
    d = param_residual(x_star, x_gt)
    return float(d @ d)


def mixed_second_derivative(
    preds: PrimitiveSet, box: OrientedBox, cfg: FitConfig
) -> tuple[np.ndarray, bool]:
    """d^2 F / (d box-params d prediction-coords), shape (7, 3*len(preds)).

    At fixed assignment each matched prediction contributes -2*beta*J_i^T to
    its own 3-column block, where J_i is the Jacobian of its matched
    constraint point; unmatched (truncated) predictions contribute zero.
    """
    assign = assignment(preds, box, cfg)
    jac = primitive_jacobian(box)
    out = np.zeros((N_PARAMS, 3 * len(preds)))
    for k, m in enumerate(assign.matched):
        if m is None:
            continue
        beta = cfg.beta(preds.entries[k].kind)
        out[:, 3 * k : 3 * k + 3] = -2.0 * beta * jac[m].T
    return out, assign.at_boundary


def implicit_jacobian(
    preds: PrimitiveSet, box_star: OrientedBox, cfg: FitConfig, grad_tol: float = 1e-6
) -> ImplicitJacobian:
    """dx*/dtheta = -H^{-1} M at a local minimum box_star.

    H is regularized by eps*I with eps = 1e-9*trace(H)/7 before the solve;
    if the smallest eigenvalue is still below 1e-12 the minimum is reported
    as degenerate instead of silently returning garbage.
    """
    grad, _ = distance_gradient(preds, box_star, cfg)
    gnorm = float(np.max(np.abs(grad)))
    if gnorm >= grad_tol:
        raise ValueError(f"box is not a local minimum: gradient inf-norm {gnorm:.3e}")
    hess, _ = distance_hessian(preds, box_star, cfg)
    mixed, _ = mixed_second_derivative(preds, box_star, cfg)
    eps = 1e-9 * max(float(np.trace(hess)), 0.0) / N_PARAMS
    damped = hess + eps * np.eye(N_PARAMS)
    eigvals = np.linalg.eigvalsh(damped)
    smallest = float(eigvals[0])
    largest = float(eigvals[-1])
    if smallest < _MIN_EIG:
        cond = np.inf if smallest <= 0 else largest / smallest
        raise DegenerateMinimumError(
            f"Hessian at the minimum is degenerate (smallest eigenvalue {smallest:.3e}, "
            f"condition {cond:.3e}); the proposal is under-constrained",
            smallest_eigenvalue=smallest,
            condition=cond,
        )
    matrix = -np.linalg.solve(damped, mixed)
    return ImplicitJacobian(matrix, max(largest / smallest, 1.0))


def lf_gradient(
    pairs: list[tuple[OrientedBox, OrientedBox, ImplicitJacobian]],
) -> np.ndarray:
    """Gradient of the summed alignment loss over all prediction coordinates.

    Each (refined, ground-truth, jacobian) pair contributes
    2*(x* - x_gt)^T * dx*/dtheta; all pairs must share the prediction set so
    the Jacobians have equal width.
    """
    if not pairs:
        return np.zeros(0)
    width = pairs[0][2].matrix.shape[1]
    total = np.zeros(width)
    for x_star, x_gt, jac in pairs:
        if jac.matrix.shape[1] != width:
            raise ValueError("all Jacobians in one loss must share the prediction set")
        total += 2.0 * (param_residual(x_star, x_gt) @ jac.matrix)
    return total


def match_gt_to_minima(
    gt: list[OrientedBox], minima: list[OrientedBox]
) -> list[tuple[int, int]]:
    """For each ground-truth box, the index of the nearest minimum by center.

    Many-to-one pairings are allowed.  An empty minima list yields an empty
    pairing with a warning.
    """
    if not minima:
        warnings.warn("no local minima available to match ground truth against")
        return []
    centers = np.stack([m.center for m in minima])
    out = []
    for i, g in enumerate(gt):
        d = np.linalg.norm(centers - g.center, axis=1)
        out.append((i, int(np.argmin(d))))
    return out
