"""Truncated-L2 distance between predicted constraint points and a box.

For a candidate box, each predicted point of type t contributes
``beta_t * min(min_i ||c - p_i||^2 - delta, 0)`` where the inner minimum
runs over the box's constraint points of the same type.  The value is
always <= 0; predictions farther than sqrt(delta) from every same-type
constraint point are truncated and contribute nothing.  This module
evaluates that function and its first and second derivatives with respect
to the 7 box parameters, holding the active prediction-to-point assignment
fixed (the assignment is piecewise constant in the parameters, so this is
the correct local derivative away from ties and truncation boundaries).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    N_PARAMS,
    N_PRIMITIVES,
    PRIMITIVE_KINDS,
    TYPE_SLICES,
    OrientedBox,
    PrimitiveType,
    primitive_curvature,
    primitive_jacobian,
    primitive_positions,
)


@dataclass(frozen=True, eq=False)
class Primitive:
    """A single predicted constraint point."""

    kind: PrimitiveType
    position: np.ndarray
    id: int
    source: int | None = None  # index of the originating box, when known

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(pos)):
            raise ValueError("primitive position must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True, eq=False)
class PrimitiveSet:
    """An ordered collection of predicted constraint points with unique ids."""

    entries: tuple[Primitive, ...]
    _by_type: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("primitive ids must be unique within a set")
        by_type = {}
        for t in PrimitiveType:
            idx = np.array([i for i, e in enumerate(entries) if e.kind is t], dtype=np.intp)
            pos = (
                np.stack([entries[i].position for i in idx])
                if len(idx)
                else np.empty((0, 3))
            )
            by_type[t] = (idx, pos)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_by_type", by_type)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def of_type(self, t: PrimitiveType) -> tuple[np.ndarray, np.ndarray]:
        """(entry indices, positions) of all predictions of type t."""
        return self._by_type[t]

    @classmethod
    def exact(cls, box: OrientedBox, id_start: int = 0, source: int | None = None) -> "PrimitiveSet":
        """The 19 exact constraint points of a box, as a prediction set."""
        pos = primitive_positions(box)
        return cls(
            tuple(
                Primitive(PRIMITIVE_KINDS[i].tag, pos[i], id_start + i, source=source)
                for i in range(N_PRIMITIVES)
            )
        )

    def to_json_obj(self) -> list[dict]:
        out = []
        for e in self.entries:
            rec = {"type": e.kind.value, "pos": [float(v) for v in e.position], "id": int(e.id)}
            if e.source is not None:
                rec["source"] = int(e.source)
            out.append(rec)
        return out

    @classmethod
    def from_json_obj(cls, obj: list[dict]) -> "PrimitiveSet":
        return cls(
            tuple(
                Primitive(
                    PrimitiveType(rec["type"]),
                    np.array(rec["pos"], dtype=np.float64),
                    int(rec["id"]),
                    source=None if rec.get("source") is None else int(rec["source"]),
                )
                for rec in obj
            )
        )


@dataclass(frozen=True)
class FitConfig:
    """Weights and truncation for the distance function, plus optimizer knobs.

    delta is a squared distance: the default 0.09 m^2 corresponds to a 0.3 m
    capture radius.  Setting freeze_yaw pins the yaw during refinement.
    """

    beta_center: float = 1.0
    beta_face: float = 1.0
    beta_edge: float = 1.0
    delta: float = 0.09
    tol_g: float = 1e-8
    tol_x: float = 1e-8
    max_iters: int = 100
    min_scale: float = 0.02
    lambda_init: float = 1e-3
    freeze_yaw: bool = False
    boundary_eps: float = 1e-9

    def __post_init__(self) -> None:
        betas = (self.beta_center, self.beta_face, self.beta_edge)
        if any(b < 0 for b in betas) or not any(b > 0 for b in betas):
            raise ValueError("type weights must be nonnegative with at least one positive")
        if self.delta < 0:
            raise ValueError("truncation delta must be nonnegative")
        if self.min_scale <= 0 or self.max_iters < 0:
            raise ValueError("invalid optimizer settings")

    def beta(self, t: PrimitiveType) -> float:
        return {
            PrimitiveType.CENTER: self.beta_center,
            PrimitiveType.FACE: self.beta_face,
            PrimitiveType.EDGE: self.beta_edge,
        }[t]


@dataclass(frozen=True)
class Assignment:
    """The active prediction-to-constraint-point map at a given box.

    matched[k] is the global constraint-point index (0..18) for prediction k,
    or None when its best same-type squared distance is >= delta (truncated).
    residuals[k] is that best squared distance (inf when the box exposes no
    point of the prediction's type, which cannot happen for full boxes).
    at_boundary is set when any residual lies within boundary_eps of delta or
    two candidate matches are within boundary_eps of tying, i.e. when the
    fixed-assignment derivatives are only one-sided.
    """

    matched: tuple[int | None, ...]
    residuals: tuple[float, ...]
    at_boundary: bool


def assignment(preds: PrimitiveSet, box: OrientedBox, cfg: FitConfig) -> Assignment:
    """Nearest same-type constraint point per prediction, lowest index on ties."""
    obj = primitive_positions(box)
    matched: list[int | None] = [None] * len(preds)
    residuals = [math.inf] * len(preds)
    boundary = False
    for t in PrimitiveType:
        idx, pos = preds.of_type(t)
        if len(idx) == 0:
            continue
        sl = TYPE_SLICES[t]
        cand = obj[sl]
        d2 = np.sum((pos[:, None, :] - cand[None, :, :]) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        best_val = d2[np.arange(len(idx)), best]
        if np.any(np.abs(best_val - cfg.delta) < cfg.boundary_eps):
            boundary = True
        if d2.shape[1] > 1:
            part = np.partition(d2, 1, axis=1)
            if np.any((part[:, 1] - part[:, 0] < cfg.boundary_eps) & (part[:, 0] < cfg.delta)):
                boundary = True
        for row, k in enumerate(idx):
            residuals[k] = float(best_val[row])
            if best_val[row] < cfg.delta:
                matched[k] = sl.start + int(best[row])
    return Assignment(tuple(matched), tuple(residuals), boundary)


def distance_value(preds: PrimitiveSet, box: OrientedBox, cfg: FitConfig) -> float:
    """Value of the truncated-L2 distance function; always <= 0."""
    obj = primitive_positions(box)
    total = 0.0
    for t in PrimitiveType:
        _, pos = preds.of_type(t)
        if len(pos) == 0:
            continue
        cand = obj[TYPE_SLICES[t]]
        d2 = np.sum((pos[:, None, :] - cand[None, :, :]) ** 2, axis=2)
        best = d2.min(axis=1)
        total += cfg.beta(t) * float(np.minimum(best - cfg.delta, 0.0).sum())
    return total


def _grouped(preds: PrimitiveSet, assign: Assignment):
    """Matched prediction indices grouped by their constraint-point index."""
    groups: dict[int, list[int]] = {}
    for k, m in enumerate(assign.matched):
        if m is not None:
            groups.setdefault(m, []).append(k)
    return groups


def distance_gradient(
    preds: PrimitiveSet, box: OrientedBox, cfg: FitConfig
) -> tuple[np.ndarray, bool]:
    """Gradient of distance_value w.r.t. (center, scales, yaw) at fixed assignment.

    Returns (7-vector, boundary flag).  The flag mirrors Assignment.at_boundary;
    the gradient is still returned there using the deterministic tie-break.
    """
    assign = assignment(preds, box, cfg)
    obj = primitive_positions(box)
    jac = primitive_jacobian(box)
    grad = np.zeros(N_PARAMS)
    for i, ks in _grouped(preds, assign).items():
        t = _kind_type(i)
        resid = len(ks) * obj[i] - sum(preds.entries[k].position for k in ks)
        grad += 2.0 * cfg.beta(t) * (jac[i].T @ resid)
    return grad, assign.at_boundary


def distance_hessian(
    preds: PrimitiveSet, box: OrientedBox, cfg: FitConfig
) -> tuple[np.ndarray, bool]:
    """Hessian of distance_value at fixed assignment (symmetric 7x7).

    Each active quadratic term contributes its Gauss-Newton part J^T J plus
    the curvature of the constraint point contracted with the residual.
    """
    assign = assignment(preds, box, cfg)
    obj = primitive_positions(box)
    jac = primitive_jacobian(box)
    d2_yaw, d2_s_yaw = primitive_curvature(box)
    hess = np.zeros((N_PARAMS, N_PARAMS))
    for i, ks in _grouped(preds, assign).items():
        t = _kind_type(i)
        w = 2.0 * cfg.beta(t)
        resid = len(ks) * obj[i] - sum(preds.entries[k].position for k in ks)
        hess += w * len(ks) * (jac[i].T @ jac[i])
        hess[6, 6] += w * float(resid @ d2_yaw[i])
        cross = resid @ d2_s_yaw[i]
        hess[3:6, 6] += w * cross
        hess[6, 3:6] += w * cross
    return hess, assign.at_boundary


def _kind_type(i: int) -> PrimitiveType:
    return PRIMITIVE_KINDS[i].tag
