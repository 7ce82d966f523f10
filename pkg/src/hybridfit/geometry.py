"""Z-aligned oriented boxes and their geometric queries.

A box is parameterized by its center, full edge lengths, and a single yaw
angle about the world z axis.  Each box carries 19 constraint points (the
center, 6 face centers, and 12 edge midpoints) that the fitting pipeline
matches predictions against.  This module owns the box parameterization,
the canonical ordering of the 19 points, point-to-face/edge distances, and
volume IoU for pairs of z-aligned boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi

N_PRIMITIVES = 19
N_FACES = 6
N_EDGES = 12

# Parameter vector layout used by the optimizer and all derivatives:
# (cx, cy, cz, sx, sy, sz, yaw).
N_PARAMS = 7


class PrimitiveType(Enum):
    """The three kinds of constraint points a box exposes."""

    CENTER = "center"
    FACE = "face"
    EDGE = "edge"


_TYPE_COUNTS = {PrimitiveType.CENTER: 1, PrimitiveType.FACE: N_FACES, PrimitiveType.EDGE: N_EDGES}


@dataclass(frozen=True, eq=True)
class PrimitiveKind:
    """One of the 19 constraint-point slots: a type tag plus a per-type index."""

    tag: PrimitiveType
    index: int

    def __post_init__(self) -> None:
        limit = _TYPE_COUNTS[self.tag]
        if not 0 <= self.index < limit:
            raise ValueError(f"{self.tag.value} index {self.index} out of range [0, {limit})")


def _build_directions() -> np.ndarray:
    """Sign multipliers d such that point i sits at center + R(yaw)·(d_i ⊙ scales/2).

    Canonical order: index 0 is the center; faces 1..6 follow the axis order
    (+x, -x, +y, -y, +z, -z); edges 7..18 iterate the offset-axis pairs
    (x,y), (x,z), (y,z), and within each pair the sign combinations
    (+,+), (+,-), (-,+), (-,-).
    """
    rows = [(0.0, 0.0, 0.0)]
    for axis in range(3):
        for sign in (1.0, -1.0):
            d = [0.0, 0.0, 0.0]
            d[axis] = sign
            rows.append(tuple(d))
    for a, b in ((0, 1), (0, 2), (1, 2)):
        for sa in (1.0, -1.0):
            for sb in (1.0, -1.0):
                d = [0.0, 0.0, 0.0]
                d[a] = sa
                d[b] = sb
                rows.append(tuple(d))
    out = np.array(rows, dtype=np.float64)
    out.setflags(write=False)
    return out


PRIMITIVE_DIRECTIONS = _build_directions()

PRIMITIVE_KINDS: tuple[PrimitiveKind, ...] = (
    (PrimitiveKind(PrimitiveType.CENTER, 0),)
    + tuple(PrimitiveKind(PrimitiveType.FACE, i) for i in range(N_FACES))
    + tuple(PrimitiveKind(PrimitiveType.EDGE, i) for i in range(N_EDGES))
)

# Global index ranges per type, in canonical order.
TYPE_SLICES = {
    PrimitiveType.CENTER: slice(0, 1),
    PrimitiveType.FACE: slice(1, 1 + N_FACES),
    PrimitiveType.EDGE: slice(1 + N_FACES, N_PRIMITIVES),
}


def kind_of_index(i: int) -> PrimitiveKind:
    """The (type, per-type index) pair for global constraint-point index i."""
    return PRIMITIVE_KINDS[i]


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((a + math.pi) % TWO_PI - math.pi)


def wrap_angle_diff(d: float) -> float:
    """Wrap an angle difference to (-pi, pi]."""
    w = (d + math.pi) % TWO_PI - math.pi
    if w == -math.pi:
        w = math.pi
    return float(w)


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """A z-aligned oriented box.

    center and scales are in meters (scales are full edge lengths and must be
    positive); yaw is the rotation about z in radians, normalized to
    [-pi, pi) at construction.  class_label and score are optional detection
    metadata and do not affect any geometric query.
    """

    center: np.ndarray
    scales: np.ndarray
    yaw: float
    class_label: int | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        scales = np.asarray(self.scales, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(center)):
            raise ValueError("box center must be finite")
        if not (np.all(np.isfinite(scales)) and np.all(scales > 0.0)):
            raise ValueError(f"box scales must be positive, got {scales}")
        if not math.isfinite(self.yaw):
            raise ValueError("box yaw must be finite")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        center.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def rotation(self) -> np.ndarray:
        """World-from-local rotation matrix about z."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def params(self) -> np.ndarray:
        """The 7-vector (center, scales, yaw) the optimizer works on."""
        return np.concatenate([self.center, self.scales, [self.yaw]])

    def volume(self) -> float:
        return float(np.prod(self.scales))

    def with_params(self, params: np.ndarray) -> "OrientedBox":
        """A copy with new geometric parameters, keeping label and score."""
        p = np.asarray(params, dtype=np.float64).reshape(N_PARAMS)
        return replace(self, center=p[:3], scales=p[3:6], yaw=float(p[6]))

    def footprint(self) -> np.ndarray:
        """The 4 xy corners of the box footprint, counterclockwise."""
        half = 0.5 * self.scales[:2]
        corners = np.array(
            [[half[0], half[1]], [-half[0], half[1]], [-half[0], -half[1]], [half[0], -half[1]]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + self.center[:2]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the (closed) box."""
        local = self.to_local(points)
        return np.all(np.abs(local) <= 0.5 * self.scales + 0.0, axis=-1)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """World points mapped into the box's local frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.center) @ self.rotation()


def box_from_params(
    params: np.ndarray, class_label: int | None = None, score: float | None = None
) -> OrientedBox:
    p = np.asarray(params, dtype=np.float64).reshape(N_PARAMS)
    return OrientedBox(p[:3], p[3:6], float(p[6]), class_label=class_label, score=score)


def box_to_dict(box: OrientedBox) -> dict:
    """JSON-ready mapping: {center, scales, yaw, class?, score?}."""
    out = {
        "center": [float(v) for v in box.center],
        "scales": [float(v) for v in box.scales],
        "yaw": float(box.yaw),
    }
    if box.class_label is not None:
        out["class"] = int(box.class_label)
    if box.score is not None:
        out["score"] = float(box.score)
    return out


def box_from_dict(obj: dict) -> OrientedBox:
    return OrientedBox(
        np.array(obj["center"], dtype=np.float64),
        np.array(obj["scales"], dtype=np.float64),
        float(obj["yaw"]),
        class_label=None if obj.get("class") is None else int(obj["class"]),
        score=None if obj.get("score") is None else float(obj["score"]),
    )


# ---------------------------------------------------------------------------
# The 19 constraint points and their derivatives.
# ---------------------------------------------------------------------------


def primitive_positions(box: OrientedBox) -> np.ndarray:
    """(19, 3) world positions of the box's constraint points, canonical order."""
    offsets = PRIMITIVE_DIRECTIONS * (0.5 * box.scales)
    return box.center + offsets @ box.rotation().T


def primitive_locations(box: OrientedBox) -> list[tuple[PrimitiveKind, np.ndarray]]:
    """The 19 (kind, position) pairs in canonical order."""
    pos = primitive_positions(box)
    return [(PRIMITIVE_KINDS[i], pos[i]) for i in range(N_PRIMITIVES)]


def _rotation_derivatives(yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of the rotation matrix w.r.t. yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    d1 = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    d2 = np.array([[-c, s, 0.0], [-s, -c, 0.0], [0.0, 0.0, 0.0]])
    return d1, d2


def primitive_jacobian(box: OrientedBox) -> np.ndarray:
    """(19, 3, 7) derivatives of every constraint point w.r.t. the box params.

    Positions are affine in the center, linear in the scales at fixed yaw,
    and smooth in yaw, so the Jacobian is exact.
    """
    rot = box.rotation()
    drot, _ = _rotation_derivatives(box.yaw)
    offsets = PRIMITIVE_DIRECTIONS * (0.5 * box.scales)
    jac = np.zeros((N_PRIMITIVES, 3, N_PARAMS))
    jac[:, :, :3] = np.eye(3)
    # d p / d s_j = R[:, j] * d_ij / 2
    jac[:, :, 3:6] = 0.5 * np.einsum("kj,ij->ikj", rot, PRIMITIVE_DIRECTIONS)
    jac[:, :, 6] = offsets @ drot.T
    return jac


def primitive_curvature(box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    """Second derivatives of the constraint points.

    Returns (d2p_dyaw2, d2p_ds_dyaw) with shapes (19, 3) and (19, 3, 3),
    where d2p_ds_dyaw[i, :, j] = d^2 p_i / (d s_j d yaw).  All remaining
    second derivatives vanish.
    """
    drot, ddrot = _rotation_derivatives(box.yaw)
    offsets = PRIMITIVE_DIRECTIONS * (0.5 * box.scales)
    d2_yaw = offsets @ ddrot.T
    d2_s_yaw = 0.5 * np.einsum("kj,ij->ikj", drot, PRIMITIVE_DIRECTIONS)
    return d2_yaw, d2_s_yaw


# ---------------------------------------------------------------------------
# Point-to-surface queries.
# ---------------------------------------------------------------------------

# Face f lies on axis FACE_AXIS[f] at sign FACE_SIGN[f]; the remaining two
# axes span the bounded rectangle.
FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
FACE_SIGN = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])

# Edge e is pinned on the two OFFSET axes and free along EDGE_FREE_AXIS[e].
EDGE_OFFSET_AXES = np.array([(a, b) for a, b in ((0, 1), (0, 2), (1, 2)) for _ in range(4)])
EDGE_OFFSET_SIGNS = np.array([(sa, sb) for _ in range(3) for sa in (1.0, -1.0) for sb in (1.0, -1.0)])
EDGE_FREE_AXIS = np.array([3 - a - b for a, b in ((0, 1), (0, 2), (1, 2)) for _ in range(4)])


def _face_closest_points(local: np.ndarray, half: np.ndarray) -> np.ndarray:
    """(n, 6, 3) closest point on each bounded face rectangle, local frame."""
    n = local.shape[0]
    targets = np.repeat(np.clip(local, -half, half)[:, None, :], N_FACES, axis=1)
    targets[:, np.arange(N_FACES), FACE_AXIS] = FACE_SIGN * half[FACE_AXIS]
    assert targets.shape == (n, N_FACES, 3)
    return targets


def _edge_closest_points(local: np.ndarray, half: np.ndarray) -> np.ndarray:
    """(n, 12, 3) closest point on each bounded edge segment, local frame."""
    n = local.shape[0]
    targets = np.repeat(np.clip(local, -half, half)[:, None, :], N_EDGES, axis=1)
    rows = np.arange(N_EDGES)
    targets[:, rows, EDGE_OFFSET_AXES[:, 0]] = EDGE_OFFSET_SIGNS[:, 0] * half[EDGE_OFFSET_AXES[:, 0]]
    targets[:, rows, EDGE_OFFSET_AXES[:, 1]] = EDGE_OFFSET_SIGNS[:, 1] * half[EDGE_OFFSET_AXES[:, 1]]
    assert targets.shape == (n, N_EDGES, 3)
    return targets


def face_distances(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """(n, 6) Euclidean distances from points to the box's bounded faces."""
    local = box.to_local(points)
    targets = _face_closest_points(local, 0.5 * box.scales)
    return np.linalg.norm(local[:, None, :] - targets, axis=2)


def edge_distances(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """(n, 12) Euclidean distances from points to the box's bounded edges."""
    local = box.to_local(points)
    targets = _edge_closest_points(local, 0.5 * box.scales)
    return np.linalg.norm(local[:, None, :] - targets, axis=2)


def point_face_distance(point: np.ndarray, box: OrientedBox) -> tuple[int, float]:
    """Index of the nearest bounded face and the distance to it.

    Ties go to the lowest face index.
    """
    d = face_distances(np.asarray(point, dtype=np.float64).reshape(1, 3), box)[0]
    idx = int(np.argmin(d))
    return idx, float(d[idx])


def point_edge_distance(point: np.ndarray, box: OrientedBox) -> tuple[int, float]:
    """Index of the nearest bounded edge segment and the distance to it.

    Ties go to the lowest edge index.
    """
    d = edge_distances(np.asarray(point, dtype=np.float64).reshape(1, 3), box)[0]
    idx = int(np.argmin(d))
    return idx, float(d[idx])


# ---------------------------------------------------------------------------
# Volume IoU for z-aligned boxes.
# ---------------------------------------------------------------------------


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a convex CCW polygon."""
    output = list(subject)
    m = len(clip)
    for k in range(m):
        if not output:
            break
        a = clip[k]
        b = clip[(k + 1) % m]
        edge = b - a
        inputs = output
        output = []
        sides = [edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) for p in inputs]
        n = len(inputs)
        for i in range(n):
            p, q = inputs[i - 1], inputs[i]
            sp, sq = sides[i - 1], sides[i]
            if sq >= 0.0:
                if sp < 0.0:
                    t = sp / (sp - sq)
                    output.append(p + t * (q - p))
                output.append(q)
            elif sp >= 0.0:
                t = sp / (sp - sq)
                output.append(p + t * (q - p))
    return np.array(output) if output else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _box_sort_key(box: OrientedBox) -> tuple:
    return (tuple(box.center), tuple(box.scales), box.yaw)


def iou3d(a: OrientedBox, b: OrientedBox) -> float:
    """Volume IoU of two z-aligned oriented boxes.

    The xy footprints are intersected exactly by convex polygon clipping and
    combined with the z-interval overlap.  Arguments are ordered canonically
    first so the result is exactly symmetric.
    """
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    inter_2d = _polygon_area(_clip_convex(a.footprint(), b.footprint()))
    if inter_2d <= 0.0:
        return 0.0
    za0, za1 = a.center[2] - 0.5 * a.scales[2], a.center[2] + 0.5 * a.scales[2]
    zb0, zb1 = b.center[2] - 0.5 * b.scales[2], b.center[2] + 0.5 * b.scales[2]
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    va, vb = a.volume(), b.volume()
    inter = min(inter_2d * dz, va, vb)
    return float(inter / (va + vb - inter))
