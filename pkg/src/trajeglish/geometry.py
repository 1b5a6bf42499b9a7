"""Pose algebra, oriented bounding boxes, and the mean corner-distance metric.

States are (x, y, heading) poses. Headings are always wrapped to (-pi, pi].
Box corners are returned in the fixed order (front-left, front-right,
rear-right, rear-left) so that corner-wise pairing between two boxes is
well defined.

Most functions come in two forms: a scalar form over :class:`AgentState`
and a vectorized ``*_arr`` form over ``(..., 3)`` float arrays, which the
tokenizer and rollout engine use on whole trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

TWO_PI = 2.0 * np.pi

# Corner offsets in box-local coordinates, in units of (length/2, width/2):
# front-left, front-right, rear-right, rear-left.
CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


class AgentClass(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


def wrap_angle(h):
    """Wrap angles (scalar or array) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(h, dtype=float), TWO_PI)


@dataclass(frozen=True)
class AgentState:
    """Pose of one agent at one timestep. Invalid states carry x=y=h=0."""

    x: float = 0.0
    y: float = 0.0
    h: float = 0.0
    valid: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h], dtype=float)

    @staticmethod
    def from_array(xyh, valid: bool = True) -> "AgentState":
        x, y, h = (float(v) for v in xyh)
        return AgentState(x, y, float(wrap_angle(h)), valid)


@dataclass(frozen=True)
class AgentMeta:
    """Dimensions and object class of one agent."""

    length: float
    width: float
    agent_class: AgentClass = AgentClass.VEHICLE

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(
                f"degenerate box: length={self.length}, width={self.width} (must be > 0)"
            )


def _require_valid(*states: AgentState) -> None:
    for s in states:
        if not s.valid:
            raise ValueError("operation on an invalid agent state")


def corners_arr(xyh: np.ndarray, length: float, width: float) -> np.ndarray:
    """Corners of oriented boxes.

    Args:
        xyh: (..., 3) array of poses.
        length, width: box dimensions in meters.

    Returns:
        (..., 4, 2) array of corner points in (FL, FR, RR, RL) order.
    """
    xyh = np.asarray(xyh, dtype=float)
    offsets = CORNER_SIGNS * np.array([length / 2.0, width / 2.0])  # (4, 2)
    c = np.cos(xyh[..., 2])
    s = np.sin(xyh[..., 2])
    # Rotate each offset by h and translate by (x, y).
    rx = offsets[:, 0] * c[..., None] - offsets[:, 1] * s[..., None]
    ry = offsets[:, 0] * s[..., None] + offsets[:, 1] * c[..., None]
    out = np.stack([rx, ry], axis=-1)
    out += xyh[..., None, :2]
    return out


def corners(s: AgentState, m: AgentMeta) -> np.ndarray:
    """Corners of the oriented box of a valid state, shape (4, 2)."""
    _require_valid(s)
    return corners_arr(s.as_array(), m.length, m.width)


def corner_distance_arr(a_xyh: np.ndarray, b_xyh: np.ndarray, length, width) -> np.ndarray:
    """Mean L2 distance between ordered corners of two boxes, broadcast over leading dims."""
    ca = corners_arr(a_xyh, length, width)
    cb = corners_arr(b_xyh, length, width)
    return np.linalg.norm(ca - cb, axis=-1).mean(axis=-1)


def corner_distance(a: AgentState, b: AgentState, m: AgentMeta) -> float:
    """Mean corner distance between two boxes that share dimensions ``m``."""
    _require_valid(a, b)
    return float(corner_distance_arr(a.as_array(), b.as_array(), m.length, m.width))


def to_local_arr(frame_xyh: np.ndarray, xyh: np.ndarray) -> np.ndarray:
    """Express poses in the coordinate frame of ``frame_xyh``. Broadcasts."""
    frame_xyh = np.asarray(frame_xyh, dtype=float)
    xyh = np.asarray(xyh, dtype=float)
    c = np.cos(frame_xyh[..., 2])
    s = np.sin(frame_xyh[..., 2])
    dx = xyh[..., 0] - frame_xyh[..., 0]
    dy = xyh[..., 1] - frame_xyh[..., 1]
    out = np.empty(np.broadcast_shapes(frame_xyh.shape, xyh.shape))
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle(xyh[..., 2] - frame_xyh[..., 2])
    return out


def to_global_arr(frame_xyh: np.ndarray, local_xyh: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_local_arr`. Broadcasts."""
    frame_xyh = np.asarray(frame_xyh, dtype=float)
    local_xyh = np.asarray(local_xyh, dtype=float)
    c = np.cos(frame_xyh[..., 2])
    s = np.sin(frame_xyh[..., 2])
    out = np.empty(np.broadcast_shapes(frame_xyh.shape, local_xyh.shape))
    out[..., 0] = frame_xyh[..., 0] + c * local_xyh[..., 0] - s * local_xyh[..., 1]
    out[..., 1] = frame_xyh[..., 1] + s * local_xyh[..., 0] + c * local_xyh[..., 1]
    out[..., 2] = wrap_angle(frame_xyh[..., 2] + local_xyh[..., 2])
    return out


def to_local(frame: AgentState, s: AgentState) -> AgentState:
    """Rigid transform of ``s`` into the local frame of ``frame``."""
    _require_valid(frame)
    return AgentState.from_array(to_local_arr(frame.as_array(), s.as_array()), s.valid)


def to_global(frame: AgentState, s_local: AgentState) -> AgentState:
    """Rigid transform of a frame-local pose back to the global frame."""
    _require_valid(frame)
    return AgentState.from_array(
        to_global_arr(frame.as_array(), s_local.as_array()), s_local.valid
    )


def _project_interval(pts: np.ndarray, axis: np.ndarray):
    proj = pts @ axis
    return proj.min(), proj.max()


def boxes_overlap(a: AgentState, ma: AgentMeta, b: AgentState, mb: AgentMeta) -> bool:
    """Separating-axis test between two oriented rectangles.

    Touching boxes count as overlapping (no strict separation exists).
    """
    _require_valid(a, b)
    ca = corners(a, ma)
    cb = corners(b, mb)
    return _corners_overlap(ca, cb)


def _corners_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    # Candidate axes: the two edge normals of each rectangle.
    axes = np.empty((4, 2))
    axes[0] = ca[1] - ca[0]
    axes[1] = ca[3] - ca[0]
    axes[2] = cb[1] - cb[0]
    axes[3] = cb[3] - cb[0]
    for axis in axes:
        lo_a, hi_a = _project_interval(ca, axis)
        lo_b, hi_b = _project_interval(cb, axis)
        if hi_a < lo_b or hi_b < lo_a:
            return False
    return True


def pairwise_overlap_matrix(xyh: np.ndarray, lengths: np.ndarray, widths: np.ndarray,
                            valid: np.ndarray | None = None) -> np.ndarray:
    """Symmetric N x N boolean overlap matrix for one timestep (diagonal False).

    Invalid agents never overlap anything.
    """
    n = xyh.shape[0]
    if valid is None:
        valid = np.ones(n, dtype=bool)
    all_corners = [
        corners_arr(xyh[i], lengths[i], widths[i]) if valid[i] else None for i in range(n)
    ]
    out = np.zeros((n, n), dtype=bool)
    centers = xyh[:, :2]
    # Circumradius prefilter keeps the SAT loop off far-apart pairs.
    radii = 0.5 * np.hypot(lengths, widths)
    for i in range(n):
        if not valid[i]:
            continue
        for j in range(i + 1, n):
            if not valid[j]:
                continue
            if np.linalg.norm(centers[i] - centers[j]) > radii[i] + radii[j]:
                continue
            if _corners_overlap(all_corners[i], all_corners[j]):
                out[i, j] = out[j, i] = True
    return out
