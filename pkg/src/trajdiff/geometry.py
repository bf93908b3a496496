"""Rotations, camera unprojection, and farthest point sampling.

All operations are pure functions over numpy arrays; nothing here holds
mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadCount, DegenerateRotation, NotARotation, ShapeMismatch

IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# Lane layout of a flattened action: 3 location + 6 rotation + 1 open flag.
LOC_LANES = slice(0, 3)
ROT_LANES = slice(3, 9)
ACTION_LANES = 10


@dataclass(frozen=True)
class Action:
    """One end-effector command.

    loc is in workspace units (meters), rot is the 6D continuous rotation
    representation (first two rotation-matrix columns), open_ is the binary
    gripper state.
    """

    loc: np.ndarray
    rot: np.ndarray = field(default_factory=lambda: IDENTITY_ROT6D.copy())
    open_: int = 1

    def __post_init__(self):
        loc = np.asarray(self.loc, dtype=np.float64)
        rot = np.asarray(self.rot, dtype=np.float64)
        if loc.shape != (3,) or rot.shape != (6,):
            raise ShapeMismatch(f"action lanes loc{loc.shape} rot{rot.shape}")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(rot))):
            raise ShapeMismatch("action lanes must be finite")
        if self.open_ not in (0, 1):
            raise ShapeMismatch(f"open flag must be 0 or 1, got {self.open_}")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "rot", rot)

    def lanes(self) -> np.ndarray:
        """Flatten to the 10-lane layout (loc, rot, open)."""
        out = np.empty(ACTION_LANES)
        out[LOC_LANES] = self.loc
        out[ROT_LANES] = self.rot
        out[9] = self.open_
        return out


@dataclass(frozen=True)
class Trajectory:
    """A horizon-T sequence of actions."""

    steps: tuple[Action, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ShapeMismatch("trajectory must contain at least one action")
        object.__setattr__(self, "steps", steps)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def lanes(self) -> np.ndarray:
        """(T, 10) lane matrix."""
        return np.stack([a.lanes() for a in self.steps])

    @staticmethod
    def from_lanes(lanes: np.ndarray) -> "Trajectory":
        lanes = np.asarray(lanes, dtype=np.float64)
        if lanes.ndim != 2 or lanes.shape[1] != ACTION_LANES:
            raise ShapeMismatch(f"lane matrix must be (T, {ACTION_LANES})")
        steps = tuple(
            Action(loc=row[LOC_LANES], rot=row[ROT_LANES], open_=int(row[9] > 0.5))
            for row in lanes
        )
        return Trajectory(steps)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a camera-to-world rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, camera-to-world
    translation: np.ndarray  # 3, camera origin in world coordinates

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeMismatch("focal lengths must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ShapeMismatch("extrinsics must be 3x3 rotation and 3-vector")
        if not _is_rotation(rot, tol=1e-6):
            raise NotARotation("camera extrinsic rotation is not special orthogonal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity(fx: float, fy: float, cx: float, cy: float) -> "CameraModel":
        return CameraModel(fx, fy, cx, cy, np.eye(3), np.zeros(3))

    def to_array(self) -> np.ndarray:
        """16-float encoding: fx fy cx cy, row-major rotation, translation."""
        return np.concatenate(
            [[self.fx, self.fy, self.cx, self.cy], self.rotation.ravel(), self.translation]
        )

    @staticmethod
    def from_array(a: np.ndarray) -> "CameraModel":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (16,):
            raise ShapeMismatch("camera array must have 16 entries")
        return CameraModel(a[0], a[1], a[2], a[3], a[4:13].reshape(3, 3), a[13:16])


@dataclass(frozen=True)
class FeaturedPointCloud:
    """World-space points with one feature vector per point."""

    positions: np.ndarray  # (n, 3)
    features: np.ndarray  # (n, d)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeMismatch("positions must be (n, 3)")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ShapeMismatch("features must be (n, d) matching positions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    def __len__(self) -> int:
        return self.positions.shape[0]


def _is_rotation(R: np.ndarray, tol: float) -> bool:
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def rot6d_to_matrix(r) -> np.ndarray:
    """Orthonormalize a 6D rotation representation into a rotation matrix.

    The two 3-vector halves are treated as the first two matrix columns and
    Gram-Schmidt orthonormalized; the third column is their cross product.

    Raises DegenerateRotation when the first column is near zero or the
    second is near-parallel to the first (residual norm <= 1e-9).
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (6,):
        raise ShapeMismatch(f"expected 6-vector, got shape {r.shape}")
    a, b = r[:3], r[3:]
    na = np.linalg.norm(a)
    if na <= 1e-9:
        raise DegenerateRotation("first column has near-zero norm")
    c0 = a / na
    resid = b - (c0 @ b) * c0
    nr = np.linalg.norm(resid)
    if nr <= 1e-9:
        raise DegenerateRotation("second column is parallel to the first")
    c1 = resid / nr
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


def matrix_to_rot6d(R) -> np.ndarray:
    """First two columns of a rotation matrix, concatenated."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeMismatch(f"expected 3x3 matrix, got shape {R.shape}")
    if not _is_rotation(R, tol=1e-6):
        raise NotARotation("input is not orthonormal with determinant +1")
    return np.concatenate([R[:, 0], R[:, 1]])


def unproject(depth_image, feature_image, camera: CameraModel) -> FeaturedPointCloud:
    """Lift a featured depth image into a world-space point cloud.

    Pixels with depth <= 0 are dropped (RGB-D sensors emit invalid zeros
    routinely). Pixel (u, v) at depth d maps to camera coordinates
    ((u-cx)d/fx, (v-cy)d/fy, d) and then through the extrinsics.
    """
    depth = np.asarray(depth_image, dtype=np.float64)
    feats = np.asarray(feature_image)
    if depth.ndim != 2:
        raise ShapeMismatch("depth image must be 2D")
    if feats.ndim != 3 or feats.shape[:2] != depth.shape:
        raise ShapeMismatch(
            f"feature image {feats.shape} does not match depth {depth.shape}"
        )
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    x = (u - camera.cx) * d / camera.fx
    y = (v - camera.cy) * d / camera.fy
    cam_pts = np.stack([x, y, d], axis=1)
    world = cam_pts @ camera.rotation.T + camera.translation
    return FeaturedPointCloud(world, feats[v, u])


def farthest_point_sample(positions, k: int, start: int) -> np.ndarray:
    """Greedy max-min Euclidean subsampling.

    Returns k distinct indices, the first equal to `start`; ties broken by
    lowest index (argmax on exact distances).
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ShapeMismatch("positions must be (n, 3)")
    n = pos.shape[0]
    if not (1 <= k <= n):
        raise BadCount(f"k={k} out of range for n={n}")
    if not (0 <= start < n):
        raise BadCount(f"start={start} out of range for n={n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dists = np.linalg.norm(pos - pos[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dists))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        dists = np.minimum(dists, np.linalg.norm(pos - pos[nxt], axis=1))
    return chosen
