"""RGB-D rasterization of the tabletop from fixed and gripper-mounted views.

Both cameras look straight down with a long focal length, so the image is
near-orthographic while staying exactly consistent with pinhole
unprojection: each object footprint is tested against the pixel rays at
the object's own top plane, and depth is the camera distance to that
plane. Deterministic by construction.
"""

from __future__ import annotations

import numpy as np

from ..geometry import CameraModel
from .world import (
    BLOCK_H,
    BLOCK_HALF,
    BUTTON_RADIUS,
    HANDLE_HALF,
    SLIDER_Y_HALF,
    WORKSPACE,
    ZONE_RADIUS,
    World,
)

IMG = 32
FIXED_HEIGHT = 2.0
GRIP_HEIGHT = 0.8  # camera sits this far above the gripper
FOCAL = 64.0
CX = CY = IMG / 2.0

TABLE_COLOR = (0.35, 0.35, 0.35)
VOID_COLOR = (0.10, 0.10, 0.10)
BLOCK_COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.10),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.90, 0.90, 0.10),
    "magenta": (0.85, 0.10, 0.85),
    "cyan": (0.10, 0.85, 0.85),
    "purple": (0.55, 0.15, 0.90),
}
ZONE_COLOR = (0.72, 0.72, 0.72)
TRACK_COLOR = (0.22, 0.22, 0.22)
HANDLE_COLOR = (0.95, 0.55, 0.05)
BUTTON_OFF = (0.08, 0.08, 0.08)
BUTTON_ON = (0.98, 0.98, 0.98)
GRIPPER_OPEN = (0.0, 0.0, 0.0)
GRIPPER_CLOSED = (0.55, 0.55, 0.55)
GRIPPER_HALF = 0.022
GRIPPER_TOP = 0.02  # marker plane above the gripper point

# Thin overlay planes so flat markers paint in a fixed order.
ZONE_TOP = 0.001
TRACK_TOP = 0.002
BUTTON_TOP = 0.010
HANDLE_TOP = 0.030

_U = np.arange(IMG, dtype=np.float64)
_PIX_U, _PIX_V = np.meshgrid(_U, _U, indexing="xy")


def camera_for(world: World, camera_kind: str) -> CameraModel:
    if camera_kind == "fixed":
        origin = np.array([WORKSPACE / 2, WORKSPACE / 2, FIXED_HEIGHT])
    elif camera_kind == "gripper":
        g = world.gripper
        origin = np.array([g.x, g.y, g.z + GRIP_HEIGHT])
    else:
        raise KeyError(f"unknown camera kind {camera_kind!r}")
    # 180-degree rotation about x: looking straight down, det +1.
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return CameraModel(FOCAL, FOCAL, CX, CY, rot, origin)


def _plane_xy(cam: CameraModel, z_plane: float):
    """World x, y where each pixel ray crosses the given z plane."""
    rng = cam.translation[2] - z_plane
    x = cam.translation[0] + (_PIX_U - cam.cx) * rng / cam.fx
    y = cam.translation[1] - (_PIX_V - cam.cy) * rng / cam.fy
    return x, y, rng


def render(world: World, camera_kind: str):
    """Rasterize to (rgb float32 (32,32,3), depth float32 (32,32), camera)."""
    cam = camera_for(world, camera_kind)
    rgb = np.empty((IMG, IMG, 3), dtype=np.float64)
    # Table plane with a dark void outside the workspace.
    x0, y0, rng0 = _plane_xy(cam, 0.0)
    inside = (x0 >= 0) & (x0 <= WORKSPACE) & (y0 >= 0) & (y0 <= WORKSPACE)
    rgb[:] = VOID_COLOR
    rgb[inside] = TABLE_COLOR
    depth = np.full((IMG, IMG), rng0, dtype=np.float64)

    def paint_rect(cx, cy, half_x, half_y, top, color):
        x, y, d = _plane_xy(cam, top)
        mask = (np.abs(x - cx) <= half_x) & (np.abs(y - cy) <= half_y)
        rgb[mask] = color
        depth[mask] = d

    def paint_disc(cx, cy, radius, top, color):
        x, y, d = _plane_xy(cam, top)
        mask = (x - cx) ** 2 + (y - cy) ** 2 <= radius**2
        rgb[mask] = color
        depth[mask] = d

    layers = []
    if world.zone is not None:
        layers.append((ZONE_TOP, "disc", (world.zone.x, world.zone.y, ZONE_RADIUS, ZONE_TOP, ZONE_COLOR)))
    if world.slider is not None:
        s = world.slider
        track_cx = (s.lo + s.hi) / 2
        track_half = (s.hi - s.lo) / 2 + HANDLE_HALF
        layers.append((TRACK_TOP, "rect", (track_cx, s.y, track_half, SLIDER_Y_HALF, TRACK_TOP, TRACK_COLOR)))
        layers.append((HANDLE_TOP, "rect", (s.x, s.y, HANDLE_HALF, HANDLE_HALF, HANDLE_TOP, HANDLE_COLOR)))
    if world.button is not None:
        b = world.button
        layers.append((BUTTON_TOP, "disc", (b.x, b.y, BUTTON_RADIUS, BUTTON_TOP, BUTTON_ON if b.pressed else BUTTON_OFF)))
    for blk in world.blocks:
        layers.append((blk.z + BLOCK_H, "rect", (blk.x, blk.y, BLOCK_HALF, BLOCK_HALF, blk.z + BLOCK_H, BLOCK_COLORS[blk.color])))
    g = world.gripper
    layers.append((
        g.z + GRIPPER_TOP, "rect",
        (g.x, g.y, GRIPPER_HALF, GRIPPER_HALF, g.z + GRIPPER_TOP,
         GRIPPER_OPEN if g.open_ else GRIPPER_CLOSED),
    ))

    for _, kind, args in sorted(layers, key=lambda t: t[0]):
        (paint_rect if kind == "rect" else paint_disc)(*args)

    return rgb.astype(np.float32), depth.astype(np.float32), cam
