"""Planar tabletop world: colored blocks, a button, a slider, a drop zone.

Worlds are immutable value objects; `step` returns a new world. Dynamics
are kinematic and fully deterministic: the gripper teleports toward the
commanded location with a bounded step length, open-gripper contact pushes
blocks and the slider handle, closing near a block grasps it, and a low
pass over the button toggles it (edge-triggered).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import Unachievable
from ..geometry import Action
from .tasks import DIRECTIONS, TARGET_COLORS, TaskSpec

# Workspace and object geometry (meters).
WORKSPACE = 1.0
Z_MAX = 0.30
MAX_STEP = 0.06
BLOCK_HALF = 0.05
BLOCK_H = 0.05
GRIP_RADIUS = 0.03
GRASP_RADIUS = 0.06
BUTTON_RADIUS = 0.05
PRESS_Z = 0.03
HANDLE_HALF = 0.04
SLIDER_Y_HALF = 0.03
ZONE_RADIUS = 0.08
HELD_DROP = 0.02  # held block rides this far below the gripper

# Success thresholds.
PUSH_THRESHOLD = 0.08
SLIDER_THRESHOLD = 0.10
LIFT_HEIGHT = 0.10

LAYOUT_IDS = ("A", "B", "C", "D")
DISTRACTOR_COLOR = {"A": "yellow", "B": "magenta", "C": "cyan", "D": "purple"}


@dataclass(frozen=True)
class Block:
    color: str
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True)
class Button:
    x: float
    y: float
    pressed: bool = False
    latched: bool = False


@dataclass(frozen=True)
class Slider:
    y: float
    lo: float
    hi: float
    x: float


@dataclass(frozen=True)
class Zone:
    x: float
    y: float


@dataclass(frozen=True)
class Gripper:
    x: float
    y: float
    z: float
    open_: int = 1
    held: Optional[str] = None


@dataclass(frozen=True)
class World:
    layout_id: str
    blocks: tuple[Block, ...]
    button: Optional[Button]
    slider: Optional[Slider]
    zone: Optional[Zone]
    gripper: Gripper
    clamped: bool = False

    def block(self, color: str) -> Block:
        for b in self.blocks:
            if b.color == color:
                return b
        raise KeyError(f"no {color!r} block in world")

    def proprio_lanes(self) -> np.ndarray:
        """Gripper state in action-lane layout (identity rotation)."""
        g = self.gripper
        return Action(loc=[g.x, g.y, g.z], open_=g.open_).lanes()


# Nominal object placements per layout; D is the held-out arrangement.
_LAYOUTS = {
    "A": dict(
        blocks={"red": (0.28, 0.25), "green": (0.50, 0.60), "blue": (0.72, 0.30),
                "yellow": (0.62, 0.45)},
        button=(0.12, 0.78), zone=(0.86, 0.70),
        slider=(0.90, 0.30, 0.70, 0.50), gripper=(0.50, 0.40),
    ),
    "B": dict(
        blocks={"red": (0.66, 0.55), "green": (0.30, 0.38), "blue": (0.50, 0.20),
                "magenta": (0.75, 0.25)},
        button=(0.85, 0.80), zone=(0.14, 0.62),
        slider=(0.90, 0.25, 0.65, 0.42), gripper=(0.45, 0.45),
    ),
    "C": dict(
        blocks={"red": (0.45, 0.32), "green": (0.70, 0.62), "blue": (0.28, 0.60),
                "cyan": (0.32, 0.20)},
        button=(0.88, 0.35), zone=(0.55, 0.78),
        slider=(0.90, 0.35, 0.75, 0.62), gripper=(0.55, 0.45),
    ),
    "D": dict(
        blocks={"red": (0.35, 0.50), "green": (0.62, 0.25), "blue": (0.55, 0.68),
                "purple": (0.25, 0.28)},
        button=(0.80, 0.60), zone=(0.15, 0.30),
        slider=(0.90, 0.28, 0.68, 0.36), gripper=(0.50, 0.42),
    ),
}

_BLOCK_X_RANGE = (0.22, 0.78)
_BLOCK_Y_RANGE = (0.16, 0.72)
_MIN_SEPARATION = 0.16


def reset_world(layout_id: str, rng: Optional[np.random.Generator] = None) -> World:
    """Fresh world for a layout; positions jittered when an rng is given.

    Jittered block placements are rejection-sampled to stay separated and
    leave pushing room on both sides.
    """
    if layout_id not in _LAYOUTS:
        raise KeyError(f"unknown layout {layout_id!r}")
    spec = _LAYOUTS[layout_id]
    blocks = []
    placed = []
    for color, (nx, ny) in spec["blocks"].items():
        x, y = nx, ny
        if rng is not None:
            for _ in range(40):
                x = float(np.clip(nx + rng.uniform(-0.05, 0.05), *_BLOCK_X_RANGE))
                y = float(np.clip(ny + rng.uniform(-0.05, 0.05), *_BLOCK_Y_RANGE))
                if all(abs(x - px) + abs(y - py) >= _MIN_SEPARATION for px, py in placed):
                    break
        placed.append((x, y))
        blocks.append(Block(color, x, y))
    bx, by = spec["button"]
    zx, zy = spec["zone"]
    sy, lo, hi, hx = spec["slider"]
    if rng is not None:
        bx += float(rng.uniform(-0.03, 0.03))
        by += float(rng.uniform(-0.03, 0.03))
        hx = float(np.clip(hx + rng.uniform(-0.06, 0.06),
                           lo + SLIDER_THRESHOLD + 0.03, hi - SLIDER_THRESHOLD - 0.03))
    gx, gy = spec["gripper"]
    return World(
        layout_id=layout_id,
        blocks=tuple(blocks),
        button=Button(bx, by),
        slider=Slider(sy, lo, hi, hx),
        zone=Zone(zx, zy),
        gripper=Gripper(gx, gy, 0.12, open_=1, held=None),
    )


def _clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def _push_out(cx, cy, px, py, half_x, half_y):
    """Minimal-translation push of a center (cx, cy) away from point (p)."""
    pen_x = half_x - abs(px - cx)
    pen_y = half_y - abs(py - cy)
    if pen_x <= 0.0 or pen_y <= 0.0:
        return cx, cy, False
    if pen_x <= pen_y:
        cx += pen_x if cx >= px else -pen_x
    else:
        cy += pen_y if cy >= py else -pen_y
    return cx, cy, True


def step(world: World, action: Action) -> World:
    """Advance one tick. Invalid targets are clamped (flagged, not errored)."""
    tx = _clamp(float(action.loc[0]), 0.0, WORKSPACE)
    ty = _clamp(float(action.loc[1]), 0.0, WORKSPACE)
    tz = _clamp(float(action.loc[2]), 0.0, Z_MAX)
    clamped = (tx, ty, tz) != tuple(float(v) for v in action.loc)

    g = world.gripper
    blocks = list(world.blocks)
    held = g.held
    new_open = int(action.open_)

    # Gripper open/close transitions happen before motion.
    if new_open == 0 and g.open_ == 1 and held is None:
        best, best_d = None, GRASP_RADIUS
        for i, b in enumerate(blocks):
            d = np.hypot(b.x - g.x, b.y - g.y)
            if d <= best_d and g.z <= b.z + BLOCK_H + 0.02:
                best, best_d = i, d
        if best is not None:
            held = blocks[best].color
    elif new_open == 1 and g.open_ == 0 and held is not None:
        i = next(i for i, b in enumerate(blocks) if b.color == held)
        blocks[i] = dataclasses.replace(blocks[i], z=0.0)
        held = None

    # Bounded teleport toward the target.
    delta = np.array([tx - g.x, ty - g.y, tz - g.z])
    dist = float(np.linalg.norm(delta))
    if dist > MAX_STEP:
        delta = delta * (MAX_STEP / dist)
    nx, ny, nz = g.x + delta[0], g.y + delta[1], g.z + delta[2]

    # Held block rides with the gripper.
    if held is not None:
        i = next(i for i, b in enumerate(blocks) if b.color == held)
        blocks[i] = dataclasses.replace(
            blocks[i], x=nx, y=ny, z=max(0.0, nz - HELD_DROP)
        )

    # Open-gripper contact pushes blocks resting on the table. Only lateral
    # entry pushes: a gripper already over the footprint straddles the block
    # (descending from above must not shove it aside).
    if new_open == 1 and nz <= BLOCK_H:
        for i, b in enumerate(blocks):
            if b.z > 0.0 or b.color == held:
                continue
            ex = BLOCK_HALF + GRIP_RADIUS
            # Strict interior test: a resolved push leaves the gripper exactly
            # on the boundary, which must count as outside for the next tick.
            if abs(g.x - b.x) < ex - 1e-9 and abs(g.y - b.y) < ex - 1e-9:
                continue
            bx2, by2, moved = _push_out(b.x, b.y, nx, ny, ex, ex)
            if moved:
                bx2 = _clamp(bx2, BLOCK_HALF, WORKSPACE - BLOCK_HALF)
                by2 = _clamp(by2, BLOCK_HALF, WORKSPACE - BLOCK_HALF)
                blocks[i] = dataclasses.replace(b, x=bx2, y=by2)

    # Slider handle is pushable along its track only; same lateral-entry rule.
    slider = world.slider
    if slider is not None and new_open == 1 and nz <= BLOCK_H:
        ex = HANDLE_HALF + GRIP_RADIUS
        ey = SLIDER_Y_HALF + GRIP_RADIUS
        prev_in = abs(g.x - slider.x) < ex - 1e-9 and abs(g.y - slider.y) < ey - 1e-9
        pen_x = ex - abs(nx - slider.x)
        pen_y = ey - abs(ny - slider.y)
        if not prev_in and pen_x > 0.0 and pen_y > 0.0:
            sx = slider.x + (pen_x if slider.x >= nx else -pen_x)
            slider = dataclasses.replace(slider, x=_clamp(sx, slider.lo, slider.hi))

    # Button toggles once per low entry into its disc.
    button = world.button
    if button is not None:
        inside = np.hypot(nx - button.x, ny - button.y) <= BUTTON_RADIUS and nz <= PRESS_Z
        if inside and not button.latched:
            button = dataclasses.replace(button, pressed=not button.pressed, latched=True)
        elif not inside and button.latched:
            button = dataclasses.replace(button, latched=False)

    return World(
        layout_id=world.layout_id,
        blocks=tuple(blocks),
        button=button,
        slider=slider,
        zone=world.zone,
        gripper=Gripper(nx, ny, nz, open_=new_open, held=held),
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# task predicates and achievability


def task_success(task: TaskSpec, before: World, after: World) -> bool:
    """Pure predicate over the worlds at task start and end."""
    tid = task.template_id
    if tid == "push_left":
        b0, b1 = before.block(task.slots["color"]), after.block(task.slots["color"])
        return b1.x <= b0.x - PUSH_THRESHOLD
    if tid == "push_right":
        b0, b1 = before.block(task.slots["color"]), after.block(task.slots["color"])
        return b1.x >= b0.x + PUSH_THRESHOLD
    if tid == "lift":
        return after.block(task.slots["color"]).z >= LIFT_HEIGHT
    if tid == "place":
        b0, b1 = before.block(task.slots["color"]), after.block(task.slots["color"])
        z = after.zone
        was_out = np.hypot(b0.x - z.x, b0.y - z.y) > ZONE_RADIUS
        now_in = np.hypot(b1.x - z.x, b1.y - z.y) <= ZONE_RADIUS and b1.z == 0.0
        return bool(was_out and now_in)
    if tid == "press_button":
        return after.button.pressed != before.button.pressed
    if tid == "move_slider":
        d = -1.0 if task.slots["direction"] == "left" else 1.0
        return (after.slider.x - before.slider.x) * d >= SLIDER_THRESHOLD
    raise KeyError(tid)


def achievable(task: TaskSpec, world: World) -> bool:
    """Whether the scripted expert could satisfy the predicate from here."""
    tid = task.template_id
    margin = BLOCK_HALF + GRIP_RADIUS + 0.05
    if tid in ("push_left", "push_right"):
        b = world.block(task.slots["color"])
        if b.z > 0.0:
            return False
        if tid == "push_left":
            room = b.x - PUSH_THRESHOLD - 0.04 >= BLOCK_HALF
            approach = b.x + margin <= WORKSPACE - 0.02
        else:
            room = b.x + PUSH_THRESHOLD + 0.04 <= WORKSPACE - BLOCK_HALF
            approach = b.x - margin >= 0.02
        return bool(room and approach)
    if tid == "lift":
        return world.block(task.slots["color"]).z == 0.0 or world.gripper.held == task.slots["color"]
    if tid == "place":
        b = world.block(task.slots["color"])
        z = world.zone
        return bool(np.hypot(b.x - z.x, b.y - z.y) > ZONE_RADIUS + 0.02)
    if tid == "press_button":
        return world.button is not None
    if tid == "move_slider":
        s = world.slider
        if s is None:
            return False
        d = task.slots["direction"]
        if d == "left":
            return s.x - SLIDER_THRESHOLD - 0.03 >= s.lo
        return s.x + SLIDER_THRESHOLD + 0.03 <= s.hi
    raise KeyError(tid)


def require_achievable(task: TaskSpec, world: World):
    if not achievable(task, world):
        raise Unachievable(f"{task.template_id} {task.slots} not achievable here")
