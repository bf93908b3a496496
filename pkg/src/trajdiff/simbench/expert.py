"""Scripted waypoint expert: approach, actuate, retreat.

Plans a short waypoint sequence per task, then emits one action per tick
that moves the gripper toward the active waypoint within the step-length
bound. Waypoints get small plan-time jitter for diversity; every produced
episode satisfies its own success predicate.
"""

from __future__ import annotations

import numpy as np

from ..errors import Unachievable
from ..geometry import Action, matrix_to_rot6d
from .tasks import TaskSpec
from .world import (
    BLOCK_HALF,
    GRIP_RADIUS,
    HANDLE_HALF,
    MAX_STEP,
    World,
    require_achievable,
    step,
    task_success,
)

Z_TRAVEL = 0.18
Z_CONTACT = 0.02
Z_LIFT_TO = 0.20
Z_PLACE = 0.08
WAYPOINT_TOL = 0.015
PLAN_JITTER = 0.008
APPROACH_GAP = 0.03
SWEEP_PAST = 0.06  # gripper travel past the block center while pushing


def _yaw_rot6d(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return matrix_to_rot6d(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def expert_waypoints(world: World, task: TaskSpec, rng: np.random.Generator):
    """(position, open flag) targets realizing the task from this world."""
    g = world.gripper
    tid = task.template_id
    wps: list[tuple[float, float, float, int]] = [(g.x, g.y, Z_TRAVEL, 1)]

    if tid in ("push_left", "push_right"):
        d = -1.0 if tid == "push_left" else 1.0
        b = world.block(task.slots["color"])
        approach_x = b.x - d * (BLOCK_HALF + GRIP_RADIUS + APPROACH_GAP)
        sweep_x = b.x + d * SWEEP_PAST
        wps += [
            (approach_x, b.y, Z_TRAVEL, 1),
            (approach_x, b.y, Z_CONTACT, 1),
            (sweep_x, b.y, Z_CONTACT, 1),
            (sweep_x, b.y, Z_TRAVEL, 1),
        ]
    elif tid == "lift":
        b = world.block(task.slots["color"])
        wps += [
            (b.x, b.y, Z_TRAVEL, 1),
            (b.x, b.y, Z_CONTACT, 1),
            (b.x, b.y, Z_CONTACT, 0),
            (b.x, b.y, Z_LIFT_TO, 0),
        ]
    elif tid == "place":
        b = world.block(task.slots["color"])
        z = world.zone
        wps += [
            (b.x, b.y, Z_TRAVEL, 1),
            (b.x, b.y, Z_CONTACT, 1),
            (b.x, b.y, Z_CONTACT, 0),
            (b.x, b.y, Z_LIFT_TO, 0),
            (z.x, z.y, Z_LIFT_TO, 0),
            (z.x, z.y, Z_PLACE, 0),
            (z.x, z.y, Z_PLACE, 1),
            (z.x, z.y, Z_TRAVEL, 1),
        ]
    elif tid == "press_button":
        b = world.button
        wps += [
            (b.x, b.y, Z_TRAVEL, 1),
            (b.x, b.y, 0.01, 1),
            (b.x, b.y, Z_TRAVEL, 1),
        ]
    elif tid == "move_slider":
        d = -1.0 if task.slots["direction"] == "left" else 1.0
        s = world.slider
        approach_x = s.x - d * (HANDLE_HALF + GRIP_RADIUS + APPROACH_GAP)
        sweep_x = float(np.clip(s.x + d * SWEEP_PAST, s.lo, s.hi))
        wps += [
            (approach_x, s.y, Z_TRAVEL, 1),
            (approach_x, s.y, Z_CONTACT, 1),
            (sweep_x, s.y, Z_CONTACT, 1),
            (sweep_x, s.y, Z_TRAVEL, 1),
        ]
    else:
        raise KeyError(tid)

    jittered = []
    for x, y, z, open_ in wps:
        jx = float(x + rng.uniform(-PLAN_JITTER, PLAN_JITTER))
        jy = float(y + rng.uniform(-PLAN_JITTER, PLAN_JITTER))
        jittered.append((np.array([jx, jy, z]), open_))
    return jittered


def run_expert(world: World, task: TaskSpec, rng: np.random.Generator,
               max_steps: int = 90):
    """Execute the waypoint plan; returns ([(world, action)], final world).

    Raises Unachievable if the task predicate cannot be satisfied from the
    start state.
    """
    require_achievable(task, world)
    wps = expert_waypoints(world, task, rng)
    yaw = float(rng.uniform(-0.15, 0.15))
    rot = _yaw_rot6d(yaw)
    frames = []
    wp_idx = 1  # waypoint 0 is the current pose at travel height
    for _ in range(max_steps):
        target, open_flag = wps[wp_idx]
        g = world.gripper
        cur = np.array([g.x, g.y, g.z])
        delta = target - cur
        dist = float(np.linalg.norm(delta))
        if dist > MAX_STEP * 0.98:
            delta = delta * (MAX_STEP * 0.98 / dist)
        action = Action(loc=cur + delta, rot=rot, open_=open_flag)
        frames.append((world, action))
        world = step(world, action)
        g = world.gripper
        at_target = np.linalg.norm(target - np.array([g.x, g.y, g.z])) < WAYPOINT_TOL
        if at_target and g.open_ == open_flag:
            wp_idx += 1
            if wp_idx == len(wps):
                break
    if not task_success(task, frames[0][0], world):
        raise Unachievable(
            f"expert failed {task.template_id} {task.slots} on layout {world.layout_id}"
        )
    return frames, world
