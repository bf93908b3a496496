"""Episode records, the newline-delimited dataset format, and generation.

One episode per line: a JSON object holding the UTF-8 header fields
(instruction, template_id, layout_id, slots) and base64-encoded
little-endian float32 blocks for images, depths, cameras, proprioception,
and action lanes. A sidecar manifest records counts, the seed, and the
format version.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..encoders import Instruction
from ..errors import ConfigError, ShapeMismatch, Unachievable
from ..geometry import Action
from .expert import run_expert
from .render import IMG, render
from .tasks import TEMPLATE_IDS, TaskSpec, sample_task
from .world import WORKSPACE, Z_MAX, World, reset_world

FORMAT_VERSION = "el3dd-ep-v1"


@dataclass
class EpisodeFrame:
    rgb_fixed: np.ndarray  # (32, 32, 3) float32
    depth_fixed: np.ndarray  # (32, 32) float32
    cam_fixed: np.ndarray  # (16,) float32
    rgb_grip: np.ndarray
    depth_grip: np.ndarray
    cam_grip: np.ndarray
    proprio: np.ndarray  # (10,) float32 action lanes of the gripper state
    action: np.ndarray  # (10,) float32 commanded action lanes


@dataclass
class EpisodeRecord:
    instruction: Instruction
    task: TaskSpec
    layout_id: str
    frames: list[EpisodeFrame]

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ShapeMismatch("episode needs at least 2 frames")
        for f in self.frames:
            loc = f.action[:3]
            if not (
                (-1e-6 <= loc[0] <= WORKSPACE + 1e-6)
                and (-1e-6 <= loc[1] <= WORKSPACE + 1e-6)
                and (-1e-6 <= loc[2] <= Z_MAX + 1e-6)
            ):
                raise ShapeMismatch(f"action location {loc} outside workspace")

    def __len__(self):
        return len(self.frames)


def observe(world: World) -> tuple[np.ndarray, ...]:
    """Render both views; returns the six per-frame observation arrays."""
    rgb_f, depth_f, cam_f = render(world, "fixed")
    rgb_g, depth_g, cam_g = render(world, "gripper")
    return (
        rgb_f, depth_f, cam_f.to_array().astype(np.float32),
        rgb_g, depth_g, cam_g.to_array().astype(np.float32),
    )


def expert_demo(world: World, task: TaskSpec, rng: np.random.Generator) -> EpisodeRecord:
    """Scripted demonstration with rendered observations at every step."""
    instruction = Instruction.from_task(task, rng)
    raw_frames, _ = run_expert(world, task, rng)
    frames = []
    for w, action in raw_frames:
        obs = observe(w)
        frames.append(
            EpisodeFrame(
                *obs,
                proprio=w.proprio_lanes().astype(np.float32),
                action=action.lanes().astype(np.float32),
            )
        )
    return EpisodeRecord(instruction, task, world.layout_id, frames)


# ---------------------------------------------------------------------------
# serialization


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).copy()


_FIELDS = ("rgb_fixed", "depth_fixed", "cam_fixed", "rgb_grip", "depth_grip",
           "cam_grip", "proprio", "action")


def _field_shape(name: str, n: int) -> tuple[int, ...]:
    if name.startswith("rgb"):
        return (n, IMG, IMG, 3)
    if name.startswith("depth"):
        return (n, IMG, IMG)
    if name.startswith("cam"):
        return (n, 16)
    return (n, 10)


def episode_to_line(rec: EpisodeRecord) -> str:
    blocks = {
        name: _b64(np.stack([getattr(f, name) for f in rec.frames]))
        for name in _FIELDS
    }
    payload = {
        "instruction": rec.instruction.text,
        "template_id": rec.task.template_id,
        "slots": rec.task.slots,
        "layout_id": rec.layout_id,
        "n_frames": len(rec.frames),
        **blocks,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def episode_from_line(line: str) -> EpisodeRecord:
    d = json.loads(line)
    n = d["n_frames"]
    arrays = {name: _unb64(d[name], _field_shape(name, n)) for name in _FIELDS}
    frames = [
        EpisodeFrame(**{name: arrays[name][i] for name in _FIELDS}) for i in range(n)
    ]
    task = TaskSpec(d["template_id"], d["slots"])
    instruction = Instruction(d["instruction"], d["template_id"], d["slots"])
    return EpisodeRecord(instruction, task, d["layout_id"], frames)


def write_dataset(records: list[EpisodeRecord], path, seed: int) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(episode_to_line(rec) + "\n")
    by_template: dict[str, int] = {}
    by_layout: dict[str, int] = {}
    for rec in records:
        by_template[rec.task.template_id] = by_template.get(rec.task.template_id, 0) + 1
        by_layout[rec.layout_id] = by_layout.get(rec.layout_id, 0) + 1
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "counts": {"total": len(records), "by_template": by_template, "by_layout": by_layout},
        "created_unix": time.time(),
    }
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(path) -> list[EpisodeRecord]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [episode_from_line(line) for line in fh if line.strip()]


def read_manifest(path) -> dict:
    path = Path(path)
    return json.loads(path.with_suffix(path.suffix + ".manifest.json").read_text())


def generate_dataset(layouts, episodes_per_task: int, seed: int, path) -> dict:
    """Balanced scripted demonstrations across layouts x templates.

    Layout D is reserved for evaluation and rejected here.
    """
    layouts = tuple(layouts)
    if "D" in layouts:
        raise ConfigError("layout D is held out; training data uses A, B, C only")
    if not layouts or episodes_per_task < 1:
        raise ConfigError("need at least one layout and one episode per task")
    records = []
    for li, layout in enumerate(layouts):
        for ti, template in enumerate(TEMPLATE_IDS):
            for e in range(episodes_per_task):
                rng = np.random.default_rng([seed, li, ti, e])
                for _ in range(60):
                    world = reset_world(layout, rng)
                    task = sample_task(template, rng)
                    try:
                        rec = expert_demo(world, task, rng)
                        break
                    except Unachievable:
                        continue
                else:
                    raise Unachievable(f"could not stage {template} on layout {layout}")
                records.append(rec)
    return write_dataset(records, path, seed)
