"""Task templates, language phrasings, and the closed toy vocabulary.

Six manipulation templates over colored blocks, a button, and a slider.
Each template carries several natural-language phrasings; slot values are
drawn from closed sets, so the whole vocabulary is known up front.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TARGET_COLORS = ("red", "green", "blue")
DIRECTIONS = ("left", "right")


@dataclass(frozen=True)
class TaskTemplate:
    template_id: str
    verb: str
    phrasings: tuple[str, ...]
    slot_names: tuple[str, ...]


TEMPLATES: dict[str, TaskTemplate] = {
    t.template_id: t
    for t in (
        TaskTemplate(
            "push_left",
            "push",
            (
                "push the {color} block to the left",
                "shove the {color} block leftwards",
                "move the {color} block left",
            ),
            ("color",),
        ),
        TaskTemplate(
            "push_right",
            "push",
            (
                "push the {color} block to the right",
                "shove the {color} block rightwards",
                "move the {color} block right",
            ),
            ("color",),
        ),
        TaskTemplate(
            "lift",
            "lift",
            (
                "lift the {color} block up",
                "pick up the {color} block",
                "raise the {color} block",
            ),
            ("color",),
        ),
        TaskTemplate(
            "place",
            "place",
            (
                "put the {color} block in the zone",
                "place the {color} block on the target area",
                "carry the {color} block to the zone",
            ),
            ("color",),
        ),
        TaskTemplate(
            "press_button",
            "press",
            (
                "press the button",
                "push the button down",
                "tap the button",
            ),
            (),
        ),
        TaskTemplate(
            "move_slider",
            "slide",
            (
                "move the slider to the {direction}",
                "slide the handle to the {direction}",
                "push the slider {direction}",
            ),
            ("direction",),
        ),
    )
}

TEMPLATE_IDS = tuple(TEMPLATES)


@dataclass(frozen=True)
class TaskSpec:
    """A template instantiated with concrete slot values."""

    template_id: str
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.template_id not in TEMPLATES:
            raise KeyError(f"unknown template {self.template_id!r}")
        tmpl = TEMPLATES[self.template_id]
        if set(self.slots) != set(tmpl.slot_names):
            raise KeyError(
                f"template {self.template_id!r} needs slots {tmpl.slot_names}, got {tuple(self.slots)}"
            )
        object.__setattr__(self, "slots", dict(self.slots))


def sample_task(template_id: str, rng: np.random.Generator) -> TaskSpec:
    tmpl = TEMPLATES[template_id]
    slots = {}
    for name in tmpl.slot_names:
        if name == "color":
            slots[name] = TARGET_COLORS[rng.integers(len(TARGET_COLORS))]
        elif name == "direction":
            slots[name] = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return TaskSpec(template_id, slots)


def phrase_task(task: TaskSpec, rng: np.random.Generator) -> str:
    tmpl = TEMPLATES[task.template_id]
    phrasing = tmpl.phrasings[rng.integers(len(tmpl.phrasings))]
    return phrasing.format(**task.slots)


def all_slot_fillings(template_id: str) -> list[dict]:
    tmpl = TEMPLATES[template_id]
    if not tmpl.slot_names:
        return [{}]
    out = [{}]
    for name in tmpl.slot_names:
        values = TARGET_COLORS if name == "color" else DIRECTIONS
        out = [dict(s, **{name: v}) for s in out for v in values]
    return out


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def vocabulary() -> tuple[str, ...]:
    """Closed token set over every phrasing filled with every slot value."""
    tokens = set()
    for tid in TEMPLATE_IDS:
        tmpl = TEMPLATES[tid]
        for slots in all_slot_fillings(tid):
            for phrasing in tmpl.phrasings:
                tokens.update(tokenize(phrasing.format(**slots)))
    return tuple(sorted(tokens))
