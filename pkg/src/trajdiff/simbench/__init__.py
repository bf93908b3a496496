"""Scripted planar-tabletop environment, experts, datasets, chain evaluation."""

from .tasks import (  # noqa: F401
    DIRECTIONS,
    TARGET_COLORS,
    TEMPLATE_IDS,
    TEMPLATES,
    TaskSpec,
    phrase_task,
    sample_task,
    tokenize,
    vocabulary,
)
from .world import (  # noqa: F401
    MAX_STEP,
    WORKSPACE,
    World,
    achievable,
    reset_world,
    step,
    task_success,
)
