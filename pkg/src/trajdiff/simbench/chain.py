"""Long-horizon chain evaluation.

A chain draws tasks one after another in a persistent world; it advances
only while tasks succeed consecutively. rate(k) is the fraction of chains
whose first k tasks all succeeded, and the average completed length is the
sum of the rates. Task draws are uniform over currently-achievable
templates without immediate repetition, one rng stream per chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..encoders import Instruction
from .tasks import TEMPLATE_IDS, TaskSpec, all_slot_fillings, phrase_task
from .world import World, achievable, reset_world, task_success

# policy_fn contract: (world, task, instruction, rng) -> final world.
TaskRunner = Callable[[World, TaskSpec, Instruction, np.random.Generator], World]


@dataclass(frozen=True)
class ChainReport:
    rates: tuple[float, ...]
    avg_len: float
    outcomes: np.ndarray  # (n_chains, chain_len) bool
    layout: str = "D"
    seed: int = 0

    @staticmethod
    def from_outcomes(outcomes: np.ndarray, layout: str = "D", seed: int = 0) -> "ChainReport":
        outcomes = np.asarray(outcomes, dtype=bool)
        prefix_ok = np.cumprod(outcomes, axis=1).astype(bool)
        rates = tuple(float(r) for r in prefix_ok.mean(axis=0))
        return ChainReport(rates, float(sum(rates)), outcomes, layout, seed)

    @property
    def n_chains(self) -> int:
        return self.outcomes.shape[0]

    @property
    def chain_len(self) -> int:
        return self.outcomes.shape[1]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "rate"])
            for k, r in enumerate(self.rates, start=1):
                w.writerow([k, f"{r:.6f}"])
            w.writerow(["avg_len", f"{self.avg_len:.6f}"])

    @staticmethod
    def from_csv(path) -> "ChainReport":
        rates = []
        avg = None
        with Path(path).open() as fh:
            for row in csv.reader(fh):
                if row[0] == "k":
                    continue
                if row[0] == "avg_len":
                    avg = float(row[1])
                else:
                    rates.append(float(row[1]))
        report = ChainReport(tuple(rates), float(sum(rates)), np.zeros((0, len(rates)), bool))
        assert avg is None or abs(avg - report.avg_len) < 1e-4
        return report


def draw_task(world: World, rng: np.random.Generator, exclude: str | None) -> TaskSpec:
    """Uniform draw over achievable (template, slots), skipping `exclude`."""
    options: list[TaskSpec] = []
    for tid in TEMPLATE_IDS:
        if tid == exclude:
            continue
        for slots in all_slot_fillings(tid):
            task = TaskSpec(tid, slots)
            if achievable(task, world):
                options.append(task)
    if not options:  # press_button is always achievable, so this is defensive
        return TaskSpec("press_button", {})
    return options[rng.integers(len(options))]


def evaluate_chain(
    policy_fn: TaskRunner,
    n_chains: int,
    chain_len: int = 5,
    layout: str = "D",
    seed: int = 0,
) -> ChainReport:
    """Run n_chains task chains; deterministic given the seed.

    Each chain owns an rng stream derived from (seed, chain index); the
    per-task step budget lives inside policy_fn.
    """
    if chain_len < 1:
        raise ValueError("chain_len must be >= 1")
    outcomes = np.zeros((n_chains, chain_len), dtype=bool)
    for c in range(n_chains):
        rng = np.random.default_rng([seed, c])
        world = reset_world(layout, rng)
        prev = None
        for k in range(chain_len):
            task = draw_task(world, rng, exclude=prev)
            instruction = Instruction(phrase_task(task, rng), task.template_id, task.slots)
            before = world
            world = policy_fn(world, task, instruction, rng)
            ok = task_success(task, before, world)
            outcomes[c, k] = ok
            if not ok:
                break
            prev = task.template_id
    return ChainReport.from_outcomes(outcomes, layout, seed)
