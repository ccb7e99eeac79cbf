"""Closed-vocabulary instruction grammar.

    <motion> and avoid <obstacles> to reach the <target label> [<tail>]

The obstacle clause is drawn from phrases that match the scene's obstacle
mix. Realized instructions are kept within 8-16 words.
"""

from __future__ import annotations

import numpy as np

from .world import TARGET_LABELS, AxisBox, Cylinder, Scene, TargetInstance

MOTION_CLAUSES = (
    "move forward",
    "fly forward",
    "fly straight ahead",
    "go straight",
    "take off and move forward",
    "head forward slowly",
    "proceed ahead carefully",
    "fly ahead steadily",
)
BOX_CLAUSES = ("stacked obstacles", "the stacked boxes")
CYLINDER_CLAUSES = ("the colored pillars", "forest obstacles", "the tree clusters")
GENERIC_CLAUSES = ("all obstacles", "the obstacles on the way", "any obstacles")
TAILS = ("and face it", "then hover in front of it")
TAIL_PROBABILITY = 0.25
MIN_WORDS, MAX_WORDS = 8, 16


def realize(motion: str, obstacles: str, label: str, tail: str | None = None) -> str:
    text = f"{motion} and avoid {obstacles} to reach the {label}"
    if tail:
        text = f"{text} {tail}"
    return text


def obstacle_clauses(scene: Scene | None) -> tuple[str, ...]:
    if scene is None:
        return GENERIC_CLAUSES
    clauses: tuple[str, ...] = ()
    if any(isinstance(o, AxisBox) for o in scene.obstacles):
        clauses += BOX_CLAUSES
    if any(isinstance(o, Cylinder) for o in scene.obstacles):
        clauses += CYLINDER_CLAUSES
    return clauses + GENERIC_CLAUSES


def make_instruction(rng: np.random.Generator, target: TargetInstance, scene: Scene | None = None) -> str:
    motion = MOTION_CLAUSES[int(rng.integers(len(MOTION_CLAUSES)))]
    options = obstacle_clauses(scene)
    obstacles = options[int(rng.integers(len(options)))]
    tail = None
    if rng.random() < TAIL_PROBABILITY:
        tail = TAILS[int(rng.integers(len(TAILS)))]
    text = realize(motion, obstacles, target.label, tail)
    # shed optional words until the length bound holds: tail, then the longer clauses
    for m, o, t in ((motion, obstacles, None), (_shortest(MOTION_CLAUSES), obstacles, None),
                    (_shortest(MOTION_CLAUSES), _shortest(options), None)):
        if len(text.split()) <= MAX_WORDS:
            break
        text = realize(m, o, target.label, t)
    return text


def _shortest(phrases) -> str:
    return min(phrases, key=lambda p: (len(p.split()), p))


def vocabulary() -> set[str]:
    """Every word the grammar can emit."""
    words: set[str] = set("and avoid to reach the".split())
    for group in (MOTION_CLAUSES, BOX_CLAUSES, CYLINDER_CLAUSES, GENERIC_CLAUSES, TAILS, TARGET_LABELS):
        for phrase in group:
            words.update(phrase.split())
    return words
