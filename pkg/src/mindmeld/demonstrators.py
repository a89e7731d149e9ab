"""Simulated demonstrators whose labels are time-shifted, scaled, noisy ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .world import WHEEL_LIMIT

MAX_SHIFT = 4
UNDER_RANGE = (0.3, 1.0)
OVER_RANGE = (1.0, 2.0)
NOISE_SIGMA = 0.05

TIMING_CLASSES = ("anticipatory", "neither", "delayed")


@dataclass(frozen=True)
class StyleProfile:
    id: int
    timing: int  # steps; >0 delayed, <0 anticipatory
    magnitude: float  # >1 over-corrects, <1 under-corrects
    noise_sigma: float = NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not self.magnitude > 0:
            raise ValueError("magnitude must be positive")

    @property
    def timing_class(self) -> str:
        return TIMING_CLASSES[int(np.sign(self.timing)) + 1]

    @property
    def over_corrector(self) -> bool:
        return self.magnitude > 1.0


IDENTITY = dict(timing=0, magnitude=1.0, noise_sigma=0.0)


def sample_style(seed: int, id: int = 0, max_shift: int = MAX_SHIFT, noise_sigma: float = NOISE_SIGMA) -> StyleProfile:
    """Draw a style: timing class and over/under side each chosen uniformly."""
    rng = np.random.default_rng([seed, 7919])
    cls = rng.integers(3)
    if cls == 0:
        timing = -int(rng.integers(1, max_shift + 1))
    elif cls == 1:
        timing = 0
    else:
        timing = int(rng.integers(1, max_shift + 1))
    if rng.random() < 0.5:
        magnitude = float(rng.uniform(*UNDER_RANGE))
    else:
        # (1, 2]: reflect a [1, 2) draw so 1.0 itself is excluded
        magnitude = float(OVER_RANGE[1] - rng.uniform(0.0, OVER_RANGE[1] - OVER_RANGE[0]))
    return StyleProfile(id=id, timing=timing, magnitude=magnitude, noise_sigma=noise_sigma, seed=seed)


@dataclass
class LabelSequence:
    demonstrator_id: int
    task_id: int
    o: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.o.shape != self.a.shape:
            raise ValueError("a and o must have equal length")

    def __len__(self) -> int:
        return len(self.o)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "o", "a"])
            for t, (o, a) in enumerate(zip(self.o, self.a)):
                w.writerow([t, repr(float(o)), repr(float(a))])

    @classmethod
    def read_csv(cls, path, demonstrator_id: int = 0, task_id: int = 0) -> "LabelSequence":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(demonstrator_id, task_id, [float(r["o"]) for r in rows], [float(r["a"]) for r in rows])


def shifted(o: np.ndarray, timing: int) -> np.ndarray:
    """``o[t - timing]`` with indices clamped to the sequence ends."""
    idx = np.clip(np.arange(len(o)) - timing, 0, len(o) - 1)
    return np.asarray(o)[idx]


def corrupt(o, style: StyleProfile, seed: int, task_id: int = 0) -> LabelSequence:
    o = np.asarray(o, dtype=float)
    if len(o) <= 2 * abs(style.timing):
        raise ValueError(f"sequence of length {len(o)} too short for timing shift {style.timing}")
    rng = np.random.default_rng([seed, style.id, task_id])
    noise = rng.normal(0.0, style.noise_sigma, len(o)) if style.noise_sigma > 0 else 0.0
    a = np.clip(style.magnitude * shifted(o, style.timing) + noise, -WHEEL_LIMIT, WHEEL_LIMIT)
    return LabelSequence(style.id, task_id, o, a)


def write_manifest(styles: list[StyleProfile], path) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in styles], indent=1))


def read_manifest(path) -> list[StyleProfile]:
    return [StyleProfile(**row) for row in json.loads(Path(path).read_text())]
