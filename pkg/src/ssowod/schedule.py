"""Task schedules and the cumulative known-class registry.

Schedule file (JSON or YAML)::

    tasks:
      - classes: [circle, square]
        fraction: 1.0
      - classes: [triangle, cross]
        fraction: 0.5
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import yaml

from .errors import ParameterError, ParseError

UNKNOWN = -1


@dataclass(frozen=True)
class TaskSpec:
    classes: tuple[str, ...]
    fraction: float = 1.0


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        if not self.tasks:
            raise ParameterError("a schedule needs at least one task")
        seen: dict[str, int] = {}
        for t, task in enumerate(self.tasks, start=1):
            if not task.classes:
                raise ParameterError(f"task {t} has no classes")
            if not 0.0 < task.fraction <= 1.0:
                raise ParameterError(f"task {t} fraction {task.fraction} outside (0, 1]")
            for c in task.classes:
                if c in seen:
                    raise ParameterError(f"class {c!r} appears in tasks {seen[c]} and {t}")
                seen[c] = t

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[str]], fractions: Sequence[float] | None = None):
        fractions = fractions or [1.0] * len(groups)
        return cls(tuple(TaskSpec(tuple(g), float(f)) for g, f in zip(groups, fractions, strict=True)))

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_classes(self) -> list[str]:
        return [c for task in self.tasks for c in task.classes]

    def task_of(self, name: str) -> int | None:
        for t, task in enumerate(self.tasks, start=1):
            if name in task.classes:
                return t
        return None

    def registry(self, t: int) -> "KnownClassRegistry":
        return KnownClassRegistry(self, t)

    def to_dict(self) -> dict:
        return {"tasks": [{"classes": list(t.classes), "fraction": t.fraction} for t in self.tasks]}

    @classmethod
    def from_dict(cls, d) -> "TaskSchedule":
        try:
            return cls(tuple(TaskSpec(tuple(t["classes"]), float(t.get("fraction", 1.0))) for t in d["tasks"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed schedule: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "TaskSchedule":
        text = Path(path).read_text()
        try:
            d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


@dataclass(frozen=True)
class KnownClassRegistry:
    """Known classes at task ``t`` (1-based) in classifier-column order.

    Column ``i < len(known)`` is ``known[i]``; column ``len(known)`` is UNKNOWN.
    """

    schedule: TaskSchedule
    t: int

    def __post_init__(self):
        if not 1 <= self.t <= self.schedule.num_tasks:
            raise ParameterError(f"task {self.t} outside 1..{self.schedule.num_tasks}")

    @property
    def previous(self) -> list[str]:
        return [c for task in self.schedule.tasks[: self.t - 1] for c in task.classes]

    @property
    def current(self) -> list[str]:
        return list(self.schedule.tasks[self.t - 1].classes)

    @property
    def known(self) -> list[str]:
        return self.previous + self.current

    @property
    def future(self) -> list[str]:
        return [c for task in self.schedule.tasks[self.t :] for c in task.classes]

    @property
    def unknown_column(self) -> int:
        return len(self.known)

    @property
    def is_final(self) -> bool:
        return self.t == self.schedule.num_tasks

    def column(self, name: str) -> int:
        return self.known.index(name)


# class groupings of the two satellite open-world splits (DOTA abbreviations)
OWOD_S_SPLIT1 = TaskSchedule.from_groups(
    [
        ["SV", "LV", "SH", "PL", "HC", "HA", "SP", "GTF", "TC"],
        ["SBF", "BC", "BD", "BR", "RA", "ST"],
    ]
)
OWOD_S_SPLIT2 = TaskSchedule.from_groups(
    [
        ["SV", "LV", "SH", "PL", "HC", "HA", "SP", "GTF", "TC"],
        ["BC", "BD"],
        ["BR", "RA"],
        ["ST", "SBF"],
    ]
)
