"""Step-indexed scalar profiles (load multipliers, irradiance fractions).

File format: optional ``# step_seconds=60`` comment, then a ``step,value``
header and one row per step.  Steps are 1-based to line up with the bus
schedule.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import GridFileError


class Profile:
    def __init__(self, values, step_seconds: float = 60.0, name: str = ""):
        self.values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise GridFileError(f"profile {name!r} contains non-finite values")
        self.step_seconds = step_seconds
        self.name = name

    def __len__(self) -> int:
        return len(self.values)

    def value(self, step: int) -> float:
        """Value for 1-based schedule step."""
        if not (1 <= step <= len(self.values)):
            raise IndexError(f"profile {self.name!r} has {len(self.values)} steps, "
                             f"asked for {step}")
        return float(self.values[step - 1])


def parse_profile_text(text: str, name: str = "", path: str | None = None) -> Profile:
    step_seconds = 60.0
    rows: list[tuple[int, float]] = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("step_seconds"):
                try:
                    step_seconds = float(body.split("=", 1)[1])
                except (IndexError, ValueError):
                    raise GridFileError("bad step_seconds declaration",
                                        line=lineno, path=path) from None
            continue
        if not line:
            continue
        if not header_seen:
            if [c.strip() for c in line.split(",")] != ["step", "value"]:
                raise GridFileError(f"expected 'step,value' header, got {line!r}",
                                    line=lineno, path=path)
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise GridFileError(f"expected 2 fields, got {len(parts)}",
                                line=lineno, path=path)
        try:
            rows.append((int(parts[0]), float(parts[1])))
        except ValueError:
            raise GridFileError(f"bad profile row {line!r}", line=lineno, path=path) from None
    if not rows:
        raise GridFileError("profile has no rows", path=path)
    rows.sort()
    expected = list(range(1, len(rows) + 1))
    if [r[0] for r in rows] != expected:
        raise GridFileError("profile steps must be 1..N without gaps", path=path)
    return Profile([r[1] for r in rows], step_seconds=step_seconds, name=name)


def parse_profile(path: str | os.PathLike) -> Profile:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_profile_text(fh.read(), name=os.path.basename(str(path)),
                                  path=str(path))


def serialize_profile(profile: Profile) -> str:
    lines = [f"# step_seconds={profile.step_seconds:g}", "step,value"]
    for i, v in enumerate(profile.values, start=1):
        lines.append(f"{i},{float(v)!r}")
    lines.append("")
    return "\n".join(lines)


def write_profile(profile: Profile, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_profile(profile))


def constant_profile(steps: int, value: float = 1.0, step_seconds: float = 60.0) -> Profile:
    return Profile(np.full(steps, value), step_seconds=step_seconds, name="constant")
