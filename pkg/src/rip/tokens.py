"""Text encoding of keypoints and action trajectories.

Coordinates are quantized to integer millimeters (round half away from
zero) so the whole context fits in compact numeric tokens. One action is
one line of 10 integers: nine millimeter coordinates followed by the 0/1
gripper flag. Blocks are labeled ``KEYPOINTS:`` / ``ACTIONS:`` / ``QUERY:``.

Decoding is the untrusted direction: it scans arbitrary model output for
the first run of well-formed action lines and ignores surrounding prose.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .core import Action, KeypointSet, Trajectory
from .errors import CoordinateRangeError, InvalidTrajectoryError, MalformedResponseError

# Quantization overflow guard: 10 m at 1 mm resolution stays within 5 digits.
MAX_COORDINATE_M = 10.0
MM_PER_M = 1000.0

_INT_TOKEN = re.compile(r"^[+-]?\d+$")


@dataclass(frozen=True)
class PolicyContext:
    """Demonstration episodes plus the query keypoints for a new episode."""

    demonstrations: tuple[tuple[KeypointSet, Trajectory], ...]
    query_keypoints: KeypointSet

    def __post_init__(self):
        demos = tuple(self.demonstrations)
        if not demos:
            raise InvalidTrajectoryError("a policy context needs at least one demonstration")
        k = len(self.query_keypoints)
        for i, (kp, _tr) in enumerate(demos):
            if len(kp) != k:
                raise InvalidTrajectoryError(
                    f"demonstration {i} has {len(kp)} keypoints, query has {k}; "
                    f"all keypoint sets must share one size"
                )
        object.__setattr__(self, "demonstrations", demos)


def default_preamble() -> str:
    return resources.files("rip.data").joinpath("preamble.txt").read_text(encoding="utf-8")


def quantize_mm(x: float) -> int:
    """Meters to integer millimeters, rounding half away from zero."""
    if abs(x) > MAX_COORDINATE_M:
        raise CoordinateRangeError(
            f"coordinate {x} m exceeds the {MAX_COORDINATE_M} m encodable range"
        )
    mm = abs(x) * MM_PER_M
    q = int(mm + 0.5)
    return q if x >= 0 else -q


def _keypoint_lines(keypoints: KeypointSet) -> list[str]:
    return [" ".join(str(quantize_mm(c)) for c in p) for p in keypoints.points]


def encode_action(action: Action) -> str:
    coords = [quantize_mm(c) for p in (action.p0, action.p1, action.p2) for c in p]
    return " ".join(str(v) for v in coords) + f" {action.g}"


def encode_action_block(trajectory: Trajectory) -> str:
    return "\n".join(encode_action(a) for a in trajectory.actions)


def encode_context(context: PolicyContext, preamble: str | None = None) -> str:
    """Render a context as the deterministic prompt text sent to a policy."""
    parts = [preamble if preamble is not None else default_preamble(), ""]
    for i, (keypoints, trajectory) in enumerate(context.demonstrations, start=1):
        parts.append(f"DEMONSTRATION {i}")
        parts.append("KEYPOINTS:")
        parts.extend(_keypoint_lines(keypoints))
        parts.append("ACTIONS:")
        parts.append(encode_action_block(trajectory))
        parts.append("")
    parts.append("QUERY:")
    parts.extend(_keypoint_lines(context.query_keypoints))
    parts.append("ACTIONS:")
    return "\n".join(parts) + "\n"


def _parse_action_line(line: str) -> list[int] | None:
    tokens = line.split()
    if len(tokens) != 10 or not all(_INT_TOKEN.match(t) for t in tokens):
        return None
    return [int(t) for t in tokens]


def decode_trajectory(text: str) -> Trajectory:
    """Parse the first well-formed action block out of untrusted model output.

    A well-formed block is a run of at least two consecutive lines of
    exactly 10 integers each. Raises MalformedResponseError when no block
    exists or a gripper token is outside {0, 1}.
    """
    lines = text.splitlines()
    parsed = [_parse_action_line(ln) for ln in lines]

    block: list[list[int]] = []
    for row in parsed + [None]:  # trailing None flushes the final run
        if row is not None:
            block.append(row)
        elif len(block) >= 2:
            break
        else:
            block = []

    if len(block) < 2:
        raise MalformedResponseError(
            "no action block found: expected >= 2 consecutive lines of 10 integers"
        )

    actions = []
    for row in block:
        g = row[9]
        if g not in (0, 1):
            raise MalformedResponseError(f"gripper token must be 0 or 1, got {g}")
        coords = [v / MM_PER_M for v in row[:9]]
        actions.append(Action(p0=tuple(coords[0:3]), p1=tuple(coords[3:6]),
                              p2=tuple(coords[6:9]), g=g))
    return Trajectory(tuple(actions), source="sampled")
