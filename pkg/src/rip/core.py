"""Domain types for demonstrations, actions, and trajectory bundles.

An end-effector pose is represented by three 3D points (gripper body and
both fingertips) plus a binary gripper flag, giving 10 scalar channels per
action. Trajectories are immutable, time-ordered action sequences; bundles
are sets of trajectories resampled onto a shared normalized-time grid so
they can be fitted jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidTrajectoryError

# Channel layout of the flat action vector: p0, p1, p2 then gripper.
ACTION_DIM = 10
GRIPPER_CHANNEL = 9
POSITION_CHANNELS = tuple(range(9))

SOURCE_DEMONSTRATION = "demonstration"
SOURCE_SAMPLED = "sampled"
SOURCE_AGGREGATED = "aggregated"


def _as_point(value, name: str) -> tuple[float, float, float]:
    pt = tuple(float(v) for v in value)
    if len(pt) != 3:
        raise InvalidTrajectoryError(f"{name} must have 3 coordinates, got {len(pt)}")
    if not all(math.isfinite(v) for v in pt):
        raise InvalidTrajectoryError(f"{name} has non-finite coordinates: {pt}")
    return pt


@dataclass(frozen=True)
class Action:
    """One end-effector pose: triplet of 3D points plus gripper state.

    Positions are meters in a fixed right-handed world frame. ``g`` is 0
    (open) or 1 (closed); fractional gripper values exist only inside the
    estimator and are thresholded before an Action is built.
    """

    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    p2: tuple[float, float, float]
    g: int

    def __post_init__(self):
        object.__setattr__(self, "p0", _as_point(self.p0, "p0"))
        object.__setattr__(self, "p1", _as_point(self.p1, "p1"))
        object.__setattr__(self, "p2", _as_point(self.p2, "p2"))
        if self.g not in (0, 1):
            raise InvalidTrajectoryError(f"gripper state must be 0 or 1, got {self.g!r}")
        object.__setattr__(self, "g", int(self.g))

    def to_array(self) -> np.ndarray:
        """Flatten to the 10-channel vector [p0, p1, p2, g]."""
        return np.array([*self.p0, *self.p1, *self.p2, float(self.g)])

    @classmethod
    def from_array(cls, vec) -> "Action":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (ACTION_DIM,):
            raise InvalidTrajectoryError(f"action vector must have shape (10,), got {vec.shape}")
        return cls(
            p0=tuple(vec[0:3]),
            p1=tuple(vec[3:6]),
            p2=tuple(vec[6:9]),
            g=int(round(vec[GRIPPER_CHANNEL])),
        )


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered sequence of at least two actions."""

    actions: tuple[Action, ...]
    source: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if len(self.actions) < 2:
            raise InvalidTrajectoryError(
                f"a trajectory needs at least 2 actions, got {len(self.actions)}"
            )
        for a in self.actions:
            if not isinstance(a, Action):
                raise InvalidTrajectoryError(f"expected Action, got {type(a).__name__}")

    def __len__(self) -> int:
        return len(self.actions)

    def to_array(self) -> np.ndarray:
        """Stack actions into a (T, 10) array."""
        return np.stack([a.to_array() for a in self.actions])

    @classmethod
    def from_array(cls, arr, source: str | None = None) -> "Trajectory":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != ACTION_DIM:
            raise InvalidTrajectoryError(f"trajectory array must be (T, 10), got {arr.shape}")
        return cls(tuple(Action.from_array(row) for row in arr), source=source)

    def gripper_states(self) -> tuple[int, ...]:
        return tuple(a.g for a in self.actions)


@dataclass(frozen=True)
class KeypointSet:
    """Fixed-size set of visual 3D keypoints (meters, world frame)."""

    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        pts = tuple(_as_point(p, f"keypoint[{i}]") for i, p in enumerate(self.points))
        if not pts:
            raise InvalidTrajectoryError("a keypoint set needs at least one point")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def to_array(self) -> np.ndarray:
        return np.array(self.points, dtype=float)


@dataclass(frozen=True)
class Demonstration:
    """One expert episode: the observed keypoints and the performed trajectory."""

    keypoints: KeypointSet
    trajectory: Trajectory


@dataclass(frozen=True)
class TrajectoryBundle:
    """Q candidate trajectories resampled to a common length on a shared grid.

    The grid lives in [0, 1], strictly increasing with fixed endpoints, so
    bundles from policies that returned different episode lengths are
    directly comparable step by step.
    """

    trajectories: tuple[Trajectory, ...]
    timesteps: tuple[float, ...]

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        grid = tuple(float(t) for t in self.timesteps)
        if not trajs:
            raise InvalidTrajectoryError("a bundle needs at least one trajectory")
        length = len(trajs[0])
        for tr in trajs:
            if len(tr) != length:
                raise InvalidTrajectoryError(
                    f"bundle trajectories must share one length, got {len(tr)} != {length}"
                )
        if len(grid) != length:
            raise InvalidTrajectoryError(
                f"grid length {len(grid)} does not match trajectory length {length}"
            )
        if grid[0] != 0.0 or grid[-1] != 1.0:
            raise InvalidTrajectoryError("grid must start at 0 and end at 1")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidTrajectoryError("grid must be strictly increasing")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "timesteps", grid)

    @property
    def query_count(self) -> int:
        return len(self.trajectories)

    @property
    def length(self) -> int:
        return len(self.trajectories[0])

    def to_array(self) -> np.ndarray:
        """Stack to (Q, T, 10)."""
        return np.stack([tr.to_array() for tr in self.trajectories])

    def grid(self) -> np.ndarray:
        return np.array(self.timesteps)


def normalize_time(trajectory: Trajectory) -> np.ndarray:
    """Map step indices of a trajectory onto the uniform grid {(t-1)/(T-1)}.

    The first step lands on 0 and the last on 1 regardless of episode
    length, which is what makes differently sized samples comparable.
    """
    n = len(trajectory)
    return _uniform_grid(n)


def _uniform_grid(n: int) -> np.ndarray:
    if n < 2:
        raise InvalidTrajectoryError(f"cannot normalize a trajectory of length {n}")
    return np.arange(n, dtype=float) / (n - 1)


def resample_trajectory(trajectory: Trajectory, target_len: int) -> Trajectory:
    """Resample one trajectory to a new length on its normalized grid.

    Positions interpolate linearly; the gripper holds its previous sample;
    the first and last actions are preserved exactly.
    """
    if target_len < 2:
        raise InvalidTrajectoryError(f"target length must be >= 2, got {target_len}")
    # Same length means identical grids; copying keeps alignment bitwise
    # idempotent instead of relying on interpolation round-off behavior.
    if len(trajectory) == target_len:
        return trajectory

    grid_in = _uniform_grid(len(trajectory))
    grid_out = _uniform_grid(target_len)
    data = trajectory.to_array()

    out = np.empty((target_len, ACTION_DIM))
    for c in POSITION_CHANNELS:
        out[:, c] = np.interp(grid_out, grid_in, data[:, c])
    # Gripper: previous-sample hold. Interpolating a binary channel would
    # fabricate fractional grasps.
    hold = np.searchsorted(grid_in, grid_out, side="right") - 1
    hold = np.clip(hold, 0, len(trajectory) - 1)
    out[:, GRIPPER_CHANNEL] = data[hold, GRIPPER_CHANNEL]

    actions = [Action.from_array(row) for row in out]
    actions[0] = trajectory.actions[0]
    actions[-1] = trajectory.actions[-1]
    return Trajectory(tuple(actions), source=trajectory.source)


def align_bundle(trajectories, target_len: int) -> TrajectoryBundle:
    """Resample trajectories of arbitrary lengths onto one common grid.

    Positions are piecewise-linearly interpolated at the shared normalized
    timesteps; the gripper channel is carried by previous-sample hold; the
    first and last action of every input are preserved exactly.
    """
    trajs = list(trajectories)
    if not trajs:
        raise InvalidTrajectoryError("cannot align an empty set of trajectories")
    if target_len < 2:
        raise InvalidTrajectoryError(f"target length must be >= 2, got {target_len}")
    resampled = tuple(resample_trajectory(tr, target_len) for tr in trajs)
    return TrajectoryBundle(resampled, tuple(_uniform_grid(target_len)))
