import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rip.core import Action, KeypointSet, Trajectory


def make_action(x=0.0, y=0.0, z=0.0, g=0):
    return Action(p0=(x, y, z), p1=(x, y + 0.035, z - 0.02),
                  p2=(x, y - 0.035, z - 0.02), g=g)


def line_trajectory(n, x0=0.0, x1=1.0, g=None, source=None):
    """Straight line in x; g is an optional per-step gripper sequence."""
    xs = np.linspace(x0, x1, n)
    gs = g if g is not None else [0] * n
    return Trajectory(tuple(make_action(x=float(x), g=int(gv)) for x, gv in zip(xs, gs)),
                      source=source)


def random_trajectory(rng, n=None, n_transitions=0, box=5.0):
    """Random finite trajectory with a requested number of gripper flips."""
    n = n if n is not None else int(rng.integers(10, 60))
    pts = rng.uniform(-box, box, (n, 9))
    g = np.zeros(n, dtype=int)
    n_transitions = min(n_transitions, n - 1)
    if n_transitions:
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_transitions, replace=False))
        state = 0
        prev = 0
        segments = list(cuts) + [n]
        for i, cut in enumerate(segments):
            g[prev:cut] = state
            state = 1 - state
            prev = cut
    actions = tuple(
        Action(p0=tuple(row[0:3]), p1=tuple(row[3:6]), p2=tuple(row[6:9]), g=int(gv))
        for row, gv in zip(pts, g)
    )
    return Trajectory(actions)


def keypoints(k=10, seed=0):
    rng = np.random.default_rng(seed)
    return KeypointSet(tuple(tuple(p) for p in rng.uniform(-0.5, 0.5, (k, 3))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
