import math

import numpy as np
import pytest

from navfly.world import AxisBox, Cylinder, Scene, SpawnZone, TargetInstance, UavState, Vec3


def make_scene(obstacles=(), targets=None, goal_id=0, side=70.0, scene_id="t"):
    if targets is None:
        targets = (TargetInstance(0, "red sports car", Vec3(35.0, 67.0, 0.8), 1.0, True),)
    zone = SpawnZone(5.0, side - 5.0, 0.0, 5.0, math.pi / 2)
    return Scene(scene_id, side, tuple(obstacles), tuple(targets), goal_id, zone, 0)


def wall(x, y0=-20.0, y1=20.0, thick=1.0, height=15.0):
    """Box whose near face is the plane x = ``x``."""
    return AxisBox(Vec3(x, y0, 0.0), Vec3(x + thick, y1, height))


def pillar(x, y, r=1.0, h=15.0):
    return Cylinder(Vec3(x, y, 0.0), r, h)


def pose(x, y, z=2.0, yaw=0.0):
    return UavState(Vec3(x, y, z), yaw)


@pytest.fixture
def empty_scene():
    return make_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
