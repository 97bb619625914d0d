"""Agent pose and body-frame motion commands."""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi

# Bin tokens cover two digits, so every motion component must stay inside this.
COMPONENT_LIMIT = 0.99


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; -pi maps to pi."""
    return math.pi - (math.pi - a) % TWO_PI


@dataclass(frozen=True)
class Pose:
    """Planar position plus heading; yaw counter-clockwise positive, wrapped."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class Action:
    """One motion command in the agent's body frame, or the terminal stop.

    dx is along the facing direction, dy perpendicular (left positive),
    dyaw counter-clockwise. A stop carries no components.
    """

    stop: bool = False
    dx: float = 0.0
    dy: float = 0.0
    dyaw: float = 0.0

    def __post_init__(self):
        if self.stop and (self.dx or self.dy or self.dyaw):
            raise ValueError("stop action carries no motion components")

    @classmethod
    def move(cls, dx: float, dy: float, dyaw: float) -> "Action":
        return cls(stop=False, dx=dx, dy=dy, dyaw=dyaw)

    @property
    def displacement(self) -> float:
        return math.hypot(self.dx, self.dy)


STOP = Action(stop=True)


def step_pose(pose: Pose, action: Action) -> Pose:
    """Apply a move: world delta = R(yaw) @ (dx, dy), then turn and wrap.

    No collision handling; callers that need ground truth validity (the
    expert) check the resulting pose themselves.
    """
    if action.stop:
        raise ValueError("step_pose requires a move action; handle stop in the caller")
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return Pose(
        x=pose.x + action.dx * c - action.dy * s,
        y=pose.y + action.dx * s + action.dy * c,
        yaw=wrap_angle(pose.yaw + action.dyaw),
    )
