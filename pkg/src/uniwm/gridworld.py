"""Procedural occupancy-grid world: generation, raycast rendering, expert driving.

Cells are 1 m squares; cell (cx, cy) spans x in [cx, cx+1), y in [cy, cy+1).
Everything here is a pure function of its seed, which is what makes dataset
generation reproducible.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Action, Pose, step_pose, wrap_angle

WALL_PALETTE = np.array(
    [
        [188, 70, 60],
        [70, 120, 190],
        [80, 165, 85],
        [180, 150, 60],
        [150, 85, 170],
        [90, 170, 170],
    ],
    dtype=np.float64,
)
N_PALETTE = len(WALL_PALETTE)

BEACON_COLOR = np.array([255, 242, 80], dtype=np.float64)
BEACON_RADIUS = 0.22  # sprite half-width in meters
BEACON_MIN_DEPTH = 0.12  # sprite hidden when this close / behind
CEILING_COLOR = np.array([58, 58, 70], dtype=np.float64)
FLOOR_COLOR = np.array([92, 88, 80], dtype=np.float64)


@dataclass
class WorldMap:
    """Occupancy grid with per-wall-cell palette ids and a goal cell."""

    grid: np.ndarray  # bool [W, H], True = wall
    palette: np.ndarray  # uint8 [W, H], valid where grid is True
    goal_cell: tuple[int, int]
    seed: int

    @property
    def width(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    def is_wall(self, cx: int, cy: int) -> bool:
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            return True
        return bool(self.grid[cx, cy])

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x)), int(math.floor(y))

    def free_cells(self) -> list[tuple[int, int]]:
        xs, ys = np.nonzero(~self.grid)
        return list(zip(xs.tolist(), ys.tolist()))


def _components(grid: np.ndarray) -> list[set[tuple[int, int]]]:
    """4-connected components of free cells."""
    seen: set[tuple[int, int]] = set()
    comps = []
    w, h = grid.shape
    for cx in range(w):
        for cy in range(h):
            if grid[cx, cy] or (cx, cy) in seen:
                continue
            comp = set()
            stack = [(cx, cy)]
            seen.add((cx, cy))
            while stack:
                x, y = stack.pop()
                comp.add((x, y))
                for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                    if 0 <= nx < w and 0 <= ny < h and not grid[nx, ny] and (nx, ny) not in seen:
                        seen.add((nx, ny))
                        stack.append((nx, ny))
            comps.append(comp)
    return comps


def generate_map(seed: int, width: int, height: int, wall_density: float = 0.14) -> WorldMap:
    """Seeded map with walled boundary and connected free interior."""
    if width < 8 or height < 8:
        raise ValueError(f"map must be at least 8x8, got {width}x{height}")
    rng = np.random.default_rng(seed)
    grid = np.zeros((width, height), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True

    interior = rng.random((width - 2, height - 2)) < wall_density
    grid[1:-1, 1:-1] = interior
    # a few short segments so rooms read as rooms, not speckle
    for _ in range(max(1, (width * height) // 64)):
        cx = int(rng.integers(2, width - 3))
        cy = int(rng.integers(2, height - 3))
        if rng.random() < 0.5:
            grid[cx : cx + 2, cy] = True
        else:
            grid[cx, cy : cy + 2] = True

    # repair connectivity: open walls between components until one remains
    comps = _components(grid)
    while len(comps) > 1:
        comps.sort(key=len)
        small = comps[0]
        opened = False
        for x, y in sorted(small):
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 < nx < width - 1 and 0 < ny < height - 1 and grid[nx, ny]:
                    grid[nx, ny] = False
                    opened = True
                    break
            if opened:
                break
        if not opened:
            # component boxed in by the boundary ring; fill it with wall instead
            for x, y in small:
                grid[x, y] = True
        comps = _components(grid)

    palette = rng.integers(0, N_PALETTE, size=(width, height)).astype(np.uint8)
    free = [c for c in zip(*np.nonzero(~grid))]
    goal = tuple(int(v) for v in free[int(rng.integers(len(free)))])
    return WorldMap(grid=grid, palette=palette, goal_cell=goal, seed=seed)


def _cast_column(world: WorldMap, px: float, py: float, rx: float, ry: float):
    """DDA traversal. Returns (wall_dist, palette_id, side).

    Distances are perpendicular (the ray vector includes the camera-plane
    offset, so sideDist is already fisheye-corrected).
    """
    cx, cy = int(math.floor(px)), int(math.floor(py))
    delta_x = abs(1.0 / rx) if rx != 0 else math.inf
    delta_y = abs(1.0 / ry) if ry != 0 else math.inf
    if rx < 0:
        step_x, side_x = -1, (px - cx) * delta_x
    else:
        step_x, side_x = 1, (cx + 1.0 - px) * delta_x
    if ry < 0:
        step_y, side_y = -1, (py - cy) * delta_y
    else:
        step_y, side_y = 1, (cy + 1.0 - py) * delta_y

    for _ in range(4 * (world.width + world.height)):
        if side_x < side_y:
            dist = side_x
            side_x += delta_x
            cx += step_x
            side = 0
        else:
            dist = side_y
            side_y += delta_y
            cy += step_y
            side = 1
        if world.is_wall(cx, cy):
            pal = int(world.palette[min(max(cx, 0), world.width - 1), min(max(cy, 0), world.height - 1)])
            return dist, pal, side
    raise RuntimeError("ray escaped the map; boundary must be walled")


def render_view(world: WorldMap, pose: Pose, resolution: int = 32) -> np.ndarray:
    """Egocentric column raycast (90 degree FOV), one ray per pixel column.

    The goal cell renders as a bright beacon pillar whenever a ray crosses it
    before hitting a wall. Returns uint8 RGB [resolution, resolution, 3].
    """
    cell = world.cell_of(pose.x, pose.y)
    if world.is_wall(*cell):
        raise ValueError(f"camera pose ({pose.x:.2f}, {pose.y:.2f}) is inside a wall")
    h = w = resolution
    img = np.empty((h, w, 3), dtype=np.float64)
    img[: h // 2] = CEILING_COLOR
    # slight floor gradient: nearer rows (bottom) brighter
    rows = np.arange(h // 2, h, dtype=np.float64)
    fade = 0.7 + 0.3 * (rows - h // 2) / max(h // 2 - 1, 1)
    img[h // 2 :] = FLOOR_COLOR * fade[:, None, None]

    dir_x, dir_y = math.cos(pose.yaw), math.sin(pose.yaw)
    # camera plane spans the 90 degree FOV; "plane" points to the agent's left
    plane_x, plane_y = -dir_y, dir_x

    wall_dist = np.empty(w)
    for c in range(w):
        camx = 2.0 * (c + 0.5) / w - 1.0
        rx = dir_x - plane_x * camx
        ry = dir_y - plane_y * camx
        dist, pal, side = _cast_column(world, pose.x, pose.y, rx, ry)
        dist = max(dist, 1e-6)
        wall_dist[c] = dist
        line = min(int(h / dist), h)
        top = (h - line) // 2
        shade = 1.0 / (1.0 + 0.25 * dist)
        if side == 1:
            shade *= 0.8
        img[top : top + line, c] = WALL_PALETTE[pal] * shade

    # goal beacon: a bright pillar sprite at the goal cell center, occluded
    # per column by nearer walls
    gx, gy = world.goal_cell[0] + 0.5, world.goal_cell[1] + 0.5
    rel_x, rel_y = gx - pose.x, gy - pose.y
    depth = rel_x * dir_x + rel_y * dir_y
    if depth > BEACON_MIN_DEPTH:
        lateral = rel_x * plane_x + rel_y * plane_y
        camx_sprite = -lateral / depth
        half = BEACON_RADIUS / depth
        bline = min(int(h / depth), h)
        btop = (h - bline) // 2
        bshade = 1.0 / (1.0 + 0.10 * depth)
        for c in range(w):
            camx = 2.0 * (c + 0.5) / w - 1.0
            if abs(camx - camx_sprite) <= half and depth < wall_dist[c]:
                img[btop : btop + bline, c] = BEACON_COLOR * bshade

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# expert driver
# ---------------------------------------------------------------------------

ADVANCE = 0.34  # nominal forward motion per action (m)
ZIG = 0.17  # target lateral excursion of the sideways gait (m)
TURN_CAP = 0.88  # max |dyaw| for an in-place rotation (rad)
TURN_WHILE_MOVING = 0.48  # max |dyaw| while advancing (rad)
ALIGN_LIMIT = 0.62  # rotate in place above this heading error (rad)
WAYPOINT_REACH = 0.55  # switch to the next waypoint inside this radius (m)
CLEARANCE = 0.18  # min distance kept from wall cells (m)


def shortest_path(world: WorldMap, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
    """A* over free cells, 4-connected, unit costs. Returns start..goal inclusive."""
    if world.is_wall(*start) or world.is_wall(*goal):
        raise ValueError("path endpoints must be free cells")
    if start == goal:
        return [start]
    frontier: list[tuple[int, int, tuple[int, int]]] = [(0, 0, start)]
    came: dict[tuple[int, int], tuple[int, int]] = {}
    cost = {start: 0}
    tick = 0
    while frontier:
        _, _, cur = heapq.heappop(frontier)
        if cur == goal:
            path = [cur]
            while path[-1] != start:
                path.append(came[path[-1]])
            return path[::-1]
        for nxt in ((cur[0] + 1, cur[1]), (cur[0] - 1, cur[1]), (cur[0], cur[1] + 1), (cur[0], cur[1] - 1)):
            if world.is_wall(*nxt):
                continue
            nc = cost[cur] + 1
            if nc < cost.get(nxt, 1 << 30):
                cost[nxt] = nc
                came[nxt] = cur
                tick += 1
                prio = nc + abs(nxt[0] - goal[0]) + abs(nxt[1] - goal[1])
                heapq.heappush(frontier, (prio, tick, nxt))
    raise AssertionError("goal unreachable on a connected map")


def _pose_is_safe(world: WorldMap, x: float, y: float) -> bool:
    for ox in (-CLEARANCE, CLEARANCE):
        for oy in (-CLEARANCE, CLEARANCE):
            if world.is_wall(*world.cell_of(x + ox, y + oy)):
                return False
    return True


def plan_expert(
    world: WorldMap,
    start_cell: tuple[int, int],
    goal_cell: tuple[int, int],
    rng: np.random.Generator,
    max_actions: int = 400,
) -> tuple[list[Action], list[Pose]]:
    """Drive the A* path with a jittered sideways gait.

    Motions are purposely sub-cell and partly lateral so that, after dataset
    normalization by mean step displacement, components stay inside the
    two-digit bin range instead of piling up at the clamp. Every dx >= 0;
    the final pose lands within ~0.1 m of the goal cell center.
    """
    path = shortest_path(world, start_cell, goal_cell)
    waypoints = [(cx + 0.5, cy + 0.5) for cx, cy in path[1:]]
    sx, sy = start_cell[0] + 0.5, start_cell[1] + 0.5
    if not waypoints:
        return [], [Pose(sx, sy, 0.0)]

    yaw0 = math.atan2(waypoints[0][1] - sy, waypoints[0][0] - sx)
    pose = Pose(sx, sy, yaw0)
    poses = [pose]
    actions: list[Action] = []
    zig = 1.0 if rng.random() < 0.5 else -1.0

    def jit() -> float:
        return float(rng.uniform(0.9, 1.1))

    def emit(a: Action) -> None:
        nonlocal pose
        actions.append(a)
        pose = step_pose(pose, a)
        if not _pose_is_safe(world, pose.x, pose.y):
            raise AssertionError("expert stepped too close to a wall")
        poses.append(pose)

    for i, (wx, wy) in enumerate(waypoints):
        last = i == len(waypoints) - 1
        reach = 0.08 if last else WAYPOINT_REACH
        while len(actions) < max_actions:
            vx, vy = wx - pose.x, wy - pose.y
            d = math.hypot(vx, vy)
            if d <= reach:
                break
            err = wrap_angle(math.atan2(vy, vx) - pose.yaw)
            if abs(err) > ALIGN_LIMIT:
                turn = max(-TURN_CAP, min(TURN_CAP, err)) * jit()
                emit(Action.move(0.0, 0.0, max(-0.95, min(0.95, turn))))
                continue
            # body-frame vector to the waypoint
            fwd = vx * math.cos(pose.yaw) + vy * math.sin(pose.yaw)
            left = -vx * math.sin(pose.yaw) + vy * math.cos(pose.yaw)
            if last and d < WAYPOINT_REACH:
                dx = max(0.02, min(fwd, 0.36))
                dy = max(-0.34, min(0.34, left))
            else:
                dx = min(ADVANCE * jit(), max(fwd, 0.05))
                dy = left + zig * ZIG * jit()
                dy = max(-0.36, min(0.36, dy))
                zig = -zig
            dyaw = max(-TURN_WHILE_MOVING, min(TURN_WHILE_MOVING, err)) * jit()
            cand = Action.move(dx, dy, dyaw)
            nxt = step_pose(pose, cand)
            if not _pose_is_safe(world, nxt.x, nxt.y):
                cand = Action.move(dx, max(-0.25, min(0.25, left)), dyaw)
                nxt = step_pose(pose, cand)
            if not _pose_is_safe(world, nxt.x, nxt.y):
                cand = Action.move(dx, 0.0, dyaw)
                nxt = step_pose(pose, cand)
            if not _pose_is_safe(world, nxt.x, nxt.y):
                cand = Action.move(min(0.12, dx), 0.0, 0.0)
            emit(cand)
        else:
            raise AssertionError("expert exceeded the action budget")
    return actions, poses
