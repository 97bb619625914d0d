"""Trajectory records, dataset normalization/filtering, and on-disk layout.

A dataset directory holds ``manifest.json`` plus one ``traj_%06d/`` directory
per trajectory with ``meta.json``, ``start.ppm``, ``goal.ppm`` and per-step
frames ``o_%03d.ppm``. Stored trajectories are in normalized units: planar
motion components divided by the dataset's mean step displacement (and
clamped to the bin range), poses re-integrated so that replaying the stored
actions reproduces the stored poses exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import COMPONENT_LIMIT, Action, Pose, step_pose
from .gridworld import generate_map, plan_expert, render_view, shortest_path
from .ppm import read_ppm, write_ppm

SCHEMA_VERSION = 1
MIN_STEPS = 3


class TrajectoryRejected(ValueError):
    """A trajectory violated the length or backward-motion filters."""


@dataclass
class Trajectory:
    """Expert rollout: start/goal context plus per-step actions and poses."""

    map_seed: int
    start_pose: Pose
    goal_pos: tuple[float, float]
    actions: list[Action]  # moves only; the terminal stop is implied
    poses: list[Pose]  # len(actions) + 1, poses[0] == start_pose

    def __post_init__(self):
        if len(self.poses) != len(self.actions) + 1:
            raise ValueError("poses must have one entry per action plus the start")

    @property
    def steps(self) -> int:
        return len(self.actions)


def check_filters(traj: Trajectory) -> None:
    if traj.steps < MIN_STEPS:
        raise TrajectoryRejected(f"trajectory has {traj.steps} steps, need >= {MIN_STEPS}")
    for i, a in enumerate(traj.actions):
        if a.dx < 0:
            raise TrajectoryRejected(f"backward motion at step {i}: dx = {a.dx:.4f}")


def normalize_trajectory(traj: Trajectory, avg_step_size: float) -> Trajectory:
    """Divide planar motion by the dataset mean step size; dyaw unchanged.

    Components are clamped to the bin range afterwards (values above the
    mean necessarily normalize past 1), and poses are re-integrated from the
    scaled start pose so the stored record stays exactly replayable.
    """
    if avg_step_size <= 0:
        raise ValueError("avg_step_size must be positive")
    check_filters(traj)

    def clamp(v: float) -> float:
        return max(-COMPONENT_LIMIT, min(COMPONENT_LIMIT, v))

    actions = [
        Action.move(clamp(a.dx / avg_step_size), clamp(a.dy / avg_step_size), clamp(a.dyaw))
        for a in traj.actions
    ]
    p0 = Pose(traj.start_pose.x / avg_step_size, traj.start_pose.y / avg_step_size, traj.start_pose.yaw)
    poses = [p0]
    for a in actions:
        poses.append(step_pose(poses[-1], a))
    goal = (traj.goal_pos[0] / avg_step_size, traj.goal_pos[1] / avg_step_size)
    return replace(traj, start_pose=p0, goal_pos=goal, actions=actions, poses=poses)


def window_samples(steps: int, stride: int = 1) -> list[int]:
    """Anchor indices of the sliding window over a trajectory of ``steps`` steps.

    Each anchor t yields one planner sample (predict a_{t+1}) and one
    world-model sample (predict o_{t+1}); the terminal stop sample is built
    separately by the batch maker.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, steps, stride))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _bfs_distances(grid: np.ndarray, source: tuple[int, int]) -> dict[tuple[int, int], int]:
    dist = {source: 0}
    frontier = [source]
    while frontier:
        nxt = []
        for x, y in frontier:
            for nb in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 <= nb[0] < grid.shape[0] and 0 <= nb[1] < grid.shape[1]:
                    if not grid[nb] and nb not in dist:
                        dist[nb] = dist[(x, y)] + 1
                        nxt.append(nb)
        frontier = nxt
    return dist


def synthesize_trajectory(
    master_seed: int,
    index: int,
    width: int,
    height: int,
    path_min: int,
    path_max: int,
    wall_density: float,
    max_raw_steps: int = 19,
    max_attempts: int = 40,
) -> Trajectory:
    """Deterministically synthesize one expert trajectory (raw units, meters)."""
    for attempt in range(max_attempts):
        rng = np.random.default_rng([master_seed, index, attempt])
        map_seed = int(rng.integers(1 << 62))
        world = generate_map(map_seed, width, height, wall_density)
        dist = _bfs_distances(world.grid, world.goal_cell)
        starts = sorted(c for c, d in dist.items() if path_min <= d <= path_max)
        if not starts:
            continue
        start = starts[int(rng.integers(len(starts)))]
        try:
            actions, poses = plan_expert(world, start, world.goal_cell, rng)
        except AssertionError:
            continue
        goal = (world.goal_cell[0] + 0.5, world.goal_cell[1] + 0.5)
        final = poses[-1]
        if not (MIN_STEPS <= len(actions) <= max_raw_steps):
            continue
        if math.hypot(final.x - goal[0], final.y - goal[1]) > 0.15:
            continue
        if any(a.dx < 0 for a in actions):
            continue
        return Trajectory(
            map_seed=map_seed, start_pose=poses[0], goal_pos=goal, actions=actions, poses=poses
        )
    raise RuntimeError(f"could not synthesize trajectory {index} in {max_attempts} attempts")


def _action_rows(actions: list[Action]) -> list[list[float]]:
    return [[a.dx, a.dy, a.dyaw] for a in actions]


def _pose_rows(poses: list[Pose]) -> list[list[float]]:
    return [[p.x, p.y, p.yaw] for p in poses]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_dataset(config: dict, out_dir: str | Path) -> dict:
    """Generate, normalize and write the full dataset. Returns the manifest.

    Deterministic in ``config['seed']``: trajectory i draws from an RNG keyed
    on (seed, i, attempt), so regeneration is byte-identical.
    """
    out = Path(out_dir)
    n_train, n_eval = int(config["n_train"]), int(config["n_eval"])
    width, height = int(config["width"]), int(config["height"])
    resolution = int(config.get("resolution", 32))
    seed = int(config["seed"])
    path_min = int(config.get("path_min", 3))
    path_max = int(config.get("path_max", 4))
    wall_density = float(config.get("wall_density", 0.14))
    total = n_train + n_eval
    if total < 1:
        raise ValueError("dataset needs at least one trajectory")

    raw = [
        synthesize_trajectory(seed, i, width, height, path_min, path_max, wall_density)
        for i in range(total)
    ]
    displacements = [a.displacement for t in raw for a in t.actions]
    divisor = float(np.mean(displacements))

    out.mkdir(parents=True, exist_ok=True)
    traj_entries = []
    norm_disp_total, norm_steps = 0.0, 0
    for i, raw_traj in enumerate(raw):
        traj = normalize_trajectory(raw_traj, divisor)
        norm_disp_total += sum(a.displacement for a in traj.actions)
        norm_steps += traj.steps

        world = generate_map(raw_traj.map_seed, width, height, wall_density)
        tdir = out / f"traj_{i:06d}"
        tdir.mkdir(exist_ok=True)
        hasher = hashlib.sha256()
        meta = {
            "map_seed": raw_traj.map_seed,
            "p0": [traj.start_pose.x, traj.start_pose.y, traj.start_pose.yaw],
            "goal_pos": list(traj.goal_pos),
            "actions": _action_rows(traj.actions),
            "poses": _pose_rows(traj.poses),
        }
        meta_json = canonical_json(meta)
        (tdir / "meta.json").write_text(meta_json)
        hasher.update(meta_json.encode())

        frames = [render_view(world, p, resolution) for p in raw_traj.poses]
        write_ppm(tdir / "start.ppm", frames[0])
        write_ppm(tdir / "goal.ppm", frames[-1])
        for t in range(1, len(frames)):
            write_ppm(tdir / f"o_{t:03d}.ppm", frames[t])
        for frame in frames:
            hasher.update(frame.tobytes())
        hasher.update(frames[-1].tobytes())  # goal frame

        traj_entries.append(
            {
                "index": i,
                "split": "train" if i < n_train else "eval",
                "map_seed": raw_traj.map_seed,
                "steps": traj.steps,
                "sha256": hasher.hexdigest(),
            }
        )

    dataset_hash = hashlib.sha256("".join(t["sha256"] for t in traj_entries).encode()).hexdigest()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "width": width,
            "height": height,
            "resolution": resolution,
            "n_train": n_train,
            "n_eval": n_eval,
            "seed": seed,
            "path_min": path_min,
            "path_max": path_max,
            "wall_density": wall_density,
        },
        "counts": {"train": n_train, "eval": n_eval},
        "resolution": resolution,
        # SR threshold: mean step displacement as stored (normalized units)
        "avg_step_size": norm_disp_total / norm_steps,
        "normalization_divisor_m": divisor,
        "trajectories": traj_entries,
        "dataset_hash": dataset_hash,
    }
    (out / "manifest.json").write_text(canonical_json(manifest))
    return manifest


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


@dataclass
class LoadedTrajectory:
    index: int
    map_seed: int
    start_pose: Pose
    goal_pos: tuple[float, float]
    actions: list[Action]
    poses: list[Pose]
    start_frame: np.ndarray
    goal_frame: np.ndarray
    frames: list[np.ndarray]  # o_1 .. o_T

    @property
    def all_frames(self) -> list[np.ndarray]:
        """o_0 .. o_T with o_0 = the start view."""
        return [self.start_frame] + self.frames


class DatasetReader:
    """Random access over a dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())

    @property
    def avg_step_size(self) -> float:
        return float(self.manifest["avg_step_size"])

    @property
    def dataset_hash(self) -> str:
        return self.manifest["dataset_hash"]

    @property
    def resolution(self) -> int:
        return int(self.manifest["resolution"])

    def indices(self, split: str) -> list[int]:
        return [t["index"] for t in self.manifest["trajectories"] if t["split"] == split]

    def load(self, index: int) -> LoadedTrajectory:
        tdir = self.root / f"traj_{index:06d}"
        meta = json.loads((tdir / "meta.json").read_text())
        actions = [Action.move(*row) for row in meta["actions"]]
        poses = [Pose(*row) for row in meta["poses"]]
        frames = [read_ppm(tdir / f"o_{t:03d}.ppm") for t in range(1, len(actions) + 1)]
        return LoadedTrajectory(
            index=index,
            map_seed=meta["map_seed"],
            start_pose=Pose(*meta["p0"]),
            goal_pos=tuple(meta["goal_pos"]),
            actions=actions,
            poses=poses,
            start_frame=read_ppm(tdir / "start.ppm"),
            goal_frame=read_ppm(tdir / "goal.ppm"),
            frames=frames,
        )
