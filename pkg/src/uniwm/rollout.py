"""Alternating planner / world-model inference with the memory bank.

Per step: reset the intra-step slot, extract and deposit the current
observation's K/V, merge with the cross-step store (per memory mode), decode
the next action with memory-augmented attention, then decode the imagined
next observation with the same fused memory, and finally append the step's
intra memory to the cross store. A Stop ends the loop before the
visualization substep. Every rollout records an event trace so tests can
assert the substep ordering.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import membank
from .codebook import Codebook, decode_image, encode_image
from .geometry import Action, Pose, step_pose
from .model import FusedKV, ModelConfig, decode_constrained
from .ppm import write_ppm
from .samples import planner_prompt, world_prompt
from .tensor import Tensor
from .vocab import VocabLayout, decode_action

MEMORY_MODES = ("off", "intra", "full")
STRATEGIES = ("interleave", "predict_both")


@dataclass
class RolloutConfig:
    max_steps: int = 20
    memory: str = "full"
    top_k: int = membank.DEFAULT_TOP_K
    gamma: float = membank.DEFAULT_DECAY
    strategy: str = "interleave"
    cross_capacity: int | None = None
    record_memtrace: bool = False
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.memory not in MEMORY_MODES:
            raise ValueError(f"memory mode must be one of {MEMORY_MODES}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class RolloutResult:
    actions: list[Action]  # ends with a stop, or truncated at max_steps
    images: list[np.ndarray]  # imagined views, one per move
    image_codes: list[np.ndarray]
    poses: list[Pose]  # integrated, len == moves + 1
    truncated: bool
    trace: list[str] = field(default_factory=list)
    memtrace: list[dict] | None = None

    @property
    def moves(self) -> int:
        return sum(1 for a in self.actions if not a.stop)


def run_trajectory(
    params: dict[str, Tensor],
    start_image: np.ndarray,
    goal_image: np.ndarray,
    p0: Pose,
    cfg: RolloutConfig,
    model_config: ModelConfig,
    layout: VocabLayout,
    codebook: Codebook,
    extent: tuple[float, float, float, float],
) -> RolloutResult:
    resolution = start_image.shape[0]
    start_codes = encode_image(start_image, codebook)
    goal_codes = encode_image(goal_image, codebook)
    n_img = codebook.tokens_per_image(resolution, resolution)

    cross = membank.CrossStepMemory(max_entries=cfg.cross_capacity)
    actions: list[Action] = []
    images: list[np.ndarray] = []
    image_codes: list[np.ndarray] = []
    poses = [p0]
    trace: list[str] = []
    memtrace: list[dict] = []
    cur_codes = start_codes  # o_hat_0 = o_s
    truncated = True
    rng = np.random.default_rng(0) if cfg.temperature > 0 else None

    for t in range(1, cfg.max_steps + 1):
        use_memory = cfg.memory != "off"
        joint = cfg.strategy == "predict_both"
        task = "both" if joint else "planner"
        prompt, span = planner_prompt(start_codes, goal_codes, cur_codes, p0, extent, layout, task=task)

        fused: FusedKV | None = None
        intra = None
        if use_memory:
            trace.append("reset")
            intra = membank.reset_intra()
            captured = _capture(params, prompt, span, model_config)
            intra = membank.deposit(captured, t, n_img, model_config.l_save)
            trace.append("deposit")
            if cfg.memory == "full":
                fused, mtrace = membank.merge(intra, cross, cfg.top_k, cfg.gamma)
                if cfg.record_memtrace:
                    memtrace.append({"step": t, **mtrace})
            else:
                fused = dict(intra.layers)
            trace.append("merge")

        toks, _ = decode_constrained(
            params, prompt, role=task, config=model_config, layout=layout,
            fused_memory=fused, n_img=n_img if joint else None,
            temperature=cfg.temperature, rng=rng,
        )
        act_part = toks[:1] if (len(toks) == 1 or toks[0] == layout.stop) else toks[:3]
        action = decode_action(act_part, layout)
        trace.append("action")
        actions.append(action)
        if action.stop:
            truncated = False
            break

        poses.append(step_pose(poses[-1], action))
        if joint:
            obs_tokens = toks[3:]
        else:
            wprompt, _ = world_prompt(start_codes, goal_codes, cur_codes, p0, extent, action, layout)
            obs_tokens, _ = decode_constrained(
                params, wprompt, role="world", config=model_config, layout=layout,
                fused_memory=fused, n_img=n_img, temperature=cfg.temperature, rng=rng,
            )
        codes = np.array([layout.image_code(tok) for tok in obs_tokens], dtype=np.int32)
        trace.append("observation")
        image_codes.append(codes)
        images.append(decode_image(codes, codebook, resolution, resolution))
        cur_codes = codes

        if cfg.memory == "full":
            membank.append_cross(cross, intra)
            trace.append("append_cross")

    return RolloutResult(
        actions=actions,
        images=images,
        image_codes=image_codes,
        poses=poses,
        truncated=truncated,
        trace=trace,
        memtrace=memtrace if cfg.record_memtrace else None,
    )


def _capture(params, prompt, span, model_config):
    """Plain (memoryless) pass over the prompt to extract the span's K/V."""
    from .model import InferenceSession

    sess = InferenceSession(params, model_config)
    _, captured = sess.prefill(prompt[: span[1]], capture_span=span)
    return captured


def closed_loop_replay(
    world_map,
    result: RolloutResult,
    divisor: float,
    resolution: int,
) -> list[np.ndarray]:
    """Render the true views at the integrated poses (scaled back to meters).

    One render per imagined frame; pairing them gives per-step imagination
    fidelity. Poses may pass through walls (metrics are pose-based); such
    renders raise, so they are returned as None-placeholders by the caller's
    choice -- here we render a black frame for in-wall poses.
    """
    from .gridworld import render_view

    renders = []
    for p in result.poses[1:]:
        raw = Pose(p.x * divisor, p.y * divisor, p.yaw)
        try:
            renders.append(render_view(world_map, raw, resolution))
        except ValueError:
            renders.append(np.zeros((resolution, resolution, 3), dtype=np.uint8))
    return renders


def dump_rollout(out_dir: str | Path, result: RolloutResult, true_renders: list[np.ndarray] | None = None) -> None:
    """Write actions.csv, poses.csv, imagined frames, and the memory trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "actions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "dx", "dy", "dyaw"])
        for t, a in enumerate(result.actions, start=1):
            w.writerow([t, "STOP", "", ""] if a.stop else [t, f"{a.dx:.6f}", f"{a.dy:.6f}", f"{a.dyaw:.6f}"])
    with open(out / "poses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "yaw"])
        for t, p in enumerate(result.poses):
            w.writerow([t, f"{p.x:.6f}", f"{p.y:.6f}", f"{p.yaw:.6f}"])
    for i, img in enumerate(result.images, start=1):
        write_ppm(out / f"imag_{i:03d}.ppm", img)
    for i, img in enumerate(true_renders or [], start=1):
        write_ppm(out / f"true_{i:03d}.ppm", img)
    if result.memtrace is not None:
        (out / "memtrace.json").write_text(json.dumps(result.memtrace, sort_keys=True))
