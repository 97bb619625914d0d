"""Evaluation harness: rollouts over the eval split, metric aggregation,
open-loop @n fidelity, and report files (metrics.json + metrics.csv).

Navigation metrics compare the predicted open-loop trajectory (integrated
from predicted actions) against the stored expert poses. Trajectories are
padded with their final pose to a common length before ATE/RPE: a stopped
agent stays where it stopped.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import os
from dataclasses import dataclass

import numpy as np

from . import membank
from .codebook import Codebook, decode_image, encode_image
from .dataset import DatasetReader, LoadedTrajectory
from .geometry import Pose
from .metrics import ate, pad_to_length, psnr, rpe, ssim, success_rate
from .model import ModelConfig, decode_constrained, InferenceSession
from .rollout import RolloutConfig, RolloutResult, run_trajectory
from .samples import world_prompt
from .tensor import Tensor
from .vocab import VocabLayout

REPORT_SCHEMA_VERSION = 1
ATE_CONVENTION = "anchored-start, no rigid alignment; shorter trajectory padded with its final pose"


@dataclass
class EvalSettings:
    at_n: tuple[int, ...] = (1, 5)
    max_anchors: int = 4  # open-loop @n anchors per trajectory (evenly spaced)
    at_n_trajectories: int | None = 60  # cap for the @n sweep; None = all
    workers: int = 0  # 0 = cpu count


def open_loop_predict(
    params: dict[str, Tensor],
    traj_codes: list[np.ndarray],
    actions,
    anchor: int,
    n: int,
    p0: Pose,
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    extent,
    cfg: RolloutConfig,
    model_config: ModelConfig,
    layout: VocabLayout,
    n_img: int,
) -> np.ndarray:
    """Recursively imagine n steps from the ground-truth frame at ``anchor``,
    conditioning on the ground-truth actions; returns the final frame codes."""
    cross = membank.CrossStepMemory(max_entries=cfg.cross_capacity)
    cur = traj_codes[anchor]
    for i in range(n):
        action = actions[anchor + i]
        prompt, span = world_prompt(start_codes, goal_codes, cur, p0, extent, action, layout)
        fused = None
        intra = None
        if cfg.memory != "off":
            sess = InferenceSession(params, model_config)
            _, captured = sess.prefill(prompt[: span[1]], capture_span=span)
            intra = membank.deposit(captured, i + 1, n_img, model_config.l_save)
            if cfg.memory == "full":
                fused, _ = membank.merge(intra, cross, cfg.top_k, cfg.gamma)
            else:
                fused = dict(intra.layers)
        toks, _ = decode_constrained(
            params, prompt, role="world", config=model_config, layout=layout, fused_memory=fused, n_img=n_img
        )
        cur = np.array([layout.image_code(t) for t in toks], dtype=np.int32)
        if cfg.memory == "full":
            membank.append_cross(cross, intra)
    return cur


def rollout_metrics_at_n(
    params: dict[str, Tensor],
    traj: LoadedTrajectory,
    n: int,
    cfg: RolloutConfig,
    model_config: ModelConfig,
    layout: VocabLayout,
    codebook: Codebook,
    extent,
    max_anchors: int | None = None,
) -> tuple[float, float]:
    """(SSIM@n, PSNR@n) averaged over anchor positions."""
    frames = traj.all_frames
    steps = len(traj.actions)
    if steps < n:
        raise ValueError(f"trajectory has {steps} steps, cannot roll out {n}")
    res = frames[0].shape[0]
    n_img = codebook.tokens_per_image(res, res)
    codes = [encode_image(f, codebook) for f in frames]
    start_codes, goal_codes = codes[0], encode_image(traj.goal_frame, codebook)
    anchors = list(range(0, steps - n + 1))
    if max_anchors is not None and len(anchors) > max_anchors:
        anchors = [anchors[i] for i in np.linspace(0, len(anchors) - 1, max_anchors).astype(int)]
    ssims, psnrs = [], []
    for t in anchors:
        pred_codes = open_loop_predict(
            params, codes, traj.actions, t, n, traj.start_pose, start_codes, goal_codes,
            extent, cfg, model_config, layout, n_img,
        )
        pred = decode_image(pred_codes, codebook, res, res)
        ssims.append(ssim(pred, frames[t + n]))
        psnrs.append(psnr(pred, frames[t + n]))
    return float(np.mean(ssims)), float(np.mean(psnrs))


# ---------------------------------------------------------------------------
# per-trajectory evaluation (worker function)
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _init_worker(params, model_config, layout, codebook, reader_root, rollout_cfg, settings):
    _CTX.update(
        params=params, model_config=model_config, layout=layout, codebook=codebook,
        reader=DatasetReader(reader_root), rollout_cfg=rollout_cfg, settings=settings,
    )


def _extent(reader: DatasetReader) -> tuple[float, float, float, float]:
    cfg = reader.manifest["config"]
    div = float(reader.manifest["normalization_divisor_m"])
    return (0.0, cfg["width"] / div, 0.0, cfg["height"] / div)


def _eval_one(job: tuple[int, bool]) -> dict:
    index, do_at_n = job
    params: dict = _CTX["params"]
    reader: DatasetReader = _CTX["reader"]
    cfg: RolloutConfig = _CTX["rollout_cfg"]
    settings: EvalSettings = _CTX["settings"]
    layout, codebook, model_config = _CTX["layout"], _CTX["codebook"], _CTX["model_config"]
    traj = reader.load(index)
    extent = _extent(reader)

    result: RolloutResult = run_trajectory(
        params, traj.start_frame, traj.goal_frame, traj.start_pose, cfg, model_config, layout, codebook, extent
    )
    final = result.poses[-1]
    goal_dist = math.hypot(final.x - traj.goal_pos[0], final.y - traj.goal_pos[1])
    n_pose = max(len(result.poses), len(traj.poses))
    pred = pad_to_length(result.poses, n_pose)
    gt = pad_to_length(traj.poses, n_pose)
    row = {
        "index": index,
        "steps_pred": result.moves,
        "steps_gt": len(traj.actions),
        "truncated": result.truncated,
        "final_pose": [final.x, final.y, final.yaw],
        "goal_pos": list(traj.goal_pos),
        "goal_dist": goal_dist,
        "ate": ate(pred, gt),
        "rpe": rpe(pred, gt),
    }
    if do_at_n:
        for n in settings.at_n:
            if len(traj.actions) >= n:
                s, p = rollout_metrics_at_n(
                    params, traj, n, cfg, model_config, layout, codebook, extent, settings.max_anchors
                )
                row[f"ssim@{n}"] = s
                row[f"psnr@{n}"] = p
    return row


def evaluate(
    params: dict[str, Tensor],
    reader: DatasetReader,
    rollout_cfg: RolloutConfig,
    model_config: ModelConfig,
    layout: VocabLayout,
    codebook: Codebook,
    settings: EvalSettings | None = None,
    split: str = "eval",
    header_extra: dict | None = None,
    max_trajectories: int | None = None,
) -> dict:
    """Run the full evaluation; returns the report dict (see write_report)."""
    settings = settings or EvalSettings()
    indices = reader.indices(split)
    if max_trajectories is not None:
        indices = indices[:max_trajectories]
    if not indices:
        raise ValueError(f"no {split} trajectories")
    at_n_set = set(indices if settings.at_n_trajectories is None else indices[: settings.at_n_trajectories])
    jobs = [(i, i in at_n_set) for i in indices]

    workers = settings.workers or os.cpu_count() or 1
    init_args = (params, model_config, layout, codebook, reader.root, rollout_cfg, settings)
    if workers > 1 and len(jobs) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=init_args) as pool:
            rows = pool.map(_eval_one, jobs)  # ordered by job index
    else:
        _init_worker(*init_args)
        rows = [_eval_one(j) for j in jobs]

    finals = [Pose(*r["final_pose"]) for r in rows]
    goal_positions = [tuple(r["goal_pos"]) for r in rows]
    sr = success_rate(finals, goal_positions, reader.avg_step_size)

    aggregate = {
        "SR": sr,
        "ATE": float(np.mean([r["ate"] for r in rows])),
        "RPE": float(np.mean([r["rpe"] for r in rows])),
        "count": len(rows),
        "truncated_fraction": float(np.mean([1.0 if r["truncated"] else 0.0 for r in rows])),
    }
    for n in settings.at_n:
        vals_s = [r[f"ssim@{n}"] for r in rows if f"ssim@{n}" in r]
        vals_p = [r[f"psnr@{n}"] for r in rows if f"psnr@{n}" in r]
        if vals_s:
            aggregate[f"SSIM@{n}"] = float(np.mean(vals_s))
            aggregate[f"PSNR@{n}"] = float(np.mean(vals_p))
    aggregate["SSIM"] = aggregate.get("SSIM@1", float("nan"))
    aggregate["PSNR"] = aggregate.get("PSNR@1", float("nan"))

    header = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "split": split,
        "memory_mode": rollout_cfg.memory,
        "step_strategy": rollout_cfg.strategy,
        "l_save": list(model_config.l_save),
        "avg_step_size": reader.avg_step_size,
        "dataset_hash": reader.dataset_hash,
        "ate_convention": ATE_CONVENTION,
        "at_n": list(settings.at_n),
    }
    header.update(header_extra or {})
    return {"header": header, "aggregate": aggregate, "per_trajectory": rows}


def write_report(report: dict, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    rows = report["per_trajectory"]
    keys = ["index", "steps_pred", "steps_gt", "truncated", "goal_dist", "ate", "rpe"]
    extra = sorted({k for r in rows for k in r if k not in keys and not isinstance(r[k], list)})
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys + extra)
        for r in rows:
            w.writerow([r.get(k, "") for k in keys + extra])
