"""Interleaved two-role training loop with checkpointing and CSV logging."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor
from .codebook import Codebook, encode_image
from .dataset import DatasetReader, window_samples
from .losses import loss_plan_batch, loss_world_batch
from .model import ModelConfig, forward_batch, init_params, save_checkpoint
from .optim import AdamState, adam_step
from .samples import (
    ROLE_BOTH,
    ROLE_PLANNER,
    ROLE_WORLD,
    TokenSample,
    build_both_sample,
    build_planner_sample,
    build_world_sample,
)
from .geometry import Action
from .vocab import VocabLayout

PLAN_LOSS_MODES = ("bin_token", "label_smoothing")
WORLD_LOSS_MODES = ("reconstruction", "label_smoothing")
STEP_STRATEGIES = ("interleave", "predict_both")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 2
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    window_stride: int = 2
    samples_per_epoch: int | None = 4500
    plan_loss: str = "bin_token"
    world_loss: str = "reconstruction"
    label_smooth_eps: float = 0.1
    step_strategy: str = "interleave"
    checkpoint_every: int = 1  # epochs
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if min(self.lr, self.epochs, self.batch_size, self.grad_accum) < 0:
            raise ValueError("hyperparameters must be positive")
        if self.plan_loss not in PLAN_LOSS_MODES:
            raise ValueError(f"plan_loss must be one of {PLAN_LOSS_MODES}")
        if self.world_loss not in WORLD_LOSS_MODES:
            raise ValueError(f"world_loss must be one of {WORLD_LOSS_MODES}")
        if self.step_strategy not in STEP_STRATEGIES:
            raise ValueError(f"step_strategy must be one of {STEP_STRATEGIES}")


@dataclass
class TokenizedTrajectory:
    """A trajectory with every frame pre-quantized to codebook indices."""

    index: int
    p0: object
    codes: list[np.ndarray]  # o_0 .. o_T
    goal_codes: np.ndarray
    actions: list[Action]


@dataclass
class TokenizedDataset:
    trajectories: list[TokenizedTrajectory]
    extent: tuple[float, float, float, float]
    n_img: int
    avg_step_size: float
    dataset_hash: str


def tokenize_dataset(reader: DatasetReader, codebook: Codebook, split: str = "train") -> TokenizedDataset:
    """Encode every frame once; samples are then cheap to assemble."""
    cfg = reader.manifest["config"]
    div = float(reader.manifest["normalization_divisor_m"])
    extent = (0.0, cfg["width"] / div, 0.0, cfg["height"] / div)
    res = reader.resolution
    trajs = []
    for idx in reader.indices(split):
        t = reader.load(idx)
        codes = [encode_image(f, codebook) for f in t.all_frames]
        trajs.append(
            TokenizedTrajectory(
                index=idx,
                p0=t.start_pose,
                codes=codes,
                goal_codes=encode_image(t.goal_frame, codebook),
                actions=t.actions,
            )
        )
    if not trajs:
        raise ValueError(f"dataset has no {split} trajectories")
    return TokenizedDataset(
        trajectories=trajs,
        extent=extent,
        n_img=codebook.tokens_per_image(res, res),
        avg_step_size=reader.avg_step_size,
        dataset_hash=reader.dataset_hash,
    )


# a sample descriptor: (trajectory position in list, anchor step t, kind)
KIND_PLAN, KIND_WORLD, KIND_STOP, KIND_BOTH, KIND_BOTH_STOP = "plan", "world", "stop", "both", "both_stop"


def enumerate_descriptors(data: TokenizedDataset, stride: int, strategy: str) -> list[tuple[int, int, str]]:
    out = []
    for ti, traj in enumerate(data.trajectories):
        anchors = window_samples(len(traj.actions), stride)
        if strategy == "predict_both":
            out.extend((ti, t, KIND_BOTH) for t in anchors)
            out.append((ti, len(traj.actions), KIND_BOTH_STOP))
        else:
            out.extend((ti, t, KIND_PLAN) for t in anchors)
            out.extend((ti, t, KIND_WORLD) for t in anchors)
            out.append((ti, len(traj.actions), KIND_STOP))
    return out


def build_sample(data: TokenizedDataset, desc: tuple[int, int, str], layout: VocabLayout, context_len: int) -> TokenSample:
    ti, t, kind = desc
    traj = data.trajectories[ti]
    args = (traj.codes[0], traj.goal_codes, traj.codes[t], traj.p0, data.extent)
    if kind == KIND_PLAN:
        return build_planner_sample(*args, traj.actions[t], layout, context_len)
    if kind == KIND_STOP:
        return build_planner_sample(*args, Action(stop=True), layout, context_len)
    if kind == KIND_WORLD:
        return build_world_sample(*args, traj.actions[t], traj.codes[t + 1], layout, context_len)
    if kind == KIND_BOTH:
        return build_both_sample(*args, traj.actions[t], traj.codes[t + 1], layout, context_len)
    if kind == KIND_BOTH_STOP:
        return build_both_sample(*args, Action(stop=True), None, layout, context_len)
    raise ValueError(kind)


def make_interleaved_batches(
    data: TokenizedDataset,
    batch_size: int,
    seed: int,
    stride: int = 1,
    strategy: str = "interleave",
    cap: int | None = None,
) -> list[list[tuple[int, int, str]]]:
    """Shuffled batches; in interleave mode each batch alternates the roles."""
    descs = enumerate_descriptors(data, stride, strategy)
    if not descs:
        raise ValueError("dataset produced no samples")
    rng = np.random.default_rng(seed)
    if strategy == "predict_both":
        order = [descs[i] for i in rng.permutation(len(descs))]
        if cap is not None:
            order = order[:cap]
        return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    planner = [d for d in descs if d[2] in (KIND_PLAN, KIND_STOP)]
    world = [d for d in descs if d[2] == KIND_WORLD]
    planner = [planner[i] for i in rng.permutation(len(planner))]
    world = [world[i] for i in rng.permutation(len(world))]
    # alternating fill so every batch mixes both substeps
    merged: list[tuple[int, int, str]] = []
    for p, w in zip(planner, world):
        merged.extend((p, w))
    longer = planner[len(world) :] + world[len(planner) :]
    merged.extend(longer)
    if cap is not None:
        merged = merged[:cap]
    return [merged[i : i + batch_size] for i in range(0, len(merged), batch_size)]


def pad_batch(samples: list[TokenSample], pad_id: int) -> np.ndarray:
    width = max(len(s.tokens) for s in samples)
    out = np.full((len(samples), width), pad_id, dtype=np.int32)
    for i, s in enumerate(samples):
        out[i, : len(s.tokens)] = s.tokens
    return out


class NanLoss(RuntimeError):
    pass


def _role_groups(samples: list[TokenSample]) -> dict[str, list[TokenSample]]:
    groups: dict[str, list[TokenSample]] = {}
    for s in samples:
        key = s.role
        if key == ROLE_BOTH:
            # stop samples have no observation part and a different length
            key = "both_stop" if len(s.target_positions) == 1 else "both_move"
        groups.setdefault(key, []).append(s)
    return groups


def _group_loss(
    logits3: Tensor,
    key: str,
    group: list[TokenSample],
    dist_table: np.ndarray,
    layout: VocabLayout,
    cfg: TrainConfig,
):
    """Returns (scalar loss Tensor, role label for the log)."""
    plan_eps = cfg.label_smooth_eps if cfg.plan_loss == "label_smoothing" else None
    world_eps = cfg.label_smooth_eps if cfg.world_loss == "label_smoothing" else None
    if key == ROLE_PLANNER:
        return loss_plan_batch(logits3, group, layout, eps=plan_eps), ROLE_PLANNER
    if key == ROLE_WORLD:
        return loss_world_batch(logits3, group, dist_table, layout, eps=world_eps), ROLE_WORLD
    if key == "both_stop":
        return loss_plan_batch(logits3, group, layout, eps=plan_eps), ROLE_BOTH
    if key == "both_move":
        plan = loss_plan_batch(logits3, group, layout, eps=plan_eps)
        world = loss_world_batch(logits3, group, dist_table, layout, eps=world_eps)
        return T.add(plan, world), ROLE_BOTH
    raise ValueError(key)


def train(
    params: dict[str, Tensor],
    data: TokenizedDataset,
    cfg: TrainConfig,
    model_config: ModelConfig,
    layout: VocabLayout,
    dist_table: np.ndarray,
    out_dir: str | Path,
    state: AdamState | None = None,
    start_epoch: int = 0,
    checkpoint_meta: dict | None = None,
) -> dict:
    """Optimize in place; returns {"epoch_world_loss": [...], "steps": n, ...}.

    Deterministic given cfg.seed: batch order is a pure function of
    (seed, epoch) and gradient accumulation order is fixed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = state or AdamState.for_params(params)
    log_path = out / "train_log.csv"
    new_log = not log_path.exists() or start_epoch == 0
    log_f = open(log_path, "w" if new_log else "a", newline="")
    log = csv.writer(log_f)
    if new_log:
        log.writerow(["step", "role", "loss", "lr", "wallclock"])

    t0 = time.time()
    step = state.step
    epoch_world: list[float] = []
    epoch_plan: list[float] = []
    meta = dict(checkpoint_meta or {})
    try:
        for epoch in range(start_epoch, cfg.epochs):
            batches = make_interleaved_batches(
                data, cfg.batch_size, seed=cfg.seed + epoch, stride=cfg.window_stride,
                strategy=cfg.step_strategy, cap=cfg.samples_per_epoch,
            )
            world_losses: list[float] = []
            plan_losses: list[float] = []
            grads: dict[str, np.ndarray] = {}
            pending = 0
            for bi, batch_descs in enumerate(batches):
                samples = [build_sample(data, d, layout, model_config.context_len) for d in batch_descs]
                n_total = len(samples)
                rows = []
                for key, group in sorted(_role_groups(samples).items()):
                    with Graph() as graph:
                        tokens = pad_batch(group, layout.eos)
                        logits3 = forward_batch(params, tokens, model_config)
                        loss, role = _group_loss(logits3, key, group, dist_table, layout, cfg)
                        value = loss.item()
                        if not np.isfinite(value):
                            raise NanLoss(f"non-finite loss at step {step}, epoch {epoch}, batch {bi}, role {role}")
                        # weight by group share so the batch gradient is a mean
                        graph.backward(T.scale(loss, len(group) / n_total))
                    rows.append((role, value))
                    if role in (ROLE_WORLD, ROLE_BOTH):
                        world_losses.append(value)
                    if role in (ROLE_PLANNER, ROLE_BOTH):
                        plan_losses.append(value)
                for name, p in params.items():
                    if p.grad is not None:
                        grads[name] = grads.get(name, 0.0) + p.grad
                    p.zero_grad()
                pending += 1
                if pending == cfg.grad_accum or bi == len(batches) - 1:
                    for name in list(grads):
                        grads[name] = grads[name] / pending
                    for name, p in params.items():
                        grads.setdefault(name, np.zeros_like(p.data))
                    adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
                    grads = {}
                    pending = 0
                    step = state.step
                for role, value in rows:
                    log.writerow([step, role, f"{value:.6f}", cfg.lr, f"{time.time() - t0:.2f}"])
            log_f.flush()
            epoch_world.append(float(np.mean(world_losses)) if world_losses else float("nan"))
            epoch_plan.append(float(np.mean(plan_losses)) if plan_losses else float("nan"))
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                meta.update({"epoch": epoch + 1, "step": step, "epoch_world_loss": epoch_world})
                optim_blobs = {f"optim.m.{k}": v for k, v in state.m.items()}
                optim_blobs.update({f"optim.v.{k}": v for k, v in state.v.items()})
                optim_blobs["optim.step"] = np.array([float(state.step)], dtype=np.float32)
                save_checkpoint(out / "model.ckpt", params, model_config, layout, meta, optim_blobs)
    finally:
        log_f.close()
    return {"epoch_world_loss": epoch_world, "epoch_plan_loss": epoch_plan, "steps": step, "adam_state": state}
