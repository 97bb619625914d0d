"""Token sample assembly for the two substeps (and the joint variant).

Layout, planner role:

    BOS TASK_PLAN POSE_MARK p0*3 START_MARK o_s GOAL_MARK o_g
    CUR_MARK BOSS o_t EOSS ACT_MARK <target: 3 bins | STOP> EOS

The world-model role keeps the action inside the prompt and appends the
next-observation target after OBS_MARK; the joint ("both") role targets the
action bins immediately followed by the observation tokens. target_mask is
true exactly on target positions; obs_span brackets the BOSS..EOSS interior.
All image arguments are codebook indices (``encode_image`` output), not ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Action, Pose
from .vocab import VocabLayout, encode_action, encode_pose

ROLE_PLANNER = "planner"
ROLE_WORLD = "world"
ROLE_BOTH = "both"


class ContextOverflow(ValueError):
    pass


@dataclass
class TokenSample:
    tokens: np.ndarray  # int32 [L]
    target_mask: np.ndarray  # bool [L]
    role: str
    obs_span: tuple[int, int]  # [begin, end) of the current-observation tokens

    def __post_init__(self):
        if self.tokens.shape != self.target_mask.shape:
            raise ValueError("tokens and target_mask must align")

    @property
    def target_positions(self) -> np.ndarray:
        return np.nonzero(self.target_mask)[0]


def prompt_prefix(
    task: str,
    pose_tokens: list[int],
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    layout: VocabLayout,
) -> tuple[list[int], tuple[int, int]]:
    """Shared prompt head through EOSS. Returns (tokens, obs_span)."""
    task_token = {ROLE_PLANNER: layout.task_plan, ROLE_WORLD: layout.task_world, ROLE_BOTH: layout.task_both}[task]
    toks = [layout.bos, task_token, layout.pose_mark, *pose_tokens, layout.start_mark]
    toks.extend(layout.image_token(int(c)) for c in start_codes)
    toks.append(layout.goal_mark)
    toks.extend(layout.image_token(int(c)) for c in goal_codes)
    toks.extend([layout.cur_mark, layout.boss])
    begin = len(toks)
    toks.extend(layout.image_token(int(c)) for c in cur_codes)
    end = len(toks)
    toks.append(layout.eoss)
    return toks, (begin, end)


def _finish(tokens: list[int], target_from: int, role: str, span, context_len: int | None) -> TokenSample:
    arr = np.asarray(tokens, dtype=np.int32)
    if context_len is not None and len(arr) > context_len:
        raise ContextOverflow(f"sample length {len(arr)} exceeds context {context_len}")
    mask = np.zeros(len(arr), dtype=bool)
    mask[target_from : len(arr) - 1] = True  # everything between the marker and EOS
    return TokenSample(tokens=arr, target_mask=mask, role=role, obs_span=span)


def build_planner_sample(
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    pose: Pose,
    extent: tuple[float, float, float, float],
    target: Action,
    layout: VocabLayout,
    context_len: int | None = None,
) -> TokenSample:
    """Training sample for the action-prediction role."""
    toks, span = prompt_prefix(ROLE_PLANNER, encode_pose(pose, extent, layout), start_codes, goal_codes, cur_codes, layout)
    toks.append(layout.act_mark)
    target_from = len(toks)
    toks.extend(encode_action(target, layout))
    toks.append(layout.eos)
    return _finish(toks, target_from, ROLE_PLANNER, span, context_len)


def build_world_sample(
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    pose: Pose,
    extent: tuple[float, float, float, float],
    action: Action,
    target_codes: np.ndarray,
    layout: VocabLayout,
    context_len: int | None = None,
) -> TokenSample:
    """Training sample for the next-observation role. ``action`` must be a move."""
    if action.stop:
        raise ValueError("a stop action is never a world-model input; the rollout terminates instead")
    toks, span = prompt_prefix(ROLE_WORLD, encode_pose(pose, extent, layout), start_codes, goal_codes, cur_codes, layout)
    toks.append(layout.act_mark)
    toks.extend(encode_action(action, layout))
    toks.append(layout.obs_mark)
    target_from = len(toks)
    toks.extend(layout.image_token(int(c)) for c in target_codes)
    toks.append(layout.eos)
    return _finish(toks, target_from, ROLE_WORLD, span, context_len)


def build_both_sample(
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    pose: Pose,
    extent: tuple[float, float, float, float],
    target_action: Action,
    target_codes: np.ndarray | None,
    layout: VocabLayout,
    context_len: int | None = None,
) -> TokenSample:
    """Joint sample: action bins followed directly by the next observation.

    A stop target has no observation part (target length 1).
    """
    toks, span = prompt_prefix(ROLE_BOTH, encode_pose(pose, extent, layout), start_codes, goal_codes, cur_codes, layout)
    toks.append(layout.act_mark)
    target_from = len(toks)
    toks.extend(encode_action(target_action, layout))
    if target_action.stop:
        if target_codes is not None:
            raise ValueError("stop target carries no observation")
    else:
        if target_codes is None:
            raise ValueError("move target requires the next observation codes")
        toks.extend(layout.image_token(int(c)) for c in target_codes)
    toks.append(layout.eos)
    return _finish(toks, target_from, ROLE_BOTH, span, context_len)


def planner_prompt(
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    pose: Pose,
    extent: tuple[float, float, float, float],
    layout: VocabLayout,
    task: str = ROLE_PLANNER,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Inference prompt ending at ACT_MARK, ready for constrained decoding."""
    toks, span = prompt_prefix(task, encode_pose(pose, extent, layout), start_codes, goal_codes, cur_codes, layout)
    toks.append(layout.act_mark)
    return np.asarray(toks, dtype=np.int32), span


def world_prompt(
    start_codes: np.ndarray,
    goal_codes: np.ndarray,
    cur_codes: np.ndarray,
    pose: Pose,
    extent: tuple[float, float, float, float],
    action: Action,
    layout: VocabLayout,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Inference prompt ending at OBS_MARK."""
    if action.stop:
        raise ValueError("a stop action is never a world-model input")
    toks, span = prompt_prefix(ROLE_WORLD, encode_pose(pose, extent, layout), start_codes, goal_codes, cur_codes, layout)
    toks.append(layout.act_mark)
    toks.extend(encode_action(action, layout))
    toks.append(layout.obs_mark)
    return np.asarray(toks, dtype=np.int32), span
