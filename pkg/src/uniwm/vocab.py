"""The unified discrete vocabulary and the action/pose token codecs.

One contiguous id space partitioned into special tokens, pose bins, signed
action bins for the three motion dimensions, and image codebook entries.
Motion components are floor-quantized at bin size 0.01 with an explicit sign
prefix; decoding returns sign * index * 0.01, so decode-then-encode is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import Action, Pose

SPECIALS = (
    "BOS",
    "EOS",
    "TASK_PLAN",
    "TASK_WORLD",
    "TASK_BOTH",
    "STOP",
    "BOSS",
    "EOSS",
    "POSE_MARK",
    "ACT_MARK",
    "START_MARK",
    "GOAL_MARK",
    "CUR_MARK",
    "OBS_MARK",
)

BIN_SIZE = 0.01
BINS_PER_SIGN = 100
BINS_PER_DIM = 2 * BINS_PER_SIGN  # positive block then negative block
ACTION_DIMS = ("dx", "dy", "dyaw")


class MalformedTokens(ValueError):
    """Token sequence violates the expected partition membership or order."""


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint, jointly contiguous id ranges for every token family."""

    pose_bins: int = 64
    codebook_size: int = 256

    # -- range boundaries ---------------------------------------------------
    @property
    def pose_start(self) -> int:
        return len(SPECIALS)

    @property
    def action_start(self) -> int:
        return self.pose_start + 3 * self.pose_bins

    @property
    def image_start(self) -> int:
        return self.action_start + 3 * BINS_PER_DIM

    @property
    def vocab_size(self) -> int:
        return self.image_start + self.codebook_size

    def __getattr__(self, name: str):
        # layout.bos, layout.stop, ... resolve to special-token ids
        upper = name.upper()
        if upper in SPECIALS:
            return SPECIALS.index(upper)
        raise AttributeError(name)

    def action_range(self, dim: int) -> tuple[int, int]:
        start = self.action_start + dim * BINS_PER_DIM
        return start, start + BINS_PER_DIM

    def image_range(self) -> tuple[int, int]:
        return self.image_start, self.image_start + self.codebook_size

    def action_token(self, dim: int, negative: bool, index: int) -> int:
        if not 0 <= index < BINS_PER_SIGN:
            raise ValueError(f"bin index {index} out of range")
        return self.action_range(dim)[0] + (BINS_PER_SIGN if negative else 0) + index

    def pose_token(self, dim: int, index: int) -> int:
        if not 0 <= index < self.pose_bins:
            raise ValueError(f"pose bin {index} out of range")
        return self.pose_start + dim * self.pose_bins + index

    def image_token(self, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"codebook index {code} out of range")
        return self.image_start + code

    def image_code(self, token: int) -> int:
        lo, hi = self.image_range()
        if not lo <= token < hi:
            raise MalformedTokens(f"token {token} is not an image token")
        return token - lo

    def partition_of(self, token: int) -> str:
        if 0 <= token < len(SPECIALS):
            return "special"
        if self.pose_start <= token < self.action_start:
            return "pose"
        if self.action_start <= token < self.image_start:
            return "action"
        if self.image_start <= token < self.vocab_size:
            return "image"
        raise ValueError(f"token {token} outside the vocabulary")

    def to_json(self) -> dict:
        return {"pose_bins": self.pose_bins, "codebook_size": self.codebook_size}

    @classmethod
    def from_json(cls, obj: dict) -> "VocabLayout":
        return cls(pose_bins=int(obj["pose_bins"]), codebook_size=int(obj["codebook_size"]))


# ---------------------------------------------------------------------------
# action codec
# ---------------------------------------------------------------------------


def encode_action(action: Action, layout: VocabLayout) -> list[int]:
    """Three bin tokens for a move (dx, dy, dyaw order), or [STOP]."""
    if action.stop:
        return [layout.stop]
    tokens = []
    for dim, v in enumerate((action.dx, action.dy, action.dyaw)):
        if abs(v) > BINS_PER_SIGN * BIN_SIZE + 1e-9:
            raise ValueError(f"{ACTION_DIMS[dim]} = {v:.4f} outside the bin range")
        index = int(math.floor(abs(v) / BIN_SIZE + 1e-9))
        index = min(index, BINS_PER_SIGN - 1)
        tokens.append(layout.action_token(dim, negative=v < 0, index=index))
    return tokens


def decode_action(tokens: list[int], layout: VocabLayout) -> Action:
    """Inverse of encode_action: sign * index * bin size per dimension."""
    if len(tokens) == 1 and tokens[0] == layout.stop:
        return Action(stop=True)
    if len(tokens) != 3:
        raise MalformedTokens(f"expected STOP or 3 bin tokens, got {len(tokens)}")
    values = []
    for dim, tok in enumerate(tokens):
        lo, hi = layout.action_range(dim)
        if not lo <= tok < hi:
            raise MalformedTokens(f"token {tok} is not a {ACTION_DIMS[dim]} bin token")
        offset = tok - lo
        negative, index = divmod(offset, BINS_PER_SIGN)
        values.append((-1.0 if negative else 1.0) * index * BIN_SIZE)
    return Action.move(*values)


# ---------------------------------------------------------------------------
# pose codec
# ---------------------------------------------------------------------------


def encode_pose(pose: Pose, extent: tuple[float, float, float, float], layout: VocabLayout) -> list[int]:
    """Quantize (x, y, yaw) to one token per dimension.

    x and y use uniform bins over the map extent (xmin, xmax, ymin, ymax);
    yaw uses uniform bins over (-pi, pi].
    """
    xmin, xmax, ymin, ymax = extent
    if not (xmin <= pose.x <= xmax and ymin <= pose.y <= ymax):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) outside extent {extent}")
    p = layout.pose_bins
    bx = min(int((pose.x - xmin) / (xmax - xmin) * p), p - 1)
    by = min(int((pose.y - ymin) / (ymax - ymin) * p), p - 1)
    byaw = min(int((pose.yaw + math.pi) / (2 * math.pi) * p), p - 1)
    return [layout.pose_token(0, bx), layout.pose_token(1, by), layout.pose_token(2, byaw)]
