"""Role-specific training objectives.

Action targets use a restricted negative log-likelihood: the softmax is
renormalized over the 200 bin tokens of each motion dimension, so only
within-dimension competition matters; a stop target falls back to plain
cross-entropy over the full vocabulary. Observation targets use an expected
codebook distance: the predicted distribution over image tokens (restricted
and renormalized) is dotted with the squared distances from the ground-truth
entry to every codebook entry, so the loss is zero only at a point mass on
the exact token.

Positions follow next-token convention: the logit row at j-1 scores the
target token at j.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .samples import ROLE_BOTH, ROLE_PLANNER, ROLE_WORLD, TokenSample
from .vocab import BINS_PER_DIM, VocabLayout


def _restricted_nll(rows: Tensor, col_range: tuple[int, int], targets: np.ndarray) -> Tensor:
    """-log P(target | token in range) for each row. rows: [K, V] -> [K]."""
    lo, hi = col_range
    if np.any((targets < lo) | (targets >= hi)):
        raise ValueError("target token not in the expected token set")
    z = T.slice_(rows, (slice(None), slice(lo, hi)))
    return T.sub(T.logsumexp(z), T.pick(z, targets - lo))


def _full_ce(rows: Tensor, targets: np.ndarray) -> Tensor:
    return T.sub(T.logsumexp(rows), T.pick(rows, targets))


def _plan_positions(sample: TokenSample, layout: VocabLayout):
    """Split a planner-style target span into (bin positions by dim, stop positions)."""
    pos = sample.target_positions
    toks = sample.tokens
    if len(pos) == 1 and toks[pos[0]] == layout.stop:
        return [], [int(pos[0])]
    if len(pos) < 3:
        raise ValueError(f"planner target span has {len(pos)} positions, expected 3 or STOP")
    bins = [int(p) for p in pos[:3]]
    for dim, p in enumerate(bins):
        lo, hi = layout.action_range(dim)
        if not lo <= toks[p] < hi:
            raise ValueError(f"target token {toks[p]} not in dimension {dim} bin set")
    return bins, []


def loss_plan(logits: Tensor, sample: TokenSample, layout: VocabLayout) -> Tensor:
    """Discretized bin-token loss for one planner sample. logits: [T, vocab]."""
    if sample.role not in (ROLE_PLANNER, ROLE_BOTH):
        raise ValueError(f"loss_plan expects a planner sample, got role {sample.role!r}")
    bins, stops = _plan_positions(sample, layout)
    terms = []
    for dim, p in enumerate(bins):
        row = T.slice_(logits, (p - 1,))
        nll = _restricted_nll(T.reshape(row, (1, -1)), layout.action_range(dim), np.array([sample.tokens[p]]))
        terms.append(T.scale(T.sum_(nll), 1.0 / 3.0))
    for p in stops:
        row = T.reshape(T.slice_(logits, (p - 1,)), (1, -1))
        terms.append(T.sum_(_full_ce(row, np.array([sample.tokens[p]]))))
    return T.sum_(T.stack_scalars(terms))


def loss_world(logits: Tensor, sample: TokenSample, dist_table: np.ndarray, layout: VocabLayout) -> Tensor:
    """Expected-distance reconstruction loss for one world sample.

    dist_table: [N, N] pairwise squared distances between codebook entries.
    """
    if sample.role not in (ROLE_WORLD, ROLE_BOTH):
        raise ValueError(f"loss_world expects a world sample, got role {sample.role!r}")
    pos = _world_positions(sample, layout)
    lo, hi = layout.image_range()
    rows = T.concat([T.reshape(T.slice_(logits, (p - 1,)), (1, -1)) for p in pos], axis=0)
    codes = np.array([sample.tokens[p] - lo for p in pos])
    if np.any((codes < 0) | (codes >= hi - lo)):
        raise ValueError("world target token outside the image range")
    p_img = T.softmax(T.slice_(rows, (slice(None), slice(lo, hi))))
    d = Tensor(dist_table[codes].astype(logits.dtype))
    return T.scale(T.sum_(T.mul(d, p_img)), 1.0 / len(pos))


def _world_positions(sample: TokenSample, layout: VocabLayout) -> list[int]:
    pos = sample.target_positions
    if sample.role == ROLE_BOTH:
        lo, _ = layout.image_range()
        pos = [int(p) for p in pos if sample.tokens[p] >= lo]
        if not pos:
            raise ValueError("joint sample has no observation targets")
        return pos
    return [int(p) for p in pos]


def loss_label_smoothing(logits: Tensor, sample: TokenSample, eps: float = 0.1) -> Tensor:
    """Smoothed cross-entropy over the full vocabulary at target positions."""
    pos = sample.target_positions
    rows = T.concat([T.reshape(T.slice_(logits, (int(p) - 1,)), (1, -1)) for p in pos], axis=0)
    targets = np.array([sample.tokens[p] for p in pos])
    return _smoothed_ce_rows(rows, targets, eps)


def _smoothed_ce_rows(rows: Tensor, targets: np.ndarray, eps: float) -> Tensor:
    k, v = rows.shape
    lse = T.logsumexp(rows)
    zt = T.pick(rows, targets)
    # mean over the vocab via a ones matvec
    zmean = T.scale(T.reshape(T.matmul(rows, Tensor(np.ones((v, 1), dtype=rows.dtype))), (k,)), 1.0 / v)
    per_row = T.sub(lse, T.add(T.scale(zt, 1.0 - eps), T.scale(zmean, eps)))
    return T.scale(T.sum_(per_row), 1.0 / k)


# ---------------------------------------------------------------------------
# batched variants (training hot path); each equals the mean of the
# per-sample losses above, which the tests assert
# ---------------------------------------------------------------------------


def loss_plan_batch(logits3: Tensor, samples: list[TokenSample], layout: VocabLayout, eps: float | None = None) -> Tensor:
    """Mean planner loss over a padded role batch. logits3: [B, T, vocab].

    With ``eps`` set, computes the label-smoothing ablation loss instead.
    """
    if eps is not None:
        return _ls_batch(logits3, samples, eps)
    dim_rows: list[list[tuple[int, int, int]]] = [[], [], []]  # (batch, row, target)
    stop_rows: list[tuple[int, int, int]] = []
    for b, s in enumerate(samples):
        bins, stops = _plan_positions(s, layout)
        for dim, p in enumerate(bins):
            dim_rows[dim].append((b, p - 1, int(s.tokens[p])))
        for p in stops:
            stop_rows.append((b, p - 1, int(s.tokens[p])))
    terms = []
    for dim in range(3):
        if not dim_rows[dim]:
            continue
        bs, rs, ts = (np.array(x) for x in zip(*dim_rows[dim]))
        rows = T.take_pairs(logits3, bs, rs)
        terms.append(T.scale(T.sum_(_restricted_nll(rows, layout.action_range(dim), ts)), 1.0 / 3.0))
    if stop_rows:
        bs, rs, ts = (np.array(x) for x in zip(*stop_rows))
        terms.append(T.sum_(_full_ce(T.take_pairs(logits3, bs, rs), ts)))
    return T.scale(T.sum_(T.stack_scalars(terms)), 1.0 / len(samples))


def loss_world_batch(
    logits3: Tensor,
    samples: list[TokenSample],
    dist_table: np.ndarray,
    layout: VocabLayout,
    eps: float | None = None,
) -> Tensor:
    """Mean world loss over a padded role batch (equal target counts)."""
    if eps is not None:
        return _ls_batch(logits3, samples, eps)
    lo, hi = layout.image_range()
    bs, rs, codes = [], [], []
    counts = set()
    for b, s in enumerate(samples):
        pos = _world_positions(s, layout)
        counts.add(len(pos))
        for p in pos:
            code = int(s.tokens[p]) - lo
            if not 0 <= code < hi - lo:
                raise ValueError("world target token outside the image range")
            bs.append(b)
            rs.append(p - 1)
            codes.append(code)
    if len(counts) != 1:
        raise ValueError("world batch mixes target lengths")
    rows = T.take_pairs(logits3, np.array(bs), np.array(rs))
    p_img = T.softmax(T.slice_(rows, (slice(None), slice(lo, hi))))
    d = Tensor(dist_table[np.array(codes)].astype(logits3.dtype))
    return T.scale(T.sum_(T.mul(d, p_img)), 1.0 / len(bs))


def _ls_batch(logits3: Tensor, samples: list[TokenSample], eps: float) -> Tensor:
    per_sample = []
    for b, s in enumerate(samples):
        pos = s.target_positions
        rows = T.take_pairs(logits3, np.full(len(pos), b), pos - 1)
        per_sample.append(_smoothed_ce_rows(rows, s.tokens[pos], eps))
    return T.mean_(T.stack_scalars(per_sample))
