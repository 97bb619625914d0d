"""Hierarchical inference memory: per-step KV cache, trajectory store, fusion.

The intra-step memory holds the current observation span's per-layer K/V and
is reset every step. The cross-step memory accumulates those snapshots with
their step indices. Fusion selects the top-k most similar history entries per
layer (cosine over flattened keys), weights them by normalized exponential
recency decay, scales both K and V by the weight, and concatenates them after
the unscaled current-step rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LayerKV = dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (K, V) [span, heads, head_dim]

DEFAULT_TOP_K = 3
DEFAULT_DECAY = 0.2


@dataclass
class IntraStepMemory:
    step: int
    layers: LayerKV


@dataclass
class CrossStepMemory:
    """Append-only, strictly increasing timestamps; optional FIFO capacity."""

    entries: list[IntraStepMemory] = field(default_factory=list)
    max_entries: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> list[int]:
        return [e.step for e in self.entries]


def reset_intra() -> None:
    """Empty intra-step slot; deposit() fills it for the current step."""
    return None


def deposit(captured: LayerKV, step: int, span_len: int, l_save: tuple[int, ...]) -> IntraStepMemory:
    """Store captured K/V verbatim for this step, validating shape and layer set."""
    if set(captured) != set(l_save):
        raise ValueError(f"captured layers {sorted(captured)} != l_save {sorted(l_save)}")
    for l, (k, v) in captured.items():
        if k.shape[0] != span_len or v.shape != k.shape:
            raise ValueError(f"layer {l}: span {k.shape[0]} != expected {span_len}")
    return IntraStepMemory(step=step, layers={l: (k, v) for l, (k, v) in captured.items()})


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    af, bf = a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(af @ bf / (na * nb))


def similarity_gate(
    intra: IntraStepMemory, cross: CrossStepMemory, k: int
) -> tuple[dict[int, list[int]], dict[int, list[float]]]:
    """Per-layer top-k history indices by key cosine similarity.

    Ties break toward more recent steps. Empty history selects nothing.
    Returns (selected indices per layer, all similarities per layer).
    """
    if k < 1:
        raise ValueError("top-k must be >= 1")
    selected: dict[int, list[int]] = {}
    sims: dict[int, list[float]] = {}
    for l, (key, _) in intra.layers.items():
        s = [_cosine(key, entry.layers[l][0]) for entry in cross.entries]
        # sort by similarity desc, then timestamp desc (recency tie-break)
        order = sorted(range(len(s)), key=lambda m: (-s[m], -cross.entries[m].step))
        selected[l] = sorted(order[:k])  # index set; fusion orders by timestamp
        sims[l] = s
    return selected, sims


def decay_weights(timestamps: list[int], t: int, gamma: float = DEFAULT_DECAY) -> np.ndarray:
    """Normalized exponential recency weights over the selected timestamps."""
    if any(tm >= t for tm in timestamps):
        raise ValueError("selected timestamps must precede the current step")
    if not timestamps:
        return np.zeros(0)
    gaps = t - np.asarray(timestamps, dtype=np.float64)
    w = np.exp(-gamma * gaps)
    return w / w.sum()


def fuse(
    intra: IntraStepMemory,
    cross: CrossStepMemory,
    selected: dict[int, list[int]],
    alphas: dict[int, np.ndarray],
) -> LayerKV:
    """Concat current K/V with alpha-scaled selected history, old to new.

    ``selected[l]`` and ``alphas[l]`` must align elementwise. Both keys and
    values of a history entry are scaled by its weight; the current-step rows
    are never scaled. Empty selection returns the intra rows unchanged.
    """
    fused: LayerKV = {}
    for l, (k_cur, v_cur) in intra.layers.items():
        picks = selected.get(l, [])
        alpha = np.asarray(alphas.get(l, ()), dtype=np.float64)
        if len(picks) != len(alpha):
            raise ValueError(f"layer {l}: {len(picks)} selections but {len(alpha)} weights")
        if len(picks) == 0:
            fused[l] = (k_cur, v_cur)
            continue
        order = sorted(range(len(picks)), key=lambda i: cross.entries[picks[i]].step)
        ks = [k_cur] + [alpha[i] * cross.entries[picks[i]].layers[l][0] for i in order]
        vs = [v_cur] + [alpha[i] * cross.entries[picks[i]].layers[l][1] for i in order]
        fused[l] = (
            np.concatenate(ks, axis=0).astype(np.float32),
            np.concatenate(vs, axis=0).astype(np.float32),
        )
    return fused


def merge(
    intra: IntraStepMemory,
    cross: CrossStepMemory,
    k: int = DEFAULT_TOP_K,
    gamma: float = DEFAULT_DECAY,
) -> tuple[LayerKV, dict]:
    """Gate, decay and fuse in one call; returns (fused KV, trace record)."""
    if len(cross) == 0:
        return {l: kv for l, kv in intra.layers.items()}, {"selected": {}, "similarities": {}, "alphas": {}}
    selected, sims = similarity_gate(intra, cross, k)
    alphas = {l: decay_weights([cross.entries[m].step for m in picks], intra.step, gamma) for l, picks in selected.items()}
    fused = fuse(intra, cross, selected, alphas)
    trace = {
        "selected": {l: [cross.entries[m].step for m in picks] for l, picks in selected.items()},
        "similarities": {l: [round(s, 6) for s in v] for l, v in sims.items()},
        "alphas": {l: [round(float(a), 6) for a in v] for l, v in alphas.items()},
    }
    return fused, trace


def append_cross(cross: CrossStepMemory, intra: IntraStepMemory) -> CrossStepMemory:
    """Deposit the finished step's intra memory; timestamps must increase."""
    if cross.entries and intra.step <= cross.entries[-1].step:
        raise ValueError(f"step {intra.step} not after last stored step {cross.entries[-1].step}")
    cross.entries.append(intra)
    if cross.max_entries is not None and len(cross.entries) > cross.max_entries:
        cross.entries.pop(0)
    return cross
