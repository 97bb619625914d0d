"""Adam with decoupled weight decay, and a finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """One in-place update. Weight decay is decoupled from the moments."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * update.astype(p.data.dtype)


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-3,
    max_coords: int = 256,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the params' storage dtype. ``f`` must be a
    deterministic scalar function of the params. At most ``max_coords``
    coordinates are probed, sampled uniformly across all parameters.
    """
    shadow = {k: Tensor(p.data.astype(np.float64), requires_grad=True) for k, p in params.items()}
    with Graph() as graph:
        loss = f(shadow)
        graph.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in shadow.items()}

    coords: list[tuple[str, int]] = []
    for name, p in shadow.items():
        coords.extend((name, i) for i in range(p.size))
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, flat_idx in coords:
        flat = shadow[name].data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + h
        up = float(f(shadow).data)
        flat[flat_idx] = orig - h
        down = float(f(shadow).data)
        flat[flat_idx] = orig
        fd = (up - down) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[flat_idx])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst
