"""Optimizers that honour the frozen flag."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Parameter

OPTIMIZERS = ("sgd_momentum", "adamw")


@dataclass
class OptState:
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(
    params,
    grads: dict,
    state: OptState,
    kind: str = "adamw",
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    momentum: float = 0.9,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> OptState:
    """Update every non-frozen parameter in place.

    ``sgd_momentum`` folds weight decay into the gradient; ``adamw`` applies
    it decoupled from the adaptive step.  Frozen parameters are skipped even
    when a gradient for them is supplied.
    """
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    trainable: list[Parameter] = [p for p in params if not p.frozen]
    missing = [p.name for p in trainable if p.name not in grads]
    if missing:
        raise ContractError(f"no gradient for trainable parameters: {missing[:5]}")
    state.step += 1
    t = state.step
    for p in trainable:
        g = np.asarray(grads[p.name], dtype=p.dtype)
        buf = state.buffers.setdefault(p.name, {})
        cast = p.dtype.type
        if kind == "sgd_momentum":
            if weight_decay:
                g = g + cast(weight_decay) * p.data
            if momentum:
                if "momentum" not in buf:
                    buf["momentum"] = g.copy()
                else:
                    buf["momentum"] *= cast(momentum)
                    buf["momentum"] += g
                g = buf["momentum"]
            p.data -= cast(lr) * g
        else:
            b1, b2 = betas
            if "exp_avg" not in buf:
                buf["exp_avg"] = np.zeros_like(p.data)
                buf["exp_avg_sq"] = np.zeros_like(p.data)
            m, v = buf["exp_avg"], buf["exp_avg_sq"]
            if weight_decay:
                p.data *= cast(1.0 - lr * weight_decay)
            m *= cast(b1)
            m += cast(1.0 - b1) * g
            v *= cast(b2)
            v += cast(1.0 - b2) * g * g
            bc1 = 1.0 - b1 ** t
            bc2 = 1.0 - b2 ** t
            denom = np.sqrt(v / cast(bc2)) + cast(eps)
            p.data -= cast(lr / bc1) * (m / denom)
    return state


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """Polynomial decay; ``step`` is zero-based."""
    if total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    return base_lr * (1.0 - frac) ** power
