"""End-to-end gradient check of every trainable parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import DPLNet, dplnet_config, module_group
from ..tensor_core import Tape, Tensor, backward, finite_diff_grad, ops, relative_error, trunc_normal

DEFAULT_TOL = 1e-4


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    probes: dict[str, int] = field(default_factory=dict)
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def format(self) -> str:
        lines = ["group\tprobes\tmax_rel_error\tstatus"]
        for g, e in self.errors.items():
            lines.append(f"{g}\t{self.probes[g]}\t{e:.3e}\t{'ok' if e <= self.tol else 'FAIL'}")
        lines.append(f"overall\t{sum(self.probes.values())}\t{self.max_error:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def gradcheck_model(seed: int = 0, size: int = 32, batch: int = 1, probes_per_param: int = 3,
                    step: float = 1e-5, tol: float = DEFAULT_TOL) -> GradcheckReport:
    """Compare backward against central differences on a float64 toy model.

    The zero-initialized output projections are redrawn so that every group
    has a nonzero gradient; at exact zero the upstream prompt parameters
    would receive none and the check would be vacuous.
    """
    cfg = dplnet_config("toy", input_size=(size, size))
    model = DPLNet(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for lin in model.prompts.output_projections():
        lin.weight.data[...] = trunc_normal(rng, lin.weight.shape, std=0.2)
        lin.bias.data[...] = trunc_normal(rng, lin.bias.shape, std=0.2)
    i_rgb = Tensor(rng.standard_normal((batch, 3, size, size)))
    i_x = Tensor(rng.standard_normal((batch, 3, size, size)))
    labels = rng.integers(0, cfg.num_classes, (batch, size, size))

    def loss_fn():
        return ops.cross_entropy(model(i_rgb, i_x), labels)

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)

    groups: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for name, p in model.named_parameters():
        if p.frozen:
            continue
        analytic = grads.get(name, np.zeros_like(p.data)).reshape(-1)
        idx = rng.choice(p.size, size=min(probes_per_param, p.size), replace=False)
        numeric = finite_diff_grad(loss_fn, p, step, indices=idx)
        groups.setdefault(module_group(name), []).append((analytic[idx], numeric))

    report = GradcheckReport(tol=tol)
    for g, pairs in groups.items():
        a = np.concatenate([x for x, _ in pairs])
        n = np.concatenate([y for _, y in pairs])
        report.errors[g] = relative_error(a, n)
        report.probes[g] = a.size
    return report
