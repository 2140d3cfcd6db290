"""Ablation matrix: build each variant, train briefly, tabulate parameter counts and a metric."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

from ..data import SynthSpec, synth_samples
from ..model import partition_parameters
from .config import RunConfig, RunConfigError
from .evaluate import evaluate
from .train import Trainer, load_records

AXES = ("mpg_position", "mfa_position", "prompt_length", "prompt_dim",
        "w/o_mpg", "w/o_mfa", "frozen_decoder", "full_finetune")
POSITIONS = ("1", "1-2", "1-3", "1-4", "4", "4-3", "4-2", "4-1")
DEFAULT_VALUES = {
    "mpg_position": POSITIONS,
    "mfa_position": POSITIONS,
    "prompt_length": ("10", "20", "30", "40"),
    "prompt_dim": ("8", "16", "32", "64"),
}
_POSITION = re.compile(r"^([14])(?:-([1-4]))?$")


@dataclass
class AblationRow:
    variant: str
    trainable: int
    frozen: int
    loss: float
    pixel_acc: float
    miou: float


def parse_position(value: str) -> tuple[int, ...]:
    """``"1-3"`` -> (1, 2, 3); ``"4-2"`` -> (2, 3, 4).  Ranges start at the first or last stage."""
    m = _POSITION.match(value.strip())
    if not m:
        raise RunConfigError("values", f"stage position {value!r} must look like 1, 1-j, 4 or 4-j")
    a = int(m.group(1))
    b = int(m.group(2) or a)
    if (a == 1 and b < a) or (a == 4 and b > a):
        raise RunConfigError("values", f"stage position {value!r} runs the wrong way")
    return tuple(range(min(a, b), max(a, b) + 1))


def variant_config(axis: str, value: str | None, base: RunConfig) -> RunConfig:
    if axis == "mpg_position":
        return base.replace(mpg_stages=parse_position(value))
    if axis == "mfa_position":
        return base.replace(mfa_stages=parse_position(value))
    if axis in ("prompt_length", "prompt_dim"):
        try:
            n = int(value)
        except (TypeError, ValueError):
            raise RunConfigError("values", f"{axis} needs integer values, got {value!r}") from None
        if n < 1:
            raise RunConfigError("values", f"{axis} must be >= 1")
        return base.replace(**{"num_tokens" if axis == "prompt_length" else "token_dim": n})
    if axis == "w/o_mpg":
        return base.replace(mpg_stages=())
    if axis == "w/o_mfa":
        return base.replace(mfa_stages=())
    if axis == "frozen_decoder":
        return base.replace(freeze_decoder=True)
    if axis == "full_finetune":
        return base.replace(full_finetune=True)
    raise RunConfigError("axis", f"unknown ablation axis {axis!r}; choose from {AXES}")


def variants(axis: str, values=None) -> list[str | None]:
    if axis not in AXES:
        raise RunConfigError("axis", f"unknown ablation axis {axis!r}; choose from {AXES}")
    if axis in DEFAULT_VALUES:
        return list(values or DEFAULT_VALUES[axis])
    return [None]


def run_ablation(axis: str, values=None, base: RunConfig | None = None, steps: int = 1,
                 records=None) -> list[AblationRow]:
    """One row for the unmodified base model, then one per variant value."""
    base = (base or RunConfig()).replace(out_dir="")
    if records is None:
        records = load_records(base.train_manifest) or synth_samples(
            SynthSpec(size=base.crop_size, seed=base.seed, num_classes=base.num_classes), 4)
    todo = [("baseline", base)]
    for v in variants(axis, values):
        label = axis if v is None else f"{axis}={v}"
        todo.append((label, variant_config(axis, v, base)))
    rows = []
    for label, cfg in todo:
        trainer = Trainer(cfg.replace(epochs=steps, batch_size=len(records)), list(records))
        loss = trainer.train_step() if steps else float("nan")
        for _ in range(steps - 1):
            loss = trainer.train_step()
        trainer.verify_frozen()
        part = partition_parameters(trainer.model, strict=not cfg.full_finetune)
        res = evaluate(trainer.model, records)
        rows.append(AblationRow(label, part.trainable_total, part.frozen_total, loss, res.pixel_acc, res.miou))
    return rows


def monotone_violations(axis: str, rows: list[AblationRow]) -> list[str]:
    """Structural subset relations that the trainable counts fail to respect."""
    by = {r.variant: r.trainable for r in rows}
    base = by["baseline"]
    chains = []
    if axis in ("mpg_position", "mfa_position"):
        chains = [[f"{axis}={v}" for v in POSITIONS[:4]], [f"{axis}={v}" for v in POSITIONS[4:]]]
        chains = [[c for c in chain if c in by] for chain in chains]
    elif axis in DEFAULT_VALUES:
        vals = sorted((int(r.variant.split("=")[1]), r.variant) for r in rows if r.variant != "baseline")
        chains = [[v for _, v in vals]]
    out = []
    for chain in chains:
        for a, b in zip(chain, chain[1:]):
            if not by[a] < by[b]:
                out.append(f"{a} ({by[a]}) should have fewer trainable parameters than {b} ({by[b]})")
    smaller = {"w/o_mpg", "w/o_mfa", "frozen_decoder"}
    if axis in smaller and not by[axis] < base:
        out.append(f"{axis} ({by[axis]}) should train fewer parameters than baseline ({base})")
    if axis == "full_finetune":
        row = next(r for r in rows if r.variant == axis)
        if row.frozen != 0 or not row.trainable > base:
            out.append("full_finetune should freeze nothing and train more than baseline")
    return out


def to_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "trainable_params", "frozen_params", "loss", "pixel_acc", "miou"])
    for r in rows:
        w.writerow([r.variant, r.trainable, r.frozen, f"{r.loss:.6f}", f"{r.pixel_acc:.6f}", f"{r.miou:.6f}"])
    return buf.getvalue()
