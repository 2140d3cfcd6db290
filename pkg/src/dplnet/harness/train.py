"""Training loop with poly learning rate, per-epoch TSV log and resumable checkpoints."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import ConfusionMatrix, SampleRecord, augment, miou, pixel_accuracy, read_manifest
from ..data.metrics import UndefinedMetricError
from ..model import DPLNet, IntegrityError, normalize_aux, normalize_rgb, partition_parameters
from ..tensor_core import OptState, Tape, Tensor, backward, ops, optimizer_step, poly_lr
from .checkpoint import TrainState, capture_params, restore_params, save_checkpoint
from .config import RunConfig, parse_config, serialize

LOG_COLUMNS = ("epoch", "step", "lr", "loss", "train_miou", "train_acc", "val_miou", "val_acc")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None):
        super().__init__(message)
        self.snapshot = snapshot


def frozen_hash(model) -> str:
    """sha256 over the names, shapes and bytes of every frozen parameter."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        if p.frozen:
            h.update(name.encode())
            h.update(str((p.dtype.str, p.shape)).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def build_model(cfg: RunConfig, dtype=np.float32) -> DPLNet:
    """Model for ``cfg`` with the configured freeze variant applied."""
    model = DPLNet(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    if cfg.full_finetune:
        model.freeze(False)
    elif cfg.freeze_decoder:
        model.decoder.freeze(True)
    partition_parameters(model, strict=not cfg.full_finetune)
    return model


def model_from_state(state: TrainState) -> tuple[RunConfig, DPLNet]:
    cfg = parse_config(state.config_text)
    model = build_model(cfg)
    restore_params(model, state.params)
    return cfg, model


def to_inputs(records: list[SampleRecord]) -> tuple[Tensor, Tensor, np.ndarray]:
    rgb = np.stack([r.rgb for r in records])
    aux = np.stack([r.aux for r in records])
    labels = np.stack([r.label for r in records]).astype(np.int64)
    return Tensor(normalize_rgb(rgb)), Tensor(normalize_aux(aux)), labels


def load_records(path) -> list[SampleRecord]:
    return read_manifest(path).load_all() if path else []


def _copy_opt(opt: OptState) -> OptState:
    return OptState(opt.step, {k: {b: v.copy() for b, v in bufs.items()} for k, bufs in opt.buffers.items()})


def _fmt(v) -> str:
    return "-" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


@dataclass
class Trainer:
    """Owns the model, optimizer state and data order of one run.

    Batch ``b`` of epoch ``e`` draws samples from a permutation seeded by
    ``(seed, e)``; augmentation draws from a single generator whose state is
    checkpointed, so an interrupted run resumes onto the identical stream.
    """

    cfg: RunConfig
    train: list[SampleRecord]
    val: list[SampleRecord] = field(default_factory=list)
    model: DPLNet | None = None
    opt: OptState = field(default_factory=OptState)
    step: int = 0
    log_path: Path | None = None
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            raise ValueError("training set is empty")
        if self.model is None:
            self.model = build_model(self.cfg)
        self.aug_rng = np.random.default_rng([self.cfg.seed, 7])
        self.steps_per_epoch = math.ceil(len(self.train) / self.cfg.batch_size)
        self.total_steps = self.cfg.epochs * self.steps_per_epoch
        self._reset_epoch()
        self.frozen_digest = frozen_hash(self.model)

    def _reset_epoch(self):
        self.loss_sum = 0.0
        self.cm = ConfusionMatrix(self.cfg.num_classes)

    # -- state -------------------------------------------------------------
    def state(self) -> TrainState:
        runtime = {
            "aug_rng": self.aug_rng.bit_generator.state,
            "loss_sum": self.loss_sum,
            "cm": self.cm.counts.tolist(),
            "frozen_hash": self.frozen_digest,
            "rows": self.rows,
        }
        return TrainState(serialize(self.cfg), capture_params(self.model), _copy_opt(self.opt), runtime, self.step)

    @classmethod
    def from_state(cls, state: TrainState, train, val=(), log_path=None) -> "Trainer":
        cfg, model = model_from_state(state)
        t = cls(cfg, list(train), list(val), model=model, opt=_copy_opt(state.opt), step=state.step,
                log_path=log_path)
        rt = state.runtime
        t.aug_rng.bit_generator.state = rt["aug_rng"]
        t.loss_sum = rt["loss_sum"]
        t.cm.counts = np.array(rt["cm"], dtype=np.int64)
        t.frozen_digest = rt["frozen_hash"]
        t.rows = [dict(r) for r in rt["rows"]]
        return t

    # -- loop ----------------------------------------------------------------
    def batch(self, step: int) -> list[SampleRecord]:
        epoch, b = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train))
        idx = order[b * self.cfg.batch_size:(b + 1) * self.cfg.batch_size]
        c = self.cfg
        return [augment(self.train[i], self.aug_rng, c.flip_p, (c.scale_min, c.scale_max), (c.crop_size,) * 2)
                for i in idx]

    def train_step(self) -> float:
        c = self.cfg
        i_rgb, i_x, labels = to_inputs(self.batch(self.step))
        with Tape() as tape:
            logits = self.model(i_rgb, i_x)
            loss = ops.cross_entropy(logits, labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise self._diverged(value)
        grads = backward(tape, loss)
        lr = poly_lr(c.lr, self.step, self.total_steps)
        optimizer_step(self.model.parameters(), grads, self.opt, c.optimizer, lr=lr,
                       weight_decay=c.weight_decay, momentum=c.momentum)
        self.loss_sum += value
        self.cm.update(logits.data.argmax(axis=1), labels)
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self._end_epoch(lr)
        return value

    def _diverged(self, value: float) -> TrainingDivergedError:
        snap = None
        if self.cfg.out_dir:
            snap = Path(self.cfg.out_dir) / "diverged.dplc"
            save_checkpoint(self.state(), snap)
        worst = max(self.model.named_parameters(), key=lambda kv: float(np.abs(kv[1].data).max()))
        msg = (f"loss became {value} at step {self.step}; largest parameter {worst[0]} "
               f"max|w|={float(np.abs(worst[1].data).max()):.3e}; snapshot: {snap}")
        return TrainingDivergedError(msg, snap)

    def _end_epoch(self, lr: float) -> None:
        from .evaluate import evaluate

        epoch = self.step // self.steps_per_epoch
        try:
            train_miou, train_acc = miou(self.cm)[1], pixel_accuracy(self.cm)
        except UndefinedMetricError:
            train_miou = train_acc = None
        val_miou = val_acc = None
        if self.val:
            res = evaluate(self.model, self.val, num_classes=self.cfg.num_classes)
            val_miou, val_acc = res.miou, res.pixel_acc
        row = {"epoch": epoch, "step": self.step, "lr": lr, "loss": self.loss_sum / self.steps_per_epoch,
               "train_miou": train_miou, "train_acc": train_acc, "val_miou": val_miou, "val_acc": val_acc}
        self.rows.append(row)
        if self.log_path is not None:
            new = not self.log_path.exists()
            with self.log_path.open("a") as fh:
                if new:
                    fh.write("\t".join(LOG_COLUMNS) + "\n")
                fh.write("\t".join(_fmt(row[k]) for k in LOG_COLUMNS) + "\n")
        self._reset_epoch()
        if self.cfg.out_dir:
            save_checkpoint(self.state(), Path(self.cfg.out_dir) / "last.dplc")

    def run(self, until_step: int | None = None) -> None:
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.step < stop:
            self.train_step()

    def verify_frozen(self) -> None:
        if frozen_hash(self.model) != self.frozen_digest:
            raise IntegrityError("frozen parameters changed during training")

    def format_log(self) -> str:
        lines = ["\t".join(LOG_COLUMNS)]
        lines += ["\t".join(_fmt(r[k]) for k in LOG_COLUMNS) for r in self.rows]
        return "\n".join(lines)


def train(cfg: RunConfig, train_records=None, val_records=None, resume=None, until_step=None,
          write_files: bool = True) -> Trainer:
    """Run (or resume) training; returns the trainer holding the final model.

    ``until_step`` stops early, leaving a resumable ``last.dplc`` behind.
    When resuming, the configuration stored in the checkpoint wins over ``cfg``.
    """
    if resume is not None:
        cfg = parse_config(resume.config_text)
    train_records = load_records(cfg.train_manifest) if train_records is None else train_records
    val_records = load_records(cfg.val_manifest) if val_records is None else val_records
    out = Path(cfg.out_dir) if (write_files and cfg.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv" if out is not None else None
    if resume is not None:
        trainer = Trainer.from_state(resume, train_records, val_records, log_path)
    else:
        if log_path is not None and log_path.exists():
            log_path.unlink()
        trainer = Trainer(cfg, list(train_records), list(val_records), log_path=log_path)
    if out is None:
        trainer.cfg = trainer.cfg.replace(out_dir="")
    trainer.run(until_step)
    if out is not None:
        save_checkpoint(trainer.state(), out / ("final.dplc" if trainer.step >= trainer.total_steps else "last.dplc"))
    trainer.verify_frozen()
    return trainer
