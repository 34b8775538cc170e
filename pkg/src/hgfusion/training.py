from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import TrainingSample, batch, sample_augmentation
from .errors import NumericalError, UsageError
from .model import StackedHourglass
from .ops import add, mse_loss
from .optim import RMSPROP_DECAY, RMSPROP_EPSILON, rmsprop_step
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.hgfz"


def total_loss(heatmap_sets: Sequence[Tensor], target: Tensor) -> Tensor:
    """Intermediate supervision: every stack is scored against the same target."""
    if not heatmap_sets:
        raise UsageError("total_loss needs at least one prediction")
    for i, pred in enumerate(heatmap_sets):
        if pred.shape != target.shape:
            raise UsageError(f"prediction {i} has shape {pred.shape}, target {target.shape}")
    loss = mse_loss(heatmap_sets[0], target)
    for pred in heatmap_sets[1:]:
        loss = add(loss, mse_loss(pred, target))
    return loss


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-4
    batch_size: int = 8
    max_epochs: int = 1
    seed: int = 0
    eval_every: int = 100
    augment: bool = True
    # Stop after this many optimiser steps even mid-epoch; None means no cap.
    max_steps: int | None = None
    decay: float = RMSPROP_DECAY
    epsilon: float = RMSPROP_EPSILON

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise UsageError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    best_checkpoint: str | None = None
    # (step, split, loss) with split in {"train", "val"}
    history: list[tuple[int, str, float]] = field(default_factory=list)

    def losses(self, split: str = "train") -> list[float]:
        return [loss for _, s, loss in self.history if s == split]

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "split", "loss"])
            for step, split, loss in self.history:
                w.writerow([step, split, repr(float(loss))])


def read_history(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as f:
        return [(int(r["step"]), r["split"], float(r["loss"])) for r in csv.DictReader(f)]


def _to_tensors(model: StackedHourglass, b):
    image = Tensor(b.images)
    activity = Tensor(b.activities) if model.config.variant == "contextual" else None
    return image, activity, Tensor(b.heatmaps)


def _check_resolution(model: StackedHourglass, sample: TrainingSample) -> None:
    cfg = model.config
    if sample.image.shape[2] != cfg.input_side:
        raise UsageError(f"samples are {sample.image.shape[2]} px but the model expects {cfg.input_side}")


def validation_loss(model: StackedHourglass, dataset, batch_size: int = 8) -> float:
    """Mean per-sample total loss over the whole set, BN in inference mode."""
    n = len(dataset)
    if n == 0:
        raise UsageError("validation set is empty")
    was_training = any(s.mode == "train" for s in model.batch_norm_states())
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for start in range(0, n, batch_size):
                b = batch([dataset.sample(i) for i in range(start, min(start + batch_size, n))])
                image, activity, target = _to_tensors(model, b)
                total += total_loss(model(image, activity), target).item() * len(b)
    finally:
        if was_training:
            model.train()
    return total / n


def train_step(model: StackedHourglass, b, cfg: TrainConfig) -> float:
    image, activity, target = _to_tensors(model, b)
    model.zero_grad()
    loss = total_loss(model(image, activity), target)
    backward(loss)
    rmsprop_step(model.parameters(), cfg.learning_rate, cfg.decay, cfg.epsilon)
    return loss.item()


def train(
    model: StackedHourglass,
    train_set,
    val_set=None,
    cfg: TrainConfig | None = None,
    out_dir=None,
) -> TrainState:
    """Minibatch RMSprop with intermediate supervision.

    ``train_set``/``val_set`` provide ``len()`` and ``sample(index, aug)``
    (see :class:`~hgfusion.data.PoseDataset`).  The model is validated every
    ``cfg.eval_every`` steps and once more at the end; whenever the
    validation loss improves, the model is checkpointed to
    ``out_dir/best.hgfz``.  Without a validation set the final model is
    saved instead.
    """
    cfg = cfg or TrainConfig()
    n = len(train_set)
    if n == 0:
        raise UsageError("training set is empty")
    _check_resolution(model, train_set.sample(0))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    has_val = val_set is not None and len(val_set) > 0

    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    model.train()

    def validate():
        loss = validation_loss(model, val_set, cfg.batch_size)
        state.history.append((state.step, "val", loss))
        if loss < state.best_val_loss:
            state.best_val_loss = loss
            if out_dir is not None:
                path = out_dir / BEST_CHECKPOINT
                save_checkpoint(model, path)
                state.best_checkpoint = str(path)
        log.info("step %d val loss %.6g (best %.6g)", state.step, loss, state.best_val_loss)

    done = False
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            samples = [
                train_set.sample(int(i), sample_augmentation(rng, train_set.output_side) if cfg.augment else None)
                for i in ids
            ]
            try:
                loss = train_step(model, batch(samples), cfg)
            except NumericalError as exc:
                raise NumericalError(
                    f"training aborted at step {state.step} (epoch {epoch}, batch ids {ids.tolist()}): {exc}"
                ) from exc
            state.step += 1
            state.history.append((state.step, "train", loss))
            if has_val and state.step % cfg.eval_every == 0:
                validate()
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    state.epoch += 1

    if has_val and (not state.history or state.history[-1][1] != "val"):
        validate()
    if not has_val and out_dir is not None:
        log.warning("no validation set; saving the final model as the best checkpoint")
        path = out_dir / BEST_CHECKPOINT
        save_checkpoint(model, path)
        state.best_checkpoint = str(path)
    if out_dir is not None:
        state.write_history(out_dir / "loss_history.csv")
    return state
