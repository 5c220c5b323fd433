"""Joint training of UNet and MRF by back-propagation through mean field."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import MRFUNet
from .phantom import AugmentationParams, augment
from .tensor import GradTape, Tensor
from .volume import argmax_labels, one_hot

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [C, D, H, W]
    labels: np.ndarray  # [1, D, H, W] integer
    name: str = ""


# --- optimiser and schedule -------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> bool:
    """Bias-corrected ADAM update in place; returns False (no update) on non-finite grads."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.isfinite(g).all() for g in grads):
        logger.warning("non-finite gradient at step %d; update skipped", state.t + 1)
        return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype)
    return True


class Adam:
    """ADAM over named parameters with an optional post-step projection."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], betas=(0.9, 0.999), eps=1e-8,
                 project: Optional[Callable[[], object]] = None):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = AdamState.zeros_like(self.params)
        self.betas = betas
        self.eps = eps
        self.project = project

    def step(self, lr: float) -> bool:
        ok = adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas, self.eps)
        if self.project is not None:
            self.project()
        return ok

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norms(self) -> dict[str, float]:
        return {n: float(np.sqrt((p.grad ** 2).sum())) if p.grad is not None else 0.0
                for n, p in zip(self.names, self.params)}


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a ``threshold`` improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, threshold: float = 1e-4,
                 min_lr: float = 1e-6):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"plateau factor must lie in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


# --- metrics ----------------------------------------------------------------

def dice(pred_labels, ref_labels, k: int) -> float:
    """Dice overlap of class ``k``; 1.0 when the class is absent from both."""
    p = np.asarray(pred_labels) == k
    r = np.asarray(ref_labels) == k
    if p.shape != r.shape:
        raise ValueError(f"label volumes differ in shape: {p.shape} vs {r.shape}")
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & r).sum()) / total


def dice_per_class(pred_labels, ref_labels, num_classes: int) -> list[float]:
    return [dice(pred_labels, ref_labels, k) for k in range(num_classes)]


def mean_dice(pred_labels, ref_labels, num_classes: int) -> float:
    return float(np.mean(dice_per_class(pred_labels, ref_labels, num_classes)))


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    dice: list[float]
    lr: float
    n_iter: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))


def metrics_header(k: int) -> list[str]:
    return ["epoch", "split", "loss"] + [f"dice_{c}" for c in range(k)] + ["mean_dice", "lr", "n_iter"]


def write_metrics_csv(path, rows: Sequence[MetricsRow], k: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(k))
        for r in rows:
            writer.writerow([r.epoch, r.split, repr(float(r.loss))] + [repr(float(d)) for d in r.dice]
                            + [repr(r.mean_dice), repr(float(r.lr)), repr(float(r.n_iter))])


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    augmentation: Optional[AugmentationParams] = field(default_factory=AugmentationParams)
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau factor must lie in (0, 1)")


@dataclass
class TrainResult:
    model: MRFUNet
    best: "object"  # Checkpoint of the best validation epoch
    rows: list[MetricsRow]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _forward_loss(model: MRFUNet, image, labels, mode, rng=None, n_iter=None):
    target = one_hot(labels, model.k)
    res = model.forward(Tensor(image), mode=mode, rng=rng, n_iter=n_iter)
    return T.cross_entropy(res.log_R, target), res


def validate(model: MRFUNet, samples: Sequence[Sample], n_iter: Optional[int] = None) -> tuple[float, list[float]]:
    """Mean test-mode loss and per-class Dice (averaged over samples)."""
    losses, dices = [], []
    for s in samples:
        loss, res = _forward_loss(model, s.image, s.labels, "test", n_iter=n_iter)
        losses.append(loss.item())
        dices.append(dice_per_class(argmax_labels(res.R), s.labels, model.k))
    return float(np.mean(losses)), list(np.mean(dices, axis=0))


def train(model: MRFUNet, train_set: Sequence[Sample], val_set: Sequence[Sample], config: TrainConfig,
          on_epoch: Optional[Callable[[list[MetricsRow]], None]] = None) -> TrainResult:
    from .checkpoint import Checkpoint

    names = {s.name for s in train_set if s.name}
    if names & {s.name for s in val_set if s.name}:
        raise ValueError("train and validation sets overlap")
    if not train_set:
        raise ValueError("empty training set")
    for s in list(train_set) + list(val_set):
        if int(s.labels.max()) >= model.k:
            raise ValueError(f"sample {s.name!r} has label {int(s.labels.max())} but the model has {model.k} classes")

    project = model.mrf.project if model.mrf is not None else None
    opt = Adam(model.named_parameters(), config.betas, config.eps, project)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience,
                             config.plateau_threshold, config.min_lr)
    rows: list[MetricsRow] = []
    best, best_loss = None, np.inf
    for epoch in range(1, config.epochs + 1):
        lr = sched.lr
        order = np.arange(len(train_set))
        if config.shuffle:
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        losses, dices, draws = [], [], []
        for idx in order:
            sample = train_set[idx]
            rng = sample_rng(config.seed, epoch, int(idx))
            image, labels = sample.image, sample.labels
            if config.augmentation is not None:
                image, labels = augment(image, labels, config.augmentation, rng)
            with GradTape() as tape:
                loss, res = _forward_loss(model, image, labels, "train", rng)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, sample {idx} ({sample.name!r}), "
                                    f"seed {config.seed}")
            tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            losses.append(loss.item())
            dices.append(dice_per_class(argmax_labels(res.R), labels, model.k))
            draws.append(res.n_iter)
        rows.append(MetricsRow(epoch, "train", float(np.mean(losses)), list(np.mean(dices, axis=0)), lr,
                               float(np.mean(draws))))
        if val_set:
            val_loss, val_dice = validate(model, val_set)
            rows.append(MetricsRow(epoch, "val", val_loss, val_dice, lr, float(model.fusion.n_iter_test)))
            sched.step(val_loss)
        else:
            val_loss = rows[-1].loss
        if best is None or val_loss < best_loss:
            best_loss = val_loss
            best = Checkpoint.from_model(model, epoch=epoch, best_val_loss=val_loss, seed=config.seed)
        if on_epoch is not None:
            on_epoch(rows)
        logger.info("epoch %d: train loss %.4f, val loss %.4f, lr %.2e", epoch, float(np.mean(losses)),
                    val_loss, lr)
    return TrainResult(model, best, rows)


def evaluate(model: MRFUNet, dataset: Sequence[Sample], n_iter: Optional[int] = None) -> list[dict]:
    """Per-sample Dice rows (``sample``, ``dice_k``..., ``mean_dice``) with test-mode fusion."""
    out = []
    for s in dataset:
        if int(s.labels.max()) >= model.k:
            raise ValueError(f"sample {s.name!r} has label {int(s.labels.max())} but the model has {model.k} classes")
        if s.image.shape[0] != model.unet.config.in_channels:
            raise ValueError(f"sample {s.name!r} has {s.image.shape[0]} channels, model expects "
                             f"{model.unet.config.in_channels}")
        res = model.forward(Tensor(s.image), mode="test", n_iter=n_iter)
        d = dice_per_class(argmax_labels(res.R), s.labels, model.k)
        row = {"sample": s.name}
        row.update({f"dice_{c}": v for c, v in enumerate(d)})
        row["mean_dice"] = float(np.mean(d))
        out.append(row)
    return out


def predict(model: MRFUNet, image: np.ndarray, n_iter: Optional[int] = None) -> np.ndarray:
    return argmax_labels(model.forward(Tensor(image), mode="test", n_iter=n_iter).R)
