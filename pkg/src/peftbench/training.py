"""Masked fine-tuning loop with early stopping and macro-F1 evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .peft import AdaptedModel, trainable_count
from .rng import RngStream

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class TrainReport:
    best_val_metric: float
    test_metric: float
    epochs_run: int
    curve: list = field(default_factory=list)  # per epoch: (train_loss, val_metric)
    stopped_early: bool = False
    trainable_params: int = 0

    def to_json(self) -> dict:
        return {
            "best_val_metric": self.best_val_metric,
            "test_metric": self.test_metric,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "trainable_params": self.trainable_params,
            "curve": [[float(a), float(b)] for a, b in self.curve],
        }

    def curve_csv(self) -> str:
        lines = ["epoch,train_loss,val_metric"]
        for i, (loss, metric) in enumerate(self.curve, start=1):
            lines.append(f"{i},{loss:.4f},{metric:.4f}")
        return "\n".join(lines) + "\n"


def total_loss(outputs: ad.Tensor, targets, kind: str) -> ad.Tensor:
    """Mean-reduced training loss with the gradient graph attached."""
    if kind == "cross-entropy":
        return ad.cross_entropy(outputs, targets)
    if kind == "mse":
        return ad.mse(outputs, targets)
    raise ValueError(f"unknown loss kind {kind!r}")


class EarlyStopper:
    """Stop after `patience` epochs without strict (> tol) improvement."""

    def __init__(self, patience: int, tol: float = 1e-6):
        self.patience = patience
        self.tol = tol
        self.best = -np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.best + self.tol:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class Optimizer:
    """SGD / SGD-momentum / Adam over an explicit parameter list.

    Only the given records are ever touched, so frozen parameters stay
    bitwise intact no matter what gradients a backward pass produced.
    """

    def __init__(self, records, cfg: TrainConfig):
        self.records = list(records)
        self.cfg = cfg
        self.state: dict[str, dict] = {}

    def step(self):
        grads = [r.tensor.grad for r in self.records]
        if self.records and all(g is None for g in grads):
            raise RuntimeError("optimizer step before backward: no gradients present")
        lr = self.cfg.learning_rate
        wd = self.cfg.weight_decay
        for rec, g in zip(self.records, grads):
            if g is None:
                continue
            if wd:
                g = g + wd * rec.tensor.data
            st = self.state.setdefault(rec.name, {"t": 0})
            if self.cfg.optimizer == "sgd":
                rec.tensor.data -= lr * g
            elif self.cfg.optimizer == "sgd-momentum":
                buf = st.setdefault("momentum", np.zeros_like(g))
                buf *= 0.9
                buf += g
                rec.tensor.data -= lr * buf
            else:  # adam
                st["t"] += 1
                t = st["t"]
                m = st.setdefault("m", np.zeros_like(g))
                v = st.setdefault("v", np.zeros_like(g))
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mhat = m / (1.0 - 0.9 ** t)
                vhat = v / (1.0 - 0.999 ** t)
                rec.tensor.data -= lr * mhat / (np.sqrt(vhat) + 1e-8)

    def zero_grad(self):
        ad.zero_grads(self.records)


def macro_f1(predictions, targets, num_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class with no predicted and no true instances contributes F1 = 0, so
    scores are comparable across splits that may miss rare classes.
    """
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape or predictions.size < 1:
        raise ValueError("predictions and targets must be same-length, non-empty")
    for arr, label in ((predictions, "prediction"), (targets, "target")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{label} class id out of range [0, {num_classes})")
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((predictions == c) & (targets == c)))
        fp = int(np.sum((predictions == c) & (targets != c)))
        fn = int(np.sum((predictions != c) & (targets == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def predict_classes(adapted: AdaptedModel, x: np.ndarray, batch_size: int = 64):
    preds = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            logits = adapted.forward(x[i : i + batch_size], train=False)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate_f1(adapted: AdaptedModel, x, y, num_classes: int,
                batch_size: int = 64) -> float:
    return macro_f1(predict_classes(adapted, x, batch_size), y, num_classes)


def train_loop(adapted: AdaptedModel, splits: dict, cfg: TrainConfig) -> TrainReport:
    """Fine-tune on `splits` = {"train"|"val"|"test": (inputs, labels)}.

    Runs at most cfg.max_epochs, stops after cfg.patience epochs without
    validation improvement, restores the best-validation checkpoint before
    the test evaluation. Deterministic given cfg.seed.
    """
    for key in ("train", "val", "test"):
        if key not in splits or len(splits[key][0]) == 0:
            raise ValueError(f"empty or missing split: {key}")
    x_train, y_train = splits["train"]
    num_classes = adapted.base.cfg.classes
    rng = RngStream(cfg.seed).child("train-loop")
    opt = Optimizer(adapted.trainable_records(), cfg)
    stopper = EarlyStopper(cfg.patience)
    n_trainable = trainable_count(adapted)[0]

    curve = []
    best_state = None
    epochs_run = 0
    stopped_early = False
    for epoch in range(cfg.max_epochs):
        epochs_run = epoch + 1
        order = rng.child(f"shuffle-{epoch}").permutation(len(x_train))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            logits = adapted.forward(x_train[idx], train=True)
            loss = total_loss(logits, y_train[idx], "cross-entropy")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item() * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        val_metric = evaluate_f1(adapted, *splits["val"], num_classes,
                                 cfg.batch_size)
        curve.append((train_loss, val_metric))
        if stopper.update(val_metric, epoch):
            best_state = adapted.state_snapshot()
        if stopper.should_stop:
            stopped_early = True
            break

    if best_state is not None:
        adapted.load_snapshot(best_state)
    test_metric = evaluate_f1(adapted, *splits["test"], num_classes,
                              cfg.batch_size)
    return TrainReport(
        best_val_metric=float(stopper.best),
        test_metric=float(test_metric),
        epochs_run=epochs_run,
        curve=curve,
        stopped_early=stopped_early,
        trainable_params=n_trainable,
    )
