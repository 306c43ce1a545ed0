"""Adam training loop with per-epoch validation and best-checkpoint retention."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .data import AugmentSpec, PatchSet, augment
from .errors import ConfigurationError, DatasetError, TrainingDiverged
from .perceptual import FeatureExtractor, LossWeights, composite_loss_and_grad

HISTORY_HEADER = ("epoch", "train_loss", "val_loss")


@dataclass
class TrainConfig:
    variant: str = "M16"
    out_channels: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid Adam constants")

    def model_config(self):
        return model_mod.ModelConfig(self.variant, self.out_channels)


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in self.params}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params}
        self.t = 0

    def step(self):
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            m, v, g = self.m[name], self.v[name], p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def validate(model, val: PatchSet, weights: LossWeights, fx: FeatureExtractor | None = None, batch_size=8):
    """Mean composite loss over ``val`` with the model in inference mode."""
    if len(val) == 0:
        raise DatasetError(["validation set is empty"])
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for i in range(0, len(val), batch_size):
            idx = range(i, min(i + batch_size, len(val)))
            x, y = val.arrays(idx)
            terms, _ = composite_loss_and_grad(model(x), y, weights, fx, grad=False)
            total += terms.total * len(idx)
    finally:
        model.train(was_training)
    return total / len(val)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


class Trainer:
    """Owns the model, optimizer and output directory for one run.

    ``out_dir`` receives ``best.ckpt`` (rewritten whenever validation loss
    strictly improves) and ``history.csv``.
    """

    def __init__(self, cfg: TrainConfig, fx: FeatureExtractor | None = None, out_dir=None,
                 augment_spec: AugmentSpec | None = None, model=None, log=None):
        self.cfg = cfg
        self.fx = fx
        self.out_dir = out_dir
        self.augment_spec = augment_spec
        self.model = model if model is not None else model_mod.build_model(cfg.model_config(), seed=cfg.seed)
        self.opt = Adam(self.model.named_parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        self.history: list[EpochRecord] = []
        self.best_val = math.inf
        self.step_count = 0
        self.log = log or (lambda msg: None)
        if (cfg.weights.feature > 0 or cfg.weights.style > 0) and fx is None:
            raise ConfigurationError("perceptual loss weights are nonzero but no feature extractor was given")

    def train_step(self, x, y):
        """One optimizer step on a batch; returns the loss terms before the update."""
        m = self.model
        m.train()
        m.zero_grad()
        pred = m(x)
        terms, g = composite_loss_and_grad(pred, y, self.cfg.weights, self.fx)
        if not math.isfinite(terms.total):
            raise TrainingDiverged(f"loss became {terms.total} at step {self.step_count}")
        m.backward(g, input_grad=False)
        self.opt.step()
        self.step_count += 1
        return terms

    def _batch(self, train: PatchSet, order, epoch, start):
        idx = order[start:start + self.cfg.batch_size]
        x, y = train.arrays(idx)
        if self.augment_spec is not None:
            base = epoch * len(train)
            x = np.stack([augment(x[k], y[k], self.augment_spec, base + int(i))[0] for k, i in enumerate(idx)])
        return x, y

    def fit(self, train: PatchSet, val: PatchSet):
        if len(train) == 0:
            raise DatasetError(["training set is empty"])
        if len(val) == 0:
            raise DatasetError(["validation set is empty"])
        cfg = self.cfg
        for epoch in range(1, cfg.max_epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
            losses = []
            for start in range(0, len(train), cfg.batch_size):
                if cfg.max_steps is not None and self.step_count >= cfg.max_steps:
                    break
                x, y = self._batch(train, order, epoch, start)
                losses.append(self.train_step(x, y).total)
            if not losses:
                break
            val_loss = validate(self.model, val, cfg.weights, self.fx, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDiverged(f"validation loss became {val_loss} in epoch {epoch}")
            rec = EpochRecord(epoch, float(np.mean(losses)), val_loss)
            self.history.append(rec)
            improved = val_loss < self.best_val
            if improved:
                self.best_val = val_loss
                if self.out_dir:
                    model_mod.save_checkpoint(
                        self.model, os.path.join(self.out_dir, "best.ckpt"),
                        epoch=epoch, step=self.step_count, val_loss=val_loss, seed=cfg.seed,
                    )
            if self.out_dir:
                write_history(os.path.join(self.out_dir, "history.csv"), self.history)
            self.log(f"epoch {epoch}: train {rec.train_loss:.6g} val {val_loss:.6g}"
                     + (" (saved)" if improved else ""))
        return self.history


def write_history(path, history):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])
    os.replace(tmp, path)


def read_history(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in rows]
