"""NLL training loop, optimizer ablation set, early stopping and prediction export."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .errors import (
    DivergedTraining,
    EmptyDataset,
    IOFailure,
    LabelOutOfRange,
    MissingHyperparam,
    ShapeMismatch,
    UnknownOptimizer,
    ValidationError,
)
from .manifest import DatasetManifest, Label
from .models import ModelHandle
from .pipeline import (
    AugmentationRanges,
    NormalizationStats,
    apply_augmentation,
    derive_key,
    load_image,
    model_input,
    sample_augmentation,
    standardize,
)
from .predictions import PredictionRecord, write_predictions

logger = logging.getLogger(__name__)


# --- loss --------------------------------------------------------------------


def nll_loss(logprobs, labels, reduction="mean"):
    """Negative log-likelihood of the true class: ``-sum_i logprobs[i, y_i]`` (divided by B for mean)."""
    lp = logprobs if isinstance(logprobs, torch.Tensor) else torch.as_tensor(np.asarray(logprobs, dtype=np.float64))
    y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(np.asarray(labels))
    if lp.ndim != 2 or lp.shape[1] != 2:
        raise ShapeMismatch(f"log-probabilities must be Bx2, got {tuple(lp.shape)}")
    y = y.reshape(-1).long()
    if y.shape[0] != lp.shape[0]:
        raise ShapeMismatch(f"{lp.shape[0]} rows but {y.shape[0]} labels")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) > 1):
        raise LabelOutOfRange("labels must be 0 or 1")
    picked = lp.gather(1, y.unsqueeze(1)).squeeze(1)
    if reduction == "sum":
        return -picked.sum()
    if reduction == "mean":
        return -picked.mean()
    raise ValidationError(f"unknown reduction {reduction!r}")


# --- optimizers --------------------------------------------------------------

OPTIMIZER_DEFAULTS = {
    "adamw": {"weight_decay": 0.01, "betas": (0.9, 0.999), "eps": 1e-8},
    "radam": {"weight_decay": 0.0, "betas": (0.9, 0.999), "eps": 1e-8},
    "ranger": {"lookahead_k": 6, "lookahead_alpha": 0.5, "weight_decay": 0.0, "betas": (0.95, 0.999), "eps": 1e-5},
    "rprop": {"etas": (0.5, 1.2), "step_sizes": (1e-6, 50.0)},
    "sgd_warm_restarts": {"momentum": 0.9, "weight_decay": 0.0, "restart_period": 10, "period_multiplier": 2,
                          "eta_min": 0.0},
}
OPTIMIZER_KINDS = tuple(OPTIMIZER_DEFAULTS)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adamw"
    hyperparams: dict = field(default_factory=dict)

    def resolved(self):
        if self.kind not in OPTIMIZER_DEFAULTS:
            raise UnknownOptimizer(f"unknown optimizer {self.kind!r}; choose from {', '.join(OPTIMIZER_KINDS)}")
        defaults = OPTIMIZER_DEFAULTS[self.kind]
        unknown = set(self.hyperparams) - set(defaults)
        if unknown:
            raise ValidationError(f"{self.kind} does not take hyperparameter(s) {sorted(unknown)}")
        merged = {**defaults, **self.hyperparams}
        for key, val in merged.items():
            if val is None:
                raise MissingHyperparam(f"{self.kind} requires {key!r}")
        return merged


class Lookahead:
    """Lookahead wrapper: every ``k`` inner steps, pull slow weights toward fast ones by ``alpha``."""

    def __init__(self, base, k=6, alpha=0.5):
        if k < 1 or not 0.0 < alpha <= 1.0:
            raise ValidationError("lookahead needs k >= 1 and alpha in (0, 1]")
        self.base = base
        self.k = int(k)
        self.alpha = float(alpha)
        self.counter = 0
        self.slow = [[p.detach().clone() for p in g["params"]] for g in base.param_groups]

    @property
    def param_groups(self):
        return self.base.param_groups

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.base.step(closure)
        self.counter += 1
        if self.counter % self.k == 0:
            for group, slows in zip(self.base.param_groups, self.slow):
                for p, s in zip(group["params"], slows):
                    s.add_(p - s, alpha=self.alpha)
                    p.copy_(s)
        return loss

    def zero_grad(self, set_to_none=True):
        self.base.zero_grad(set_to_none=set_to_none)

    def state_dict(self):
        return {"base": self.base.state_dict(), "slow": self.slow, "counter": self.counter}

    def load_state_dict(self, state):
        self.base.load_state_dict(state["base"])
        self.slow = [[s.clone() for s in group] for group in state["slow"]]
        self.counter = state["counter"]


class OptimizerHandle:
    """Uniform step / zero_grad / state interface plus an optional per-epoch schedule."""

    def __init__(self, kind, optimizer, scheduler=None):
        self.kind = kind
        self.optimizer = optimizer
        self.scheduler = scheduler

    def step(self):
        self.optimizer.step()

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def advance_schedule(self):
        if self.scheduler is not None:
            self.scheduler.step()

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def state_dict(self):
        return {
            "kind": self.kind,
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict() if self.scheduler is not None else None,
        }

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ValidationError(f"optimizer state is for {state['kind']}, not {self.kind}")
        self.optimizer.load_state_dict(state["optimizer"])
        if self.scheduler is not None and state["scheduler"] is not None:
            self.scheduler.load_state_dict(state["scheduler"])


def build_optimizer(spec: OptimizerSpec, params, lr=1e-4) -> OptimizerHandle:
    hp = spec.resolved()
    params = list(params)
    if not params:
        raise ValidationError("no trainable parameters to optimise")
    kind = spec.kind
    if kind == "adamw":
        opt = torch.optim.AdamW(params, lr=lr, betas=tuple(hp["betas"]), eps=hp["eps"], weight_decay=hp["weight_decay"])
        return OptimizerHandle(kind, opt)
    if kind == "radam":
        opt = torch.optim.RAdam(params, lr=lr, betas=tuple(hp["betas"]), eps=hp["eps"], weight_decay=hp["weight_decay"])
        return OptimizerHandle(kind, opt)
    if kind == "ranger":
        inner = torch.optim.RAdam(params, lr=lr, betas=tuple(hp["betas"]), eps=hp["eps"],
                                  weight_decay=hp["weight_decay"])
        return OptimizerHandle(kind, Lookahead(inner, hp["lookahead_k"], hp["lookahead_alpha"]))
    if kind == "rprop":
        opt = torch.optim.Rprop(params, lr=lr, etas=tuple(hp["etas"]), step_sizes=tuple(hp["step_sizes"]))
        return OptimizerHandle(kind, opt)
    # sgd_warm_restarts
    opt = torch.optim.SGD(params, lr=lr, momentum=hp["momentum"], weight_decay=hp["weight_decay"])
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=int(hp["restart_period"]), T_mult=int(hp["period_multiplier"]), eta_min=hp["eta_min"])
    return OptimizerHandle(kind, opt, sched)


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    max_epochs: int = 100
    patience: int = 20
    folds: int = 1
    input_channels: int = 3
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    global_seed: int = 0
    mixed_precision: bool = False
    monitor: str = "val_loss"
    num_workers: int = 0
    n_steps: int = 10  # accepted for completeness; the loop does not use it

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.patience < 1 or self.patience > max(self.max_epochs, 1):
            raise ValidationError("patience must satisfy 1 <= patience <= max_epochs")
        if self.folds != 1:
            raise ValidationError("only a single fixed split (folds=1) is supported")
        if self.input_channels != 3:
            raise ValidationError("models take 3-channel input")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ValidationError(f"unknown monitor {self.monitor!r}")


# --- data --------------------------------------------------------------------


class ImageSet(Dataset):
    """Labelled images -> normalised CHW tensors.

    ``items`` are (filename, label, source) where source is a file path or an
    in-memory raster.  With ``augment`` set, images of the labels in
    ``augment_labels`` get a fresh transform each epoch keyed by
    (seed, image id, epoch), so worker count and order never change results.
    """

    def __init__(self, items, stats: NormalizationStats, augment=False, global_seed=0,
                 ranges: AugmentationRanges | None = None, augment_labels=(Label.POSITIVE,)):
        self.items = sorted(((str(f), Label(y), src) for f, y, src in items), key=lambda it: it[0])
        self.stats = stats
        self.augment = augment
        self.global_seed = global_seed
        self.ranges = ranges
        self.augment_labels = frozenset(Label(x) for x in augment_labels)
        self.epoch = 0

    @classmethod
    def from_folder(cls, folder, stats, **kwargs):
        """Read ``folder/{negative,positive}/*`` as produced by materialize."""
        folder = Path(folder)
        items = []
        for lab in Label:
            d = folder / lab.folder
            if d.is_dir():
                items += [(p.name, lab, p) for p in sorted(d.iterdir()) if p.is_file()]
        return cls(items, stats, **kwargs)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, root, stats, **kwargs):
        root = Path(root)
        return cls([(r.image_id + Path(r.path).suffix, r.label, root / r.path) for r in manifest], stats, **kwargs)

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def __len__(self):
        return len(self.items)

    @property
    def labels(self):
        return [int(lab) for _, lab, _ in self.items]

    def raster(self, i):
        _, _, src = self.items[i]
        img = src if isinstance(src, np.ndarray) else load_image(src)
        return standardize(img)

    def __getitem__(self, i):
        fname, lab, _ = self.items[i]
        img = self.raster(i)
        if self.augment and lab in self.augment_labels:
            spec = sample_augmentation(self.global_seed, Path(fname).stem, self.epoch, self.ranges)
            img = apply_augmentation(img, spec)
        x = torch.from_numpy(model_input(img, self.stats)).permute(2, 0, 1).contiguous()
        return x, int(lab), i


def _loader(dataset, batch_size, shuffle, seed=0, epoch=0, num_workers=0):
    gen = None
    if shuffle:
        gen = torch.Generator()
        gen.manual_seed(derive_key(seed, "shuffle", epoch) & (2**63 - 1))
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=gen, num_workers=num_workers)


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    validation_loss: float
    validation_accuracy: float


@dataclass
class TrainResult:
    best_checkpoint: dict  # state dict of the best epoch
    history: list
    best_epoch: int
    epochs_run: int
    stopped_early: bool = False
    optimizer_state: dict | None = None


@torch.no_grad()
def evaluate(model: ModelHandle, dataset, batch_size=64, num_workers=0):
    """Mean NLL and accuracy in evaluation mode (no augmentation)."""
    module = model.module
    was_training = module.training
    module.eval()
    total, correct, n = 0.0, 0, 0
    try:
        for x, y, _ in _loader(dataset, batch_size, shuffle=False, num_workers=num_workers):
            lp = module(x)
            total += float(nll_loss(lp, y, "sum"))
            correct += int((lp.argmax(1) == y).sum())
            n += len(y)
    finally:
        module.train(was_training)
    if n == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return total / n, correct / n


def _improved(monitor, value, best):
    if best is None:
        return True
    return value < best if monitor == "val_loss" else value > best


def train(model: ModelHandle, train_data, validation_data, config: TrainConfig, progress=None) -> TrainResult:
    """Fit with mean NLL; early-stop after ``patience`` non-improving epochs; restore the best weights."""
    if len(train_data) == 0:
        raise EmptyDataset("training set is empty")
    if len(validation_data) == 0:
        raise EmptyDataset("validation set is empty")
    module = model.module
    torch.manual_seed(config.global_seed)
    params = model.trainable_parameters()
    if params:
        opt = build_optimizer(config.optimizer, params, config.learning_rate)
    else:
        # fully frozen: epochs still run (losses, BN statistics) but nothing is updated
        logger.warning("no trainable parameters; training runs without updates")
        opt = None

    history = []
    best_value, best_epoch = None, 0
    best_state = copy.deepcopy(module.state_dict())
    stale = 0
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        if hasattr(train_data, "set_epoch"):
            train_data.set_epoch(epoch)
        module.train()
        running, seen = 0.0, 0
        loader = _loader(train_data, config.batch_size, True, config.global_seed, epoch, config.num_workers)
        for x, y, _ in loader:
            if opt is not None:
                opt.zero_grad()
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.mixed_precision):
                lp = module(x)
            loss = nll_loss(lp.float(), y, "mean")
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite training loss at epoch {epoch}")
            if opt is not None:
                loss.backward()
                opt.step()
            running += float(loss.detach()) * len(y)
            seen += len(y)
        if opt is not None:
            opt.advance_schedule()

        val_loss, val_acc = evaluate(model, validation_data, config.batch_size, config.num_workers)
        if not math.isfinite(val_loss):
            raise DivergedTraining(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, running / seen, val_loss, val_acc)
        history.append(rec)
        if progress is not None:
            progress(rec)
        logger.info("epoch %d train %.4f val %.4f acc %.4f", epoch, rec.train_loss, val_loss, val_acc)

        value = val_loss if config.monitor == "val_loss" else val_acc
        if _improved(config.monitor, value, best_value):
            best_value, best_epoch, stale = value, epoch, 0
            best_state = copy.deepcopy(module.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                stopped = True
                break

    module.load_state_dict(best_state)
    module.eval()
    return TrainResult(best_state, history, best_epoch, len(history), stopped,
                       opt.state_dict() if opt is not None else None)


def format_history(history) -> str:
    lines = ["epoch,train_loss,val_loss,val_accuracy"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.validation_loss:.6f},{r.validation_accuracy:.6f}")
    return "\n".join(lines) + "\n"


def write_history(history, path):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(format_history(history))
    except OSError as exc:
        raise IOFailure(f"cannot write history to {path}: {exc}") from exc


@torch.no_grad()
def predict(model: ModelHandle, dataset, output_path=None, batch_size=64, with_labels=True):
    """Per-image class probabilities, sorted by filename, optionally written as CSV."""
    module = model.module
    module.eval()
    out = []
    for x, y, idx in _loader(dataset, batch_size, shuffle=False):
        lp = module(x).double()
        p_pos = torch.exp(lp[:, 1]).tolist()
        for j, i in enumerate(idx.tolist()):
            fname, lab, _ = dataset.items[i]
            out.append(PredictionRecord.from_positive(fname, min(1.0, p_pos[j]), lab if with_labels else None))
    out.sort(key=lambda r: r.filename)
    if output_path is not None:
        write_predictions(out, output_path)
    return out
