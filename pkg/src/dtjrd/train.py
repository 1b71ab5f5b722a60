"""Training loop: freeze strategies, cosine schedule, momentum SGD.

Three strategies control which parameters move: LP trains only the head,
DAFT freezes the embedding modules (patch projection, class token, position
table) and the final layer norm while training every encoder block plus the
head, and FF trains everything.  The model with the best validation E_A is
returned.
"""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .data import ArrayDataset
from .errors import ConfigError, ContractError, NumericError
from .labels import DEFAULT_SIGMA, make_labels, soft_cross_entropy
from .metrics import mae_ea
from .model import DTJRDModel, predict_jrd
from .tensor import Tensor

STRATEGIES = ("LP", "FF", "DAFT")

LABEL_KINDS = ("one_hot", "smooth", "gdsl")

_FROZEN_DAFT_PREFIXES = ("patch_embed.", "final_ln.")
_FROZEN_DAFT_NAMES = ("class_token", "pos_embed")
_TRAINED_DAFT_PREFIXES = ("blocks.", "head.")


@dataclass
class TrainConfig:
    strategy: str = "DAFT"
    label_kind: str = "gdsl"
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    eps: float = 0.9

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.label_kind not in LABEL_KINDS:
            raise ConfigError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def freeze_mask(model: DTJRDModel, strategy: str) -> dict[str, bool]:
    """Parameter name -> trainable flag for the given strategy.

    Every parameter must belong to a known family; an unrecognized name is
    a configuration error rather than a silently-frozen weight.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    mask: dict[str, bool] = {}
    for name in model.named_parameters():
        frozen_family = name.startswith(_FROZEN_DAFT_PREFIXES) or name in _FROZEN_DAFT_NAMES
        trained_family = name.startswith(_TRAINED_DAFT_PREFIXES)
        if not (frozen_family or trained_family):
            raise ConfigError(f"parameter {name!r} belongs to no known family")
        if strategy == "FF":
            mask[name] = True
        elif strategy == "LP":
            mask[name] = name.startswith("head.")
        else:
            mask[name] = trained_family
    return mask


def apply_freeze(model: DTJRDModel, mask: dict[str, bool]) -> None:
    for p in model.parameters():
        p.trainable = mask[p.name]
        p.tensor.requires_grad = mask[p.name]


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)); lr(0)=lr0, lr(total)=0."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} out of [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(
    params,
    mask: dict[str, bool],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocities: dict[str, np.ndarray],
) -> None:
    """v <- momentum*v + g + wd*p; p <- p - lr*v, on trainable parameters only."""
    for p in params:
        if not mask.get(p.name, False):
            continue
        grad = p.tensor.grad
        if grad is None:
            raise ContractError(f"trainable parameter {p.name!r} has no gradient")
        v = velocities.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + grad + weight_decay * p.data
        velocities[p.name] = v
        p.data = p.data - lr * v


@contextmanager
def inference_mode(model: DTJRDModel):
    """Temporarily disable gradient tracking on all parameters."""
    saved = [(p, p.tensor.requires_grad) for p in model.parameters()]
    for p, _ in saved:
        p.tensor.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.tensor.requires_grad = flag


def predict_dataset(model: DTJRDModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched argmax predictions without building the autodiff tape."""
    preds = []
    with inference_mode(model):
        for start in range(0, images.shape[0], batch_size):
            logits = model.forward(Tensor(images[start:start + batch_size]))
            preds.append(predict_jrd(logits.data))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_ea(model: DTJRDModel, dataset: ArrayDataset, batch_size: int = 64) -> float:
    preds = predict_dataset(model, dataset.images, batch_size)
    return mae_ea(preds, dataset.jrd, dataset.image_ids)


def _snapshot(model: DTJRDModel) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def _restore(model: DTJRDModel, snapshot: dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        p.data = snapshot[p.name].copy()


def fit(
    model: DTJRDModel,
    train_set: ArrayDataset,
    val_set: ArrayDataset | None,
    config: TrainConfig,
) -> tuple[DTJRDModel, list[dict]]:
    """Train in place and return (model at best validation E_A, epoch log).

    Each epoch shuffles the training set with a seeded generator, flips each
    crop horizontally with probability 0.5 (labels unchanged), and steps
    momentum SGD under a per-step cosine schedule.  A non-finite loss aborts
    with the step, learning rate, and offending batch ids in the message.
    """
    if len(train_set) == 0:
        raise ContractError("fit needs a non-empty training set")
    mask = freeze_mask(model, config.strategy)
    apply_freeze(model, mask)

    targets = make_labels(
        train_set.jrd, kind=config.label_kind, sigma=config.sigma,
        eps=config.eps, n=model.config.num_classes,
    )
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    velocities: dict[str, np.ndarray] = {}
    log: list[dict] = []
    best_ea = math.inf
    best_params: dict[str, np.ndarray] | None = None

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        lr = config.lr0
        for start in range(0, len(train_set), config.batch_size):
            batch = order[start:start + config.batch_size]
            images = train_set.images[batch]
            flips = rng.random(len(batch)) < 0.5
            if np.any(flips):
                images = images.copy()
                images[flips] = images[flips][:, :, :, ::-1]
            lr = cosine_lr(step, total_steps, config.lr0)
            try:
                loss = soft_cross_entropy(model.forward(Tensor(images)), targets[batch])
                loss.backward()
            except NumericError as exc:
                ids = [train_set.object_ids[i] for i in batch]
                raise NumericError(
                    f"non-finite loss at step {step} (lr {lr:.6g}, batch {ids}): {exc}"
                ) from exc
            sgd_momentum_step(
                model.parameters(), mask, lr,
                config.momentum, config.weight_decay, velocities,
            )
            for p in model.parameters():
                p.tensor.zero_grad()
            epoch_loss += float(loss.data) * len(batch)
            step += 1
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / len(train_set),
            "val_EA": math.nan,
            "lr": lr,
        }
        if val_set is not None and len(val_set) > 0:
            entry["val_EA"] = evaluate_ea(model, val_set)
            if entry["val_EA"] < best_ea:
                best_ea = entry["val_EA"]
                best_params = _snapshot(model)
        log.append(entry)

    if best_params is not None:
        _restore(model, best_params)
    return model, log


def save_epoch_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_EA", "lr"])
        for entry in log:
            writer.writerow(
                [entry["epoch"], repr(entry["train_loss"]),
                 repr(entry["val_EA"]), repr(entry["lr"])]
            )
