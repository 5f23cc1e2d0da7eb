"""Training loop, evaluation, and single-image inference."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .dataio import (Checkpoint, load_checkpoint, load_tensor, read_manifest,
                     save_checkpoint, save_pgm, save_tensor)
from .errors import CompatibilityError, ConfigError, DivergenceError, ShapeError
from .loss import dice_coefficient_value, dice_loss
from .metrics import ConfusionCounts, MetricsRow, confusion_counts, mean_metrics, metrics_from_counts
from .model import Model, ModelConfig, build_model, count_params
from .optim import Rmsprop
from .rng import Rng
from .tensor import Tensor4

CURVES_HEADER = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]
METRICS_HEADER = ["model", "acc", "sen", "spe", "dsc", "iou", "parameters"]


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    seed: int = 0
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    rho: float = 0.9
    opt_eps: float = 1e-8
    loss_eps: float = 1.0
    variant: str = "opto"
    verbose: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.loss_eps <= 0:
            raise ConfigError("lr and loss_eps must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    checkpoint_path: str
    curves_path: str
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


def load_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    """(images, masks) as float32 (m, 1, h, w) arrays for one split."""
    root = Path(data_dir)
    entries = [e for e in read_manifest(root / "manifest.csv") if e.split == split]
    if not entries:
        raise ConfigError(f"no {split!r} entries in {root / 'manifest.csv'}")
    images = np.stack([load_tensor(root / e.image_path).data[0] for e in entries])
    masks = np.stack([load_tensor(root / e.mask_path).data[0] for e in entries])
    return images, masks


def _batches(count: int, batch_size: int, order=None):
    idx = list(range(count)) if order is None else order
    for start in range(0, count, batch_size):
        yield idx[start: start + batch_size]


def _forward_loss(model: Model, images: np.ndarray, masks: np.ndarray,
                  loss_eps: float, with_grad: bool):
    """One forward pass (and optionally the loss tape) over a batch."""
    tape = Tape()
    out, pnodes = model.forward(tape, Tensor4(images))
    y = tape.constant(Tensor4(masks))
    loss_node = dice_loss(out, y, eps=loss_eps)
    loss = loss_node.value.item()
    if not with_grad:
        return loss, out.value.data, None, None, None
    return loss, out.value.data, tape, loss_node, pnodes


def _eval_split(model: Model, images: np.ndarray, masks: np.ndarray,
                batch_size: int, loss_eps: float):
    """Weighted-mean loss and pooled confusion over a split, in infer mode."""
    model.set_mode("infer")
    total = ConfusionCounts(0, 0, 0, 0)
    loss_sum = 0.0
    preds = []
    for idx in _batches(images.shape[0], batch_size):
        xb, yb = images[idx], masks[idx]
        loss, probs, _, _, _ = _forward_loss(model, xb, yb, loss_eps, with_grad=False)
        loss_sum += loss * len(idx)
        total = total + confusion_counts(probs, yb)
        preds.append(probs)
    model.set_mode("train")
    return loss_sum / images.shape[0], total, np.concatenate(preds)


def train(cfg: TrainConfig) -> TrainResult:
    """Shuffled mini-batch dice-loss minimization with RMSprop.

    Per epoch: record train/val loss and pixel accuracy; keep the
    checkpoint of the best validation loss. Fully deterministic for a
    fixed (seed, config, dataset) in single-threaded mode.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_x, train_y = load_split(cfg.data_dir, "train")
    val_x, val_y = load_split(cfg.data_dir, "val")
    n_train = train_x.shape[0]
    batch_size = min(cfg.batch_size, n_train)
    h, w = train_x.shape[2], train_x.shape[3]

    model_cfg = ModelConfig(variant=cfg.variant, image_h=h, image_w=w)
    model = build_model(model_cfg, seed=cfg.seed)
    opt = Rmsprop(model.params, lr=cfg.lr, rho=cfg.rho, eps=cfg.opt_eps)
    shuffle_rng = Rng((cfg.seed + 1) & 0xFFFFFFFFFFFFFFFF)

    ckpt_path = out_dir / "checkpoint.ockp"
    curves_path = out_dir / "curves.csv"
    history: list[EpochStats] = []
    best_val = float("inf")
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        order = list(range(n_train))
        shuffle_rng.shuffle(order)
        loss_sum = 0.0
        train_conf = ConfusionCounts(0, 0, 0, 0)
        for bi, idx in enumerate(_batches(n_train, batch_size, order)):
            xb, yb = train_x[idx], train_y[idx]
            loss, probs, tape, loss_node, pnodes = _forward_loss(
                model, xb, yb, cfg.loss_eps, with_grad=True)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, bi, loss)
            loss_sum += loss * len(idx)
            train_conf = train_conf + confusion_counts(probs, yb)
            grad_map = backward(tape, loss_node, wanted=pnodes.values())
            grads = {name: grad_map.get(node) for name, node in pnodes.items()}
            model.set_params(opt.step(model.params, grads))
        train_loss = loss_sum / n_train
        train_acc = metrics_from_counts(train_conf).acc

        val_loss, val_conf, _ = _eval_split(model, val_x, val_y, batch_size, cfg.loss_eps)
        val_acc = metrics_from_counts(val_conf).acc
        history.append(EpochStats(epoch, train_loss, val_loss, train_acc, val_acc))
        if cfg.verbose:
            print(f"epoch {epoch:3d}  train_loss {train_loss:.5f}  "
                  f"val_loss {val_loss:.5f}  train_acc {train_acc:.4f}  "
                  f"val_acc {val_acc:.4f}", flush=True)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            save_checkpoint(ckpt_path, Checkpoint(
                config=model_cfg, params=model.params, bn_stats=model.bn_stats(),
                opt_state=opt.state_tensors(), epoch=epoch))

    write_curves(curves_path, history)
    return TrainResult(checkpoint_path=str(ckpt_path), curves_path=str(curves_path),
                       history=history, best_epoch=best_epoch)


def write_curves(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVES_HEADER)
        for s in history:
            writer.writerow([s.epoch, f"{s.train_loss:.8f}", f"{s.val_loss:.8f}",
                             f"{s.train_acc:.8f}", f"{s.val_acc:.8f}"])


def read_curves(path) -> list[EpochStats]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CURVES_HEADER:
        raise ConfigError(f"{path}: bad curves header")
    return [EpochStats(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in rows[1:]]


def restore_model(ckpt: Checkpoint) -> Model:
    model = build_model(ckpt.config, init="zeros")
    model.set_params(ckpt.params)
    model.load_bn_stats(ckpt.bn_stats)
    model.set_mode("infer")
    return model


def _format_metric(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.6f}"


def evaluate(checkpoint_path, data_dir, split: str = "test",
             out_csv=None, loss_eps: float = 1.0):
    """Metrics of a checkpoint on one dataset split.

    Returns (pooled_row, per_image_mean_row, parameter_count, dice_value)
    where dice_value is the smoothed two-term coefficient pooled over the
    split. Writes a CSV with one pooled and one per-image-mean row when
    `out_csv` is given.
    """
    ckpt = load_checkpoint(checkpoint_path)
    images, masks = load_split(data_dir, split)
    if images.shape[2] != ckpt.config.image_h or images.shape[3] != ckpt.config.image_w:
        raise CompatibilityError(
            f"checkpoint trained at {ckpt.config.image_h}x{ckpt.config.image_w} "
            f"cannot evaluate {images.shape[2]}x{images.shape[3]} data")
    model = restore_model(ckpt)

    _, pooled_conf, preds = _eval_split(model, images, masks, 16, loss_eps)
    pooled = metrics_from_counts(pooled_conf)
    per_image = [metrics_from_counts(confusion_counts(preds[i], masks[i]))
                 for i in range(images.shape[0])]
    mean_row = mean_metrics(per_image)
    params = count_params(model)
    dice_value = dice_coefficient_value(preds, masks, eps=loss_eps)

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for label, row in ((f"{ckpt.config.variant}-pooled", pooled),
                               (f"{ckpt.config.variant}-per-image-mean", mean_row)):
                writer.writerow([label] + [_format_metric(getattr(row, k))
                                           for k in ("acc", "sen", "spe", "dsc", "iou")]
                                + [params])
    return pooled, mean_row, params, dice_value


def infer(checkpoint_path, image_path, out_prefix, threshold: float = 0.5) -> dict:
    """Run one image through a checkpoint; write probability tensor,
    thresholded binary mask tensor, and an 8-bit PGM preview."""
    ckpt = load_checkpoint(checkpoint_path)
    image = load_tensor(image_path)
    n, c, h, w = image.dims
    if c != ckpt.config.in_channels:
        raise ShapeError(f"image has {c} channels, model expects {ckpt.config.in_channels}")
    step = 1 << ckpt.config.levels
    if h % step or w % step:
        raise ShapeError(f"image extents {h}x{w} must be divisible by {step}")
    model = restore_model(ckpt)

    tape = Tape()
    out, _ = model.forward(tape, image.astype(model.dtype))
    probs = out.value.data
    mask = (probs >= threshold).astype(probs.dtype)

    prefix = str(out_prefix)
    paths = {"prob": prefix + ".prob.ot4", "mask": prefix + ".mask.ot4",
             "pgm": prefix + ".pgm"}
    save_tensor(paths["prob"], Tensor4(probs))
    save_tensor(paths["mask"], Tensor4(mask))
    save_pgm(paths["pgm"], probs[0, 0])
    return paths
