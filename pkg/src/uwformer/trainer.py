"""Mean-teacher semi-supervised training with SPL-gated pseudo labels."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .io import list_images, load_checkpoint, read_ppm, save_checkpoint, to_float
from .metrics import spl
from .model import ModelConfig, build, forward
from .optim import AdamState, adam_step
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_sup", "l_unsup", "gate_rate", "lr")
TEACHER_PREFIX = "teacher."
ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."


class DataError(RuntimeError):
    """Missing, unreadable, or inconsistent training data."""


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 2e-4
    lr_drop_epoch: int = 100
    lr_drop_factor: float = 0.1
    ema_decay: float = 0.999
    unsup_weight: float = 0.1
    seed: int = 0
    spl_gate_margin: float = 0.0
    loss: str = "l1"
    checkpoint_every: int = 10
    crop_size: int | None = None
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, Mapping):
            self.model = ModelConfig.from_dict(dict(self.model))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.ema_decay <= 1.0:
            raise TrainConfigError(f"ema_decay must lie in [0,1], got {self.ema_decay}")
        if self.unsup_weight < 0:
            raise TrainConfigError("unsup_weight must be >= 0")
        if not 0 <= self.lr_drop_epoch < self.epochs:
            raise TrainConfigError("need 0 <= lr_drop_epoch < epochs")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise TrainConfigError("batch_size and checkpoint_every must be >= 1")
        if self.loss not in ("l1", "l2"):
            raise TrainConfigError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.crop_size is not None and (self.crop_size < 16 or self.crop_size % 16):
            raise TrainConfigError("crop_size must be a positive multiple of 16")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    student: "OrderedDict[str, Tensor]"
    teacher: "OrderedDict[str, Tensor]"
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0


@dataclass
class StepLosses:
    total: float
    sup: float
    unsup: float
    accepted: int
    evaluated: int


def init_state(config: TrainConfig) -> TrainState:
    student = build(config.model, config.seed)
    # The teacher accumulates in float64 so that many small EMA increments
    # are not swallowed by float32 rounding.
    teacher = OrderedDict((k, Tensor(p.data.astype(np.float64))) for k, p in student.items())
    return TrainState(
        student=student,
        teacher=teacher,
        adam=AdamState.zeros_like(student),
        rng=np.random.default_rng(config.seed),
    )


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < config.lr_drop_epoch:
        return config.lr
    return config.lr * config.lr_drop_factor


def supervised_loss(pred: Tensor, target: Tensor, kind: str = "l1") -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, target)
    if kind == "l2":
        return T.mean(T.mul(diff, diff))
    return T.mean(T.abs_(diff))


def masked_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, kind: str = "l1") -> Tensor:
    """Mean per-element loss over the samples whose mask entry is 1."""
    diff = T.sub(pred, Tensor(target.astype(pred.dtype)))
    per = T.abs_(diff) if kind == "l1" else T.mul(diff, diff)
    weights = Tensor(mask.astype(pred.dtype).reshape(-1, 1, 1, 1))
    per_sample = pred.numel() // pred.shape[0]
    return T.scale(T.sum_(T.mul(per, weights)), 1.0 / (mask.sum() * per_sample))


def ema_update(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor], alpha: float) -> None:
    """In place: ``teacher <- alpha * teacher + (1 - alpha) * student``."""
    if list(teacher) != list(student):
        raise ShapeError("ema_update: teacher and student schemas differ")
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.shape:
            raise ShapeError(f"ema_update: {name} has shapes {t.shape} vs {s.shape}")
        mixed = alpha * t.data.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)
        t.data = mixed.astype(t.dtype)


def spl_gate(teacher_out: np.ndarray, inputs: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """1 where the teacher's output scores at least ``margin`` above its input."""
    teacher_out = np.clip(getattr(teacher_out, "data", teacher_out), 0.0, 1.0)
    inputs = np.clip(getattr(inputs, "data", inputs), 0.0, 1.0)
    mask = np.zeros(len(inputs), dtype=np.int64)
    if math.isinf(margin) and margin > 0:
        return mask
    for i, (out, inp) in enumerate(zip(teacher_out, inputs)):
        mask[i] = spl(out) >= spl(inp) + margin
    return mask


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} became {value}")


def _zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def supervised_step(state: TrainState, inputs: np.ndarray, targets: np.ndarray,
                    config: TrainConfig, lr: float | None = None) -> StepLosses:
    """Labeled-only update; the teacher still tracks the student by EMA."""
    T.get_tape().reset()
    _zero_grads(state.student)
    pred = forward(Tensor(inputs), state.student, config.model)
    loss = supervised_loss(pred, Tensor(targets), config.loss)
    value = loss.item()
    _check_finite(value, "supervised loss")
    T.backward(loss)
    _apply_update(state, config, lr)
    return StepLosses(value, value, 0.0, 0, 0)


def train_step(state: TrainState, labeled: tuple[np.ndarray, np.ndarray],
               unlabeled: np.ndarray | None, config: TrainConfig,
               lr: float | None = None) -> StepLosses:
    """One mean-teacher update on a labeled batch and an optional unlabeled batch."""
    x_l, y_l = labeled
    T.get_tape().reset()
    _zero_grads(state.student)
    pred = forward(Tensor(x_l), state.student, config.model)
    l_sup = supervised_loss(pred, Tensor(y_l), config.loss)
    total = l_sup
    l_unsup_value = 0.0
    accepted = evaluated = 0

    if unlabeled is not None and len(unlabeled):
        x_u = np.asarray(unlabeled, dtype=np.float32)
        with T.no_grad():
            pseudo = np.clip(forward(Tensor(x_u), state.teacher, config.model).data, 0.0, 1.0)
        mask = spl_gate(pseudo, x_u, config.spl_gate_margin)
        accepted, evaluated = int(mask.sum()), len(mask)
        if accepted and config.unsup_weight > 0:
            pred_u = forward(Tensor(x_u), state.student, config.model)
            l_unsup = masked_loss(pred_u, pseudo, mask, config.loss)
            l_unsup_value = l_unsup.item()
            total = T.add(l_sup, T.scale(l_unsup, config.unsup_weight))

    value = total.item()
    _check_finite(value, "training loss")
    T.backward(total)
    _apply_update(state, config, lr)
    return StepLosses(value, l_sup.item(), l_unsup_value, accepted, evaluated)


def _apply_update(state: TrainState, config: TrainConfig, lr: float | None) -> None:
    if lr is None:
        lr = lr_schedule(state.epoch, config)
    grads = {k: p.grad for k, p in state.student.items()}
    adam_step(state.student, grads, state.adam, lr)
    ema_update(state.teacher, state.student, config.ema_decay)
    state.step += 1


# ----------------------------------------------------------------------------
# data


def load_labeled(directory) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
    root = Path(directory)
    inp_dir, tgt_dir = root / "input", root / "target"
    if not inp_dir.is_dir() or not tgt_dir.is_dir():
        raise DataError(f"{root}: expected input/ and target/ subdirectories")
    names, xs, ys = [], [], []
    for path in list_images(inp_dir):
        target = tgt_dir / path.name
        if not target.exists():
            raise DataError(f"missing target for {path}: {target}")
        x, y = to_float(read_ppm(path)), to_float(read_ppm(target))
        if x.shape != y.shape:
            raise DataError(f"{path}: input {x.shape} and target {y.shape} differ in size")
        names.append(path.name)
        xs.append(x)
        ys.append(y)
    if not xs:
        raise DataError(f"{inp_dir}: no images found")
    return names, xs, ys


def load_unlabeled(directory) -> list[np.ndarray]:
    if directory is None:
        return []
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    return [to_float(read_ppm(p)) for p in list_images(root)]


def augment(rng: np.random.Generator, *images: np.ndarray) -> list[np.ndarray]:
    """Apply one random flip/rotation jointly to every ``[3,H,W]`` image."""
    h, w = images[0].shape[1:]
    k = int(rng.integers(4)) if h == w else 2 * int(rng.integers(2))
    flip_h, flip_v = rng.integers(2, size=2)
    out = []
    for im in images:
        im = np.rot90(im, k, axes=(1, 2))
        if flip_h:
            im = im[:, :, ::-1]
        if flip_v:
            im = im[:, ::-1, :]
        out.append(np.ascontiguousarray(im))
    return out


def random_crop(rng: np.random.Generator, size: int | None, *images: np.ndarray) -> list[np.ndarray]:
    if size is None:
        return list(images)
    h, w = images[0].shape[1:]
    if h < size or w < size:
        raise DataError(f"image {h}x{w} smaller than crop_size {size}")
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return [im[:, top:top + size, left:left + size] for im in images]


def _check_sizes(images: Sequence[np.ndarray], config: TrainConfig, what: str) -> None:
    if config.crop_size is not None:
        return
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{what} images differ in size {sorted(shapes)}; set crop_size")
    for shape in shapes:
        if shape[1] % 16 or shape[2] % 16:
            raise DataError(f"{what} images are {shape[1]}x{shape[2]}; need multiples of 16 or crop_size")


# ----------------------------------------------------------------------------
# checkpoint <-> state


def state_tensors(state: TrainState) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for k, p in state.student.items():
        out[k] = p.data
    for k, p in state.teacher.items():
        out[TEACHER_PREFIX + k] = p.data
    for k in state.student:
        out[ADAM_M_PREFIX + k] = state.adam.m[k]
        out[ADAM_V_PREFIX + k] = state.adam.v[k]
    return out


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    scalars = {
        "step": state.step,
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "model_config": config.model.to_dict(),
        "train_config": config.to_dict(),
    }
    save_checkpoint(path, state_tensors(state), scalars)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    tensors, scalars = load_checkpoint(path)
    config = TrainConfig.from_dict(scalars["train_config"])
    student, teacher = OrderedDict(), OrderedDict()
    adam = AdamState(step=int(scalars.get("adam_step", 0)))
    for name, arr in tensors.items():
        if name.startswith(TEACHER_PREFIX):
            teacher[name[len(TEACHER_PREFIX):]] = Tensor(arr.astype(np.float64))
        elif name.startswith(ADAM_M_PREFIX):
            adam.m[name[len(ADAM_M_PREFIX):]] = arr
        elif name.startswith(ADAM_V_PREFIX):
            adam.v[name[len(ADAM_V_PREFIX):]] = arr
        else:
            student[name] = Tensor(arr, requires_grad=True)
    rng = np.random.default_rng()
    rng.bit_generator.state = scalars["rng_state"]
    state = TrainState(student, teacher, adam, rng, int(scalars["step"]), int(scalars["epoch"]))
    return state, config


def load_model(path) -> tuple["OrderedDict[str, Tensor]", ModelConfig]:
    """Student parameters and model config from any UWF1 checkpoint."""
    tensors, scalars = load_checkpoint(path)
    config = ModelConfig.from_dict(scalars["model_config"])
    reserved = (TEACHER_PREFIX, ADAM_M_PREFIX, ADAM_V_PREFIX)
    params = OrderedDict(
        (k, Tensor(v)) for k, v in tensors.items() if not k.startswith(reserved)
    )
    return params, config


def save_model(path, params: Mapping[str, Tensor], config: ModelConfig) -> None:
    save_checkpoint(path, params, {"step": 0, "epoch": 0, "model_config": config.to_dict()})


# ----------------------------------------------------------------------------
# loop


def _format(v: float) -> str:
    return repr(float(v))


def train_loop(labeled_dir, unlabeled_dir, config: TrainConfig, checkpoint_out,
               log_path=None) -> tuple[TrainState, list[dict]]:
    """Run ``config.epochs`` epochs and return the final state and the epoch log."""
    _, xs, ys = load_labeled(labeled_dir)
    us = load_unlabeled(unlabeled_dir)
    _check_sizes(xs, config, "labeled")
    if us:
        _check_sizes(us, config, "unlabeled")

    state = init_state(config)
    log_path = Path(log_path) if log_path is not None else Path(str(checkpoint_out) + ".log.csv")
    if not log_path.exists():
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
    rows = []
    bs = config.batch_size
    u_order: list[int] = []

    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, config)
        order = state.rng.permutation(len(xs))
        sums = {"sup": 0.0, "unsup": 0.0, "acc": 0, "eval": 0, "steps": 0}
        for start in range(0, len(order), bs):
            batch_x, batch_y = [], []
            for idx in order[start:start + bs]:
                x, y = random_crop(state.rng, config.crop_size, xs[idx], ys[idx])
                if config.augment:
                    x, y = augment(state.rng, x, y)
                batch_x.append(x)
                batch_y.append(y)
            batch_u = None
            if us:
                batch_u = []
                for _ in range(len(batch_x)):
                    if not u_order:
                        u_order = list(state.rng.permutation(len(us)))
                    (u,) = random_crop(state.rng, config.crop_size, us[u_order.pop()])
                    if config.augment:
                        (u,) = augment(state.rng, u)
                    batch_u.append(u)
                batch_u = np.stack(batch_u)
            losses = train_step(state, (np.stack(batch_x), np.stack(batch_y)), batch_u, config, lr)
            sums["sup"] += losses.sup
            sums["unsup"] += losses.unsup
            sums["acc"] += losses.accepted
            sums["eval"] += losses.evaluated
            sums["steps"] += 1
        n = sums["steps"]
        row = {
            "epoch": epoch,
            "l_sup": sums["sup"] / n,
            "l_unsup": sums["unsup"] / n,
            "gate_rate": sums["acc"] / sums["eval"] if sums["eval"] else 0.0,
            "lr": lr,
        }
        rows.append(row)
        with open(log_path, "a", newline="") as f:
            csv.writer(f).writerow(
                [epoch] + [_format(row[c]) for c in LOG_COLUMNS[1:]]
            )
        logger.info("epoch %d l_sup=%.5f l_unsup=%.5f gate=%.2f", epoch, row["l_sup"],
                    row["l_unsup"], row["gate_rate"])
        state.epoch = epoch + 1
        if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
            save_state(checkpoint_out, state, config)
    return state, rows
