"""Loss, optimizers, schedules, gradient clipping, training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .architectures import ActionModel, ModelConfig, build_model
from .evaluation import evaluate
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FFCK1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "lr", "train_loss", "top1", "mean_class_acc")
OPTIMIZERS = ("sgd_momentum", "adamw")
SCHEDULES = ("fixed_step", "cosine_warmup")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 40.0
    epochs: int = 30
    schedule: str = "fixed_step"
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    warmup_fraction: float = 0.1
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float64"
    eval_batch_size: int = 256
    save_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr must be > 0, batch_size >= 1 and epochs >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 or m >= max(self.epochs, 1) for m in ms):
            raise ValueError(f"milestones {ms} must be strictly increasing and inside (0, epochs)")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def warmup_epochs(self) -> float:
        return self.warmup_fraction * self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    # Published protocols, kept as presets.
    @classmethod
    def backbone_gym99(cls) -> "TrainConfig":
        return cls("sgd_momentum", lr=0.01, momentum=0.9, weight_decay=1e-4, clip_norm=40.0,
                   epochs=120, schedule="fixed_step", milestones=(90, 110))

    @classmethod
    def backbone_gym288(cls) -> "TrainConfig":
        return cls("sgd_momentum", lr=0.05, momentum=0.9, weight_decay=1e-4, clip_norm=40.0,
                   epochs=160, schedule="fixed_step", milestones=(90, 140))

    @classmethod
    def vision_encoder(cls) -> "TrainConfig":
        return cls("sgd_momentum", lr=3.75e-3, momentum=0.9, weight_decay=1e-4, clip_norm=40.0,
                   epochs=60, schedule="fixed_step")

    @classmethod
    def cross_encoder(cls) -> "TrainConfig":
        return cls("adamw", lr=3e-4, weight_decay=0.05, clip_norm=40.0, epochs=30,
                   schedule="cosine_warmup")


# -- loss -----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (log-sum-exp form)."""
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, c = z.shape
    if labels.shape != (b,):
        raise ValueError(f"{b} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(b)
    loss = -log_probs[rows, labels].mean()

    def adjoint(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        d *= g / b
        return (d[0] if single else d,)

    return T._record(np.asarray(loss, dtype=z.dtype), (logits,), adjoint)


# -- optimizers -----------------------------------------------------------

def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> Sequence[np.ndarray]:
    """In place: ``v = momentum*v + (g + wd*w)``; ``w -= lr*v``."""
    for w, g, v in zip(params, grads, velocity, strict=True):
        if w.shape != g.shape or w.shape != v.shape:
            raise T.ShapeError(f"sgd step: parameter {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v
    return params


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               first: Sequence[np.ndarray], second: Sequence[np.ndarray], step: int,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.05) -> Sequence[np.ndarray]:
    """In place AdamW update; ``step`` is the 1-based count including this one.

    Weight decay is decoupled: ``w -= lr*wd*w`` is applied on its own, before
    the bias-corrected adaptive step.
    """
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for w, g, m, v in zip(params, grads, first, second, strict=True):
        if w.shape != g.shape or w.shape != m.shape or w.shape != v.shape:
            raise T.ShapeError(f"adamw step: parameter {w.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            w -= lr * weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Optimizer:
    """Holds per-parameter state keyed by parameter name."""

    slots: tuple[str, ...] = ()

    def __init__(self, named_params: Sequence[tuple[str, Tensor]]):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        if any(not p.requires_grad for p in self.params):
            raise ValueError("frozen parameters cannot be optimized")
        self.state = {s: [np.zeros_like(p.data) for p in self.params] for s in self.slots}
        self.step_count = 0

    def _grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"{slot}/{name}": arr for slot, arrs in self.state.items()
                for name, arr in zip(self.names, arrs)}

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for slot, arrs in self.state.items():
            for name, arr in zip(self.names, arrs):
                arr[...] = tensors[f"{slot}/{name}"]
        self.step_count = step_count


class SGDMomentum(Optimizer):
    slots = ("velocity",)

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4):
        super().__init__(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        self.step_count += 1
        sgd_momentum_step([p.data for p in self.params], self._grads(), self.state["velocity"],
                          lr, self.momentum, self.weight_decay)


class AdamW(Optimizer):
    slots = ("first", "second")

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        super().__init__(named_params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        self.step_count += 1
        adamw_step([p.data for p in self.params], self._grads(), self.state["first"],
                   self.state["second"], self.step_count, lr, self.betas, self.eps, self.weight_decay)


def make_optimizer(cfg: TrainConfig, named_params) -> Optimizer:
    if cfg.optimizer == "sgd_momentum":
        return SGDMomentum(named_params, cfg.momentum, cfg.weight_decay)
    return AdamW(named_params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


def clip_gradients(named_params: Sequence[tuple[str, Tensor]], max_norm: float = 40.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = 0.0
    for name, p in named_params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- schedules ------------------------------------------------------------

def lr_schedule(kind: str, epoch: float, cfg: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch position.

    ``fixed_step`` multiplies by ``decay_factor`` once per milestone reached.
    ``cosine_warmup`` ramps linearly from 0 over the warm-up epochs, then
    follows half a cosine down to 0 at ``epoch == cfg.epochs``.
    """
    base = cfg.lr
    if kind == "fixed_step":
        passed = sum(1 for m in cfg.milestones if epoch >= m)
        return base * cfg.decay_factor ** passed
    if kind == "cosine_warmup":
        warm = cfg.warmup_epochs
        if epoch < warm:
            return base * epoch / warm
        span = cfg.epochs - warm
        progress = min(max((epoch - warm) / span, 0.0), 1.0) if span > 0 else 1.0
        return base * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"unknown schedule {kind!r}")


# -- checkpoints ----------------------------------------------------------
#
#   magic "FFCK1"
#   u32 version
#   u32 header length, then UTF-8 JSON header (sorted keys)
#   u32 tensor count, then per tensor:
#       u32 name length, name bytes (UTF-8), u32 rank, u32[rank] extents,
#       f64[prod(extents)] data
#   all little-endian. Tensor names are "model/<param>" or "optim/<slot>/<param>".

@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        blob = json.dumps(self.header, sort_keys=True).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
                 struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr)
            parts.append(struct.pack("<I", len(encoded)) + encoded)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:5] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an FFCK1 checkpoint")
        version, hlen = struct.unpack_from("<II", raw, 5)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 13
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape))
            tensors[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape).copy()
            pos += 8 * size
        if pos != len(raw):
            raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
        return cls(header, tensors)

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k[len("optim/"):]: v for k, v in self.tensors.items() if k.startswith("optim/")}

    @property
    def epoch(self) -> int:
        return int(self.header["epoch"])

    def build_model(self) -> ActionModel:
        """Reconstruct the model (in the training dtype) with the saved weights."""
        cfg = ModelConfig.from_dict(self.header["model_config"])
        dtype = self.header.get("train_config", {}).get("dtype", "float64")
        with T.default_dtype(dtype):
            model = build_model(self.header["arch"], cfg, self.header["model_seed"])
        model.load_state_dict(self.model_state())
        return model


def make_checkpoint(model: ActionModel, optimizer: Optimizer, cfg: TrainConfig, epoch: int,
                    rng: np.random.Generator, history: list, model_seed: int) -> Checkpoint:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "model_config": model.config.to_dict(),
        "model_seed": model_seed,
        "train_config": cfg.to_dict(),
        "epoch": epoch,
        "optimizer": {"kind": cfg.optimizer, "step_count": optimizer.step_count},
        "rng_state": rng.bit_generator.state,
        "history": [asdict(r) for r in history],
    }
    tensors = {f"model/{n}": a for n, a in model.state_dict().items()}
    tensors.update({f"optim/{n}": a for n, a in optimizer.state_tensors().items()})
    return Checkpoint(header, tensors)


# -- training loop --------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    top1: float
    mean_class_acc: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def write_metrics_csv(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.top1), repr(r.mean_class_acc)])


def read_metrics_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                        float(r["top1"]), float(r["mean_class_acc"])) for r in rows]


def train(model: ActionModel, train_set, cfg: TrainConfig, test_set=None, out_dir=None,
          resume: Checkpoint | None = None, model_seed: int = 0) -> TrainResult:
    """Mini-batch training of every non-frozen parameter of ``model``.

    Each iteration: forward, cross-entropy, backward, global-norm clip,
    optimizer step at the schedule's rate for the current fractional epoch.
    After every epoch the test split (if any) is scored and a history row is
    appended. With ``out_dir``, ``metrics.csv``, ``final.ffck``, ``best.ffck``
    and (every ``save_every`` epochs) ``epoch_XXXX.ffck`` are written there.
    """
    named = list(model.named_parameters())
    frozen_ids = {id(p) for _, p in model.frozen_parameters()}
    assert not any(id(p) in frozen_ids for _, p in named)
    optimizer = make_optimizer(cfg, named)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state())
        optimizer.load_state_tensors(resume.optimizer_state(), resume.header["optimizer"]["step_count"])
        rng.bit_generator.state = resume.header["rng_state"]
        history = [EpochRecord(**r) for r in resume.header["history"]]
        start = resume.epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(history)
    best_top1 = max((r.top1 for r in history if not math.isnan(r.top1)), default=-1.0)

    n = len(train_set)
    steps = max(1, math.ceil(n / cfg.batch_size))
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(steps):
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            lr = lr_schedule(cfg.schedule, epoch + i / steps, cfg)
            model.zero_grad()
            loss = cross_entropy(model(train_set.inputs[idx], train_set.kind), train_set.labels[idx])
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch + 1}, batch {i}")
            loss.backward()
            if cfg.clip_norm > 0:
                clip_gradients(named, cfg.clip_norm)
            optimizer.step(lr)
            total += loss.item() * len(idx)

        if test_set is not None and len(test_set):
            report = evaluate(model, test_set, cfg.eval_batch_size)
            top1, mca = report.top1, report.mean_class_acc
        else:
            top1 = mca = float("nan")
        record = EpochRecord(epoch + 1, lr_schedule(cfg.schedule, epoch, cfg), total / max(n, 1), top1, mca)
        history.append(record)
        logger.info("epoch %d  lr %.3g  loss %.4f  top1 %.4f  mca %.4f", *asdict(record).values())

        if out is not None:
            ckpt = make_checkpoint(model, optimizer, cfg, epoch + 1, rng, history, model_seed)
            write_metrics_csv(out / "metrics.csv", history)
            if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
                ckpt.save(out / f"epoch_{epoch + 1:04d}.ffck")
            if not math.isnan(top1) and top1 > best_top1:
                best_top1 = top1
                ckpt.save(out / "best.ffck")
                result.best_checkpoint = out / "best.ffck"

    if out is not None:
        if not history:
            write_metrics_csv(out / "metrics.csv", history)
        make_checkpoint(model, optimizer, cfg, cfg.epochs if history else start, rng, history,
                        model_seed).save(out / "final.ffck")
        result.final_checkpoint = out / "final.ffck"
    return result
