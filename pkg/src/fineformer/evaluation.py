"""FineGym-style metrics: top-1 accuracy and mean class accuracy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(scores, axis=-1)


def _check(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim == 2:
        predictions = argmax_lowest(predictions)
    if len(predictions) == 0:
        raise ValueError("cannot score an empty prediction set")
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    return predictions, labels


def top1_accuracy(predictions, labels) -> float:
    """Fraction of correct predictions. ``predictions`` may be class ids or scores."""
    predictions, labels = _check(predictions, labels)
    return float(np.mean(predictions == labels))


def per_class_accuracy(predictions, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class accuracy (NaN where a class has no examples) and class counts."""
    predictions, labels = _check(predictions, labels)
    counts = np.bincount(labels, minlength=num_classes)
    correct = np.bincount(labels[predictions == labels], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)
    return acc, counts


def mean_class_accuracy(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of per-class accuracies over classes that have examples."""
    acc, counts = per_class_accuracy(predictions, labels, num_classes)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        logger.warning("mean class accuracy excludes %d classes without examples: %s",
                       len(empty), empty.tolist())
    present = acc[counts > 0]
    return math.fsum(present.tolist()) / len(present)


@dataclass
class EvalReport:
    top1: float
    mean_class_acc: float
    per_class: np.ndarray
    counts: np.ndarray
    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, predictions, labels, num_classes: int) -> "EvalReport":
        predictions, labels = _check(predictions, labels)
        acc, counts = per_class_accuracy(predictions, labels, num_classes)
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (labels, predictions), 1)
        return cls(top1_accuracy(predictions, labels),
                   mean_class_accuracy(predictions, labels, num_classes),
                   acc, counts, confusion)

    @property
    def empty_classes(self) -> list[int]:
        return np.flatnonzero(self.counts == 0).tolist()

    def summary(self) -> str:
        return f"top1={format_percent(self.top1)}  mean_class_acc={format_percent(self.mean_class_acc)}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["top1", repr(self.top1)])
            w.writerow(["mean_class_acc", repr(self.mean_class_acc)])
            w.writerow([])
            w.writerow(["class", "count", "accuracy"] + [f"pred_{j}" for j in range(len(self.counts))])
            for c in range(len(self.counts)):
                acc = "" if self.counts[c] == 0 else repr(float(self.per_class[c]))
                w.writerow([c, int(self.counts[c]), acc] + self.confusion[c].tolist())


def format_percent(fraction: float) -> str:
    """``0.9346 -> '93.46'``: the two-decimal percentage used in result tables."""
    return f"{100.0 * fraction:.2f}"


def predict_scores(model, inputs: np.ndarray, kind: str = "features", batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(inputs), batch_size):
        chunks.append(model(inputs[start:start + batch_size], kind).data)
    if not chunks:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(chunks)


def evaluate(model, dataset, batch_size: int = 256) -> EvalReport:
    scores = predict_scores(model, dataset.inputs, dataset.kind, batch_size)
    return EvalReport.from_predictions(argmax_lowest(scores), dataset.labels, model.config.num_classes)


def clip_starts(total_frames: int, clip_frames: int, num_clips: int) -> list[int]:
    """Evenly spaced clip start offsets covering ``[0, total_frames - clip_frames]``."""
    if num_clips < 1:
        raise ValueError("num_clips must be >= 1")
    if total_frames < clip_frames:
        raise ValueError(f"video has {total_frames} frames, a clip needs {clip_frames}")
    if num_clips == 1:
        return [0]
    span = total_frames - clip_frames
    return [int(np.floor(i * span / (num_clips - 1))) for i in range(num_clips)]


def multi_clip_eval(model, video: np.ndarray, num_clips: int = 8) -> np.ndarray:
    """Average of the logits of ``num_clips`` evenly spaced clips of one video."""
    clip = model.config.frames
    starts = clip_starts(video.shape[0], clip, num_clips)
    clips = np.stack([video[s:s + clip] for s in starts])
    logits = model(clips, "video").data
    return logits.mean(axis=0)


def attention_match_scores(attention: np.ndarray, attributes: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per attribute: mean attention from its text token to time steps that
    carry it, divided by the mean attention to time steps that do not.

    ``attention`` is ``(n, N, T')``; ``attributes`` is ``(n, T')``. NaN for
    attributes that never appear (or appear at every step).
    """
    ratios = np.full(vocab_size, np.nan)
    for i in range(vocab_size):
        match = attributes == i
        if not match.any() or match.all():
            continue
        rows = attention[:, i, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios[i] = rows[match].mean() / rows[~match].mean()
    return ratios

