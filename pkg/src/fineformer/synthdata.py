"""Synthetic fine-grained action benchmark.

Each class is a fixed sequence of ``tokens`` attribute ids. A configurable
fraction of classes come in *order-twin* pairs that use the same multiset of
attributes in a different order, so any classifier that ignores temporal
order is capped at :func:`bag_of_features_bayes_bound`.

A feature-level example is a ``(channels, tokens)`` matrix whose column
``t`` is the prototype of attribute ``seq[t]`` plus Gaussian noise. The
video route renders the same sequence as a raw ``(frames, H, W, 3)`` clip
whose frames take the colour of the current attribute, for exercising the
frozen backbone end to end.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAX_RESAMPLE_ATTEMPTS = 1000
MAX_COSINE = 0.3
DATASET_MAGIC = b"FFDS1"


@dataclass(frozen=True)
class SyntheticSpec:
    num_attributes: int = 12
    num_classes: int = 16
    tokens: int = 8
    channels: int = 64
    noise_sigma: float = 0.1
    ordered_pair_fraction: float = 0.5
    train_per_class: int = 100
    test_per_class: int = 50
    seed: int = 0
    long_tail_exponent: float = 0.0
    kind: str = "features"
    frames: int = 16
    frame_h: int = 8
    frame_w: int = 8

    def __post_init__(self):
        if self.num_attributes < 2 or self.num_classes < 1 or self.tokens < 2 or self.channels < 1:
            raise ValueError("need >= 2 attributes, >= 1 class, >= 2 tokens and >= 1 channel")
        if not 0.0 <= self.ordered_pair_fraction <= 1.0:
            raise ValueError("ordered_pair_fraction must lie in [0, 1]")
        if self.ordered_pair_fraction > 0 and self.num_classes % 2:
            raise ValueError("num_classes must be even when ordered_pair_fraction > 0")
        if self.noise_sigma < 0 or self.long_tail_exponent < 0:
            raise ValueError("noise_sigma and long_tail_exponent must be non-negative")
        if self.kind not in ("features", "video"):
            raise ValueError(f"kind must be 'features' or 'video', got {self.kind!r}")
        if self.kind == "video" and self.frames % self.tokens:
            raise ValueError("frames must be a multiple of tokens for the video route")

    @property
    def num_pairs(self) -> int:
        return int(round(self.ordered_pair_fraction * self.num_classes / 2))

    def class_counts(self, per_class: int, minimum: int = 0) -> np.ndarray:
        """Examples per class; Zipf-skewed by rank when ``long_tail_exponent > 0``."""
        ranks = np.arange(1, self.num_classes + 1, dtype=float)
        raw = per_class * ranks ** (-self.long_tail_exponent)
        return np.maximum(np.round(raw).astype(int), minimum)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Example:
    inputs: np.ndarray
    label: int
    attributes: np.ndarray


def generate_prototypes(n: int, channels: int, seed: int) -> np.ndarray:
    """``(n, channels)`` unit rows with pairwise ``|cosine| < 0.3``.

    Offending rows are redrawn one at a time; raises ``RuntimeError`` when
    the bound still fails after ``MAX_RESAMPLE_ATTEMPTS`` redraws.
    """
    if channels < n:
        logger.warning("channels=%d < attributes=%d: near-orthogonal prototypes may not exist", channels, n)
    rng = np.random.default_rng([seed, 0x9E07])

    def unit(k):
        v = rng.standard_normal((k, channels))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    protos = unit(n)
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        cos = np.abs(protos @ protos.T)
        np.fill_diagonal(cos, 0.0)
        if cos.max() < MAX_COSINE:
            return protos
        worst = int(np.argmax(cos.max(axis=1)))
        protos[worst] = unit(1)[0]
    raise RuntimeError(f"could not draw {n} prototypes in {channels} dims with |cosine| < {MAX_COSINE}")


def generate_colors(n: int, seed: int) -> np.ndarray:
    """``(n, 3)`` attribute colours for the video route, spread over the RGB cube."""
    rng = np.random.default_rng([seed, 0xC0105])
    best, best_gap = None, -1.0
    for _ in range(200):
        c = rng.uniform(-1.0, 1.0, size=(n, 3))
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() > best_gap:
            best, best_gap = c, d.min()
    return best


def define_classes(spec: SyntheticSpec) -> np.ndarray:
    """``(num_classes, tokens)`` attribute sequences.

    The first ``2 * num_pairs`` rows form order-twin pairs ``(2k, 2k+1)``:
    same multiset, different order. The remaining rows each use a multiset
    no other class uses.
    """
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    n_pairs = spec.num_pairs
    n_multisets = n_pairs + spec.num_classes - 2 * n_pairs
    multisets: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(multisets) < n_multisets:
        attempts += 1
        if attempts > 100 * n_multisets + MAX_RESAMPLE_ATTEMPTS:
            raise ValueError(f"infeasible spec: cannot find {n_multisets} distinct attribute multisets "
                             f"of length {spec.tokens} over {spec.num_attributes} attributes")
        seq = tuple(sorted(rng.integers(0, spec.num_attributes, spec.tokens).tolist()))
        needs_order = len(multisets) < n_pairs
        if seq in seen or (needs_order and len(set(seq)) < 2):
            continue
        seen.add(seq)
        multisets.append(seq)

    table = np.empty((spec.num_classes, spec.tokens), dtype=np.int64)
    for k in range(n_pairs):
        first = rng.permutation(multisets[k])
        second = rng.permutation(multisets[k])
        while np.array_equal(first, second):
            second = rng.permutation(multisets[k])
        table[2 * k], table[2 * k + 1] = first, second
    for j, ms in enumerate(multisets[n_pairs:]):
        table[2 * n_pairs + j] = rng.permutation(ms)
    return table


def bag_of_features_bayes_bound(spec: SyntheticSpec) -> float:
    """Best noise-free accuracy of any order-blind classifier on balanced classes."""
    ambiguous = 2 * spec.num_pairs / spec.num_classes
    return (1.0 - ambiguous) + ambiguous / 2.0


class Benchmark:
    """Prototypes, colours and class table derived from one spec."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.prototypes = generate_prototypes(spec.num_attributes, spec.channels, spec.seed)
        self.colors = generate_colors(spec.num_attributes, spec.seed)
        self.classes = define_classes(spec)

    def sample(self, label: int, rng: np.random.Generator) -> Example:
        return sample_example(label, self, rng)


def sample_example(label: int, bench: Benchmark, rng: np.random.Generator) -> Example:
    """One noisy draw of class ``label``; inputs are rounded to float32."""
    spec = bench.spec
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} outside [0, {spec.num_classes})")
    seq = bench.classes[label]
    if spec.kind == "features":
        clean = bench.prototypes[seq].T
    else:
        per_step = np.repeat(bench.colors[seq], spec.frames // spec.tokens, axis=0)
        clean = np.broadcast_to(per_step[:, None, None, :],
                                (spec.frames, spec.frame_h, spec.frame_w, 3))
    noisy = clean + rng.normal(0.0, spec.noise_sigma, clean.shape) if spec.noise_sigma else clean
    return Example(np.asarray(noisy, dtype=np.float32), int(label), seq.copy())


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    kind: str = "features"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.attributes[index], self.kind)


def _worker_count() -> int:
    return max(1, int(os.environ.get("FINEFORMER_THREADS", "1")))


def _draw_split(bench: Benchmark, counts: np.ndarray, split: int) -> Dataset:
    labels = np.repeat(np.arange(len(counts)), counts)
    seed = bench.spec.seed

    def draw(i):
        return sample_example(int(labels[i]), bench, np.random.default_rng([seed, split, i]))

    with ThreadPoolExecutor(_worker_count()) as pool:
        examples = list(pool.map(draw, range(len(labels))))
    shape = (0, bench.spec.channels, bench.spec.tokens) if bench.spec.kind == "features" else \
        (0, bench.spec.frames, bench.spec.frame_h, bench.spec.frame_w, 3)
    inputs = np.stack([e.inputs for e in examples]) if examples else np.zeros(shape, np.float32)
    attrs = np.stack([e.attributes for e in examples]) if examples else \
        np.zeros((0, bench.spec.tokens), np.int64)
    return Dataset(inputs, labels.astype(np.int64), attrs, bench.spec.kind)


def generate_dataset(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits; a pure function of ``spec``."""
    bench = Benchmark(spec)
    train = _draw_split(bench, spec.class_counts(spec.train_per_class, minimum=1), split=0)
    test = _draw_split(bench, spec.class_counts(spec.test_per_class), split=1)
    return train, test


# -- FFDS1 serialization -------------------------------------------------
#
#   magic "FFDS1"
#   u32   header length, then that many bytes of UTF-8 JSON:
#         {"spec": {...}, "kind": str, "sample_shape": [...], "splits": {"train": n, "test": n}}
#   per split (train, then test):
#         f32[n * prod(sample_shape)] inputs, i32[n] labels, i32[n * tokens] attributes
#   all integers and floats little-endian.

def save_dataset(path, spec: SyntheticSpec, train: Dataset, test: Dataset) -> None:
    header = {
        "spec": spec.to_dict(),
        "kind": train.kind,
        "sample_shape": list(train.inputs.shape[1:]),
        "splits": {"train": len(train), "test": len(test)},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for split in (train, test):
            f.write(np.ascontiguousarray(split.inputs, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(split.labels, dtype="<i4").tobytes())
            f.write(np.ascontiguousarray(split.attributes, dtype="<i4").tobytes())


def load_dataset(path) -> tuple[SyntheticSpec, Dataset, Dataset]:
    raw = Path(path).read_bytes()
    if raw[:5] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an FFDS1 dataset file")
    (hlen,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    spec = SyntheticSpec.from_dict(header["spec"])
    shape = tuple(header["sample_shape"])
    offset = 9 + hlen
    splits = []
    for name in ("train", "test"):
        n = header["splits"][name]

        def read(dtype, count, out_shape):
            nonlocal offset
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += arr.nbytes
            return arr.reshape(out_shape)

        inputs = read("<f4", n * int(np.prod(shape)), (n,) + shape).astype(np.float32)
        labels = read("<i4", n, (n,)).astype(np.int64)
        attrs = read("<i4", n * spec.tokens, (n, spec.tokens)).astype(np.int64)
        splits.append(Dataset(inputs, labels, attrs, header["kind"]))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return spec, splits[0], splits[1]
