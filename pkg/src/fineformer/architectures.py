"""The two CNN-Transformer action recognition models and the frozen backbone stub.

Both models consume either pooled backbone features ``(batch, C', T')``,
backbone feature volumes ``(batch, C', T', H', W')`` or raw videos
``(batch, T, H, W, 3)``; ``kind`` selects which. Raw videos go through
:class:`BackboneStub`, whose output never receives a gradient.

Symbol map for :class:`ModelConfig`: ``hidden`` is h, ``layers`` is B,
``channels`` is C', ``tokens`` is T', ``vocab_size`` is N and
``feat_h``/``feat_w`` are H'/W'.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import EncoderStack, Embedding, Linear, Module, parameter, truncated_normal
from .tensor import Tensor

INPUT_KINDS = ("features", "volume", "video")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    heads: int = 4
    layers: int = 3
    cross_layers: int = 2
    channels: int = 64
    tokens: int = 8
    vocab_size: int = 12
    num_classes: int = 16
    feat_h: int = 2
    feat_w: int = 2
    frames: int = 16
    frame_h: int = 8
    frame_w: int = 8
    ffn_mult: int = 4
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        for name in ("tokens", "vocab_size", "num_classes", "layers", "cross_layers",
                     "channels", "feat_h", "feat_w", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.frames % self.tokens or self.frame_h % self.feat_h or self.frame_w % self.feat_w:
            raise ValueError("video extents must be integer multiples of the feature extents "
                             f"(frames={self.frames}, tokens={self.tokens}, "
                             f"frame={self.frame_h}x{self.frame_w}, feat={self.feat_h}x{self.feat_w})")

    @classmethod
    def gym99(cls, **overrides) -> "ModelConfig":
        """Published scale: h=768, 12 heads, B=3, 2 cross layers, 66 attributes, 99 classes."""
        base = dict(hidden=768, heads=12, layers=3, cross_layers=2, channels=2048, tokens=8,
                    vocab_size=66, num_classes=99, feat_h=7, feat_w=7, frames=32,
                    frame_h=224, frame_w=224)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def gym288(cls, **overrides) -> "ModelConfig":
        return cls.gym99(**{"vocab_size": 98, "num_classes": 288, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Vocabulary:
    """Attribute descriptions; the token id of ``descriptions[i]`` is ``i``."""

    descriptions: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.descriptions)) != len(self.descriptions):
            raise ValueError("attribute descriptions must be unique")

    @classmethod
    def from_class_descriptions(cls, class_descriptions: Sequence[Sequence[str]]) -> "Vocabulary":
        """Collect distinct attributes across class descriptions, first-seen order."""
        seen: dict[str, None] = {}
        for attrs in class_descriptions:
            for a in attrs:
                seen.setdefault(a, None)
        return cls(tuple(seen))

    @classmethod
    def synthetic(cls, n: int) -> "Vocabulary":
        return cls(tuple(f"attribute_{i:03d}" for i in range(n)))

    def __len__(self) -> int:
        return len(self.descriptions)

    def ids(self) -> np.ndarray:
        return np.arange(len(self.descriptions))

    def encode(self, description: str) -> int:
        try:
            return self.descriptions.index(description)
        except ValueError:
            raise KeyError(f"attribute {description!r} is not in the vocabulary") from None


class BackboneStub(Module):
    """Frozen stand-in for the pretrained 3D CNN.

    Keeps every ``T/T'``-th frame, averages non-overlapping spatial patches
    down to ``H' x W'`` and maps RGB to ``C'`` channels with a fixed random
    matrix (no bias, so zero video gives zero features).
    """

    def __init__(self, config: ModelConfig, seed: int):
        self._config = config
        rng = np.random.default_rng([seed, 0xBB])
        self.projection = Tensor(rng.standard_normal((3, config.channels)) / np.sqrt(3.0),
                                 requires_grad=False)

    def forward(self, video) -> Tensor:
        c = self._config
        v = np.asarray(video.data if isinstance(video, Tensor) else video)
        unbatched = v.ndim == 4
        if unbatched:
            v = v[None]
        expected = (c.frames, c.frame_h, c.frame_w, 3)
        if v.ndim != 5 or v.shape[1:] != expected:
            raise T.ShapeError(f"backbone expects videos of shape {expected}, got {v.shape[1:]}")
        b = v.shape[0]
        stride = c.frames // c.tokens
        ph, pw = c.frame_h // c.feat_h, c.frame_w // c.feat_w
        frames = v[:, ::stride].astype(self.projection.dtype)
        patches = frames.reshape(b, c.tokens, c.feat_h, ph, c.feat_w, pw, 3).mean(axis=(3, 5))
        volume = (patches @ self.projection.data).transpose(0, 4, 1, 2, 3)
        return Tensor(volume[0] if unbatched else volume, dtype=self.projection.dtype)


def spatial_avg_pool(volume: Tensor) -> Tensor:
    """``(..., C', T', H', W') -> (..., C', T')`` by averaging over space."""
    return T.mean(T.mean(volume, -1), -1)


class ActionModel(Module):
    """Shared input handling; subclasses implement ``forward_features``."""

    config: ModelConfig

    def pooled(self, x, kind: str = "features") -> Tensor:
        if kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {kind!r}; expected one of {INPUT_KINDS}")
        if kind == "video":
            return spatial_avg_pool(self.backbone(x))
        dtype = self.backbone.projection.dtype
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
        if x.dtype != dtype:
            x = Tensor(x.data, dtype=dtype)
        return spatial_avg_pool(x) if kind == "volume" else x

    def forward(self, x, kind: str = "features", **kwargs) -> Tensor:
        """Logits ``(batch, num_classes)``, or ``(num_classes,)`` for one example."""
        pooled = self.pooled(x, kind)
        unbatched = pooled.ndim == 2
        if unbatched:
            pooled = T.reshape(pooled, (1,) + pooled.shape)
        c = self.config
        if pooled.shape[1:] != (c.channels, c.tokens):
            raise T.ShapeError(f"expected pooled features (C'={c.channels}, T'={c.tokens}), "
                               f"got {pooled.shape[1:]}")
        logits = self.forward_features(pooled, **kwargs)
        return T.reshape(logits, (c.num_classes,)) if unbatched else logits

    def forward_features(self, pooled: Tensor) -> Tensor:
        raise NotImplementedError


class MeanPoolBaseline(ActionModel):
    """Order-blind reference: temporal mean of backbone features, then linear."""

    arch = "baseline"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = BackboneStub(config, seed)
        self.head = Linear(config.channels, config.num_classes, rng)

    def forward_features(self, pooled: Tensor) -> Tensor:
        return self.head(T.mean(pooled, -1))


class VisionEncoderModel(ActionModel):
    """backbone -> spatial pool -> video embedding -> B encoder layers -> mean over time -> linear."""

    arch = "vision"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = BackboneStub(config, seed)
        self.embed = Linear(config.channels, config.hidden, rng)
        self.position = parameter(truncated_normal(rng, (config.tokens, config.hidden)))
        self.encoder = EncoderStack(config.layers, config.hidden, config.heads, rng,
                                    config.ffn_mult, config.ln_eps)
        self.head = Linear(config.hidden, config.num_classes, rng)

    def video_embed(self, pooled: Tensor) -> Tensor:
        """``(b, C', T') -> (b, T', h)``: project each time step, add its position row."""
        return T.add_broadcast(self.embed(T.transpose(pooled, (0, 2, 1))), self.position)

    def forward_features(self, pooled: Tensor) -> Tensor:
        encoded = self.encoder(self.video_embed(pooled))
        return self.head(T.mean(encoded, 1))


class CrossEncoderModel(ActionModel):
    """Video-text cross encoder.

    A single learned position table of ``T' + N`` rows indexes the
    concatenated sequence, so visual tokens use rows ``0..T'-1`` and text
    tokens rows ``T'..T'+N-1``; each token receives position exactly once.
    """

    arch = "cross"

    def __init__(self, config: ModelConfig, seed: int = 0, vocabulary: Vocabulary | None = None):
        self.config = config
        self.vocabulary = vocabulary or Vocabulary.synthetic(config.vocab_size)
        if len(self.vocabulary) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(self.vocabulary)} entries, config says {config.vocab_size}")
        rng = np.random.default_rng(seed)
        self.backbone = BackboneStub(config, seed)
        self.embed = Linear(config.channels, config.hidden, rng)
        self.text = Embedding(config.vocab_size, config.hidden, rng)
        self.position = parameter(truncated_normal(rng, (config.tokens + config.vocab_size, config.hidden)))
        self.token_type = parameter(truncated_normal(rng, (2, config.hidden)))
        self.encoder = EncoderStack(config.cross_layers, config.hidden, config.heads, rng,
                                    config.ffn_mult, config.ln_eps)
        self.head = Linear(2 * config.hidden, config.num_classes, rng)
        self._type_ids = np.array([0] * config.tokens + [1] * config.vocab_size)

    def _text_ids(self, text_ids) -> np.ndarray:
        ids = self.vocabulary.ids() if text_ids is None else np.asarray(text_ids)
        if ids.shape != (self.config.vocab_size,):
            raise T.ShapeError(f"expected {self.config.vocab_size} text ids, got shape {ids.shape}")
        return ids

    def visual_tokens(self, pooled: Tensor) -> Tensor:
        return self.embed(T.transpose(pooled, (0, 2, 1)))

    def video_embed(self, pooled: Tensor) -> Tensor:
        """Visual tokens plus their position rows ``0..T'-1``."""
        return T.add_broadcast(self.visual_tokens(pooled), T.narrow(self.position, 0, 0, self.config.tokens))

    def text_embed(self, text_ids=None) -> Tensor:
        """``(N, h)`` text representation: embedding row plus position row ``T' + i``."""
        c = self.config
        return T.add(self.text(self._text_ids(text_ids)),
                     T.narrow(self.position, 0, c.tokens, c.tokens + c.vocab_size))

    def cross_embed(self, visual: Tensor, text: Tensor) -> Tensor:
        """Concatenate ``(b, T', h)`` visual and ``(N, h)``/``(b, N, h)`` text rows,
        then add position and token-type embeddings."""
        if text.ndim == 2:
            text = T.expand(text, visual.shape[0])
        joint = T.concat([visual, text], axis=1)
        joint = T.add_broadcast(joint, self.position)
        return T.add_broadcast(joint, T.take(self.token_type, self._type_ids))

    def encode(self, pooled: Tensor, text_ids=None) -> Tensor:
        ids = self._text_ids(text_ids)
        return self.encoder(self.cross_embed(self.visual_tokens(pooled), self.text(ids)))

    def split(self, encoded: Tensor) -> tuple[Tensor, Tensor]:
        """Visual rows ``(b, T', h)`` and text rows ``(b, N, h)`` of the encoder output."""
        t = self.config.tokens
        return T.narrow(encoded, 1, 0, t), T.narrow(encoded, 1, t, encoded.shape[1])

    def forward_features(self, pooled: Tensor, text_ids=None) -> Tensor:
        visual, text = self.split(self.encode(pooled, text_ids))
        joint = T.concat([T.mean(visual, 1), T.mean(text, 1)], axis=-1)
        return self.head(joint)

    def cross_attention(self, x, kind: str = "features", text_ids=None) -> np.ndarray:
        """Head-averaged last-layer attention from each text token to each
        visual token: ``(batch, N, T')``, or ``(N, T')`` for one example."""
        logits = self.forward(x, kind, text_ids=text_ids)
        attn = self.encoder.layers[-1].attention.last_attention.mean(axis=1)
        t = self.config.tokens
        out = attn[:, t:, :t]
        return out[0] if logits.ndim == 1 else out


ARCHITECTURES = {
    "baseline": MeanPoolBaseline,
    "vision": VisionEncoderModel,
    "cross": CrossEncoderModel,
}


def build_model(arch: str, config: ModelConfig, seed: int = 0) -> ActionModel:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None
    return cls(config, seed)
