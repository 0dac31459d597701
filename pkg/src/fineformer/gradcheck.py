"""Central finite-difference verification of every analytic adjoint."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
DENOM_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_gradient(loss_fn: Callable[[], Tensor], x: Tensor, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every element of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    tol: float
    size: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48s} max_rel_err={self.max_error:.2e}  tol={self.tol:.0e}  n={self.size}"


def check_gradients(loss_fn: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]],
                    tol: float, step: float = STEP, prefix: str = "") -> list[GradCheckResult]:
    for _, t in named:
        t.grad = None
    loss_fn().backward()
    results = []
    for name, t in named:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(loss_fn, t, step)
        err = relative_error(analytic, numeric)
        results.append(GradCheckResult(prefix + name, float(err.max()) if err.size else 0.0, tol, t.data.size))
    return results


def _projected(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Scalar loss ``sum(y * R)`` for a fixed random ``R``; exercises every output element."""
    r = Tensor(rng.standard_normal(shape))
    return lambda y: T.sum_all(T.mul(y, r))


def randomize_parameters(module, rng: np.random.Generator) -> None:
    """Move every trainable parameter to a generic point away from init.

    At the 0.02 init scale attention is nearly uniform and query/key
    gradients are small enough for finite-difference round-off to dominate.
    Matrices get fan-in scaled normals, vectors small perturbations around
    their init value (1 for layer-norm gains, 0 otherwise).
    """
    for name, p in module.named_parameters():
        if p.ndim == 2:
            p.data[...] = rng.normal(0.0, 1.0 / np.sqrt(p.shape[0]), p.shape)
        else:
            base = 1.0 if name.endswith("gain") else 0.0
            p.data[...] = base + rng.normal(0.0, 0.1, p.shape)


def _leaf(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    from .nn import layer_norm
    from .training import cross_entropy

    labels = np.array([2, 0, 4])
    return [
        ("matmul", T.matmul, [_leaf(rng, 4, 5), _leaf(rng, 5, 3)]),
        ("matmul[shared rhs]", T.matmul, [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)]),
        ("matmul[batched]", T.matmul, [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 2)]),
        ("add", T.add, [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        ("sub", T.sub, [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        ("mul", T.mul, [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        ("mul_scalar", lambda x: T.mul_scalar(x, -1.7), [_leaf(rng, 3, 4)]),
        ("add_broadcast", T.add_broadcast, [_leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)]),
        ("mul_broadcast", T.mul_broadcast, [_leaf(rng, 3, 4), _leaf(rng, 4)]),
        ("relu", T.relu, [_leaf(rng, 16, away_from_zero=True)]),
        ("gelu", T.gelu, [_leaf(rng, 16)]),
        ("softmax", T.softmax, [_leaf(rng, 3, 5)]),
        ("standardize", lambda x: T.standardize(x, 1e-12), [_leaf(rng, 4, 8)]),
        ("layer_norm", lambda x, g, b: layer_norm(x, g, b), [_leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)]),
        ("mean[axis=0]", lambda x: T.mean(x, 0), [_leaf(rng, 3, 4)]),
        ("mean[axis=-1]", lambda x: T.mean(x, -1), [_leaf(rng, 2, 3, 4)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [_leaf(rng, 2, 3, 4)]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [_leaf(rng, 2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], 1), [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)]),
        ("narrow", lambda x: T.narrow(x, 1, 1, 3), [_leaf(rng, 2, 4, 3)]),
        ("take", lambda t: T.take(t, np.array([3, 0, 3, 1])), [_leaf(rng, 5, 3)]),
        ("expand", lambda x: T.expand(x, 3), [_leaf(rng, 2, 4)]),
        ("reused operand", lambda x: T.mul(x, T.add(x, x)), [_leaf(rng, 3, 3)]),
        ("cross_entropy", lambda z: cross_entropy(z, labels), [_leaf(rng, 3, 5)]),
    ]


def check_primitives(seed: int = 0, tol: float = PRIMITIVE_TOL) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.default_dtype(np.float64):
        for name, fn, inputs in primitive_cases(rng):
            out_shape = fn(*inputs).shape
            project = _projected(rng, out_shape) if out_shape else (lambda y: y)
            named = [(f"input{i}", t) for i, t in enumerate(inputs)]
            results += check_gradients(lambda: project(fn(*inputs)), named, tol, prefix=f"{name}:")
    return results


def miniature_config(**overrides):
    from .architectures import ModelConfig

    base = dict(hidden=8, heads=2, layers=2, cross_layers=2, channels=6, tokens=5, vocab_size=4,
                num_classes=5, feat_h=2, feat_w=2, frames=10, frame_h=4, frame_w=4)
    base.update(overrides)
    return ModelConfig(**base)


def check_layers(seed: int = 0, tol: float = MODEL_TOL) -> list[GradCheckResult]:
    from .nn import EncoderLayer, EncoderStack

    rng = np.random.default_rng(seed)
    results = []
    with T.default_dtype(np.float64):
        x = _leaf(rng, 2, 4, 8)
        layer = EncoderLayer(8, 2, rng)
        randomize_parameters(layer, rng)
        project = _projected(rng, (2, 4, 8))
        named = [("x", x)] + list(layer.named_parameters())
        results += check_gradients(lambda: project(layer(x)), named, tol, prefix="encoder_layer:")

        stack = EncoderStack(3, 8, 2, rng)
        randomize_parameters(stack, rng)
        x2 = _leaf(rng, 4, 8)
        project2 = _projected(rng, (4, 8))
        named = [("x", x2)] + list(stack.named_parameters())
        results += check_gradients(lambda: project2(stack(x2)), named, tol, prefix="encoder_stack[B=3]:")
    return results


def check_architectures(seed: int = 0, tol: float = MODEL_TOL) -> list[GradCheckResult]:
    """End-to-end checks through cross-entropy on miniature configs.

    The vision model is driven from raw video so the frozen backbone sits in
    the graph; its projection must come out without a gradient.
    """
    from .architectures import CrossEncoderModel, VisionEncoderModel
    from .training import cross_entropy

    rng = np.random.default_rng(seed)
    results = []
    labels = np.array([1, 3])
    with T.default_dtype(np.float64):
        for layers in (1, 3):
            cfg = miniature_config(layers=layers)
            model = VisionEncoderModel(cfg, seed)
            randomize_parameters(model, rng)
            video = rng.standard_normal((2, cfg.frames, cfg.frame_h, cfg.frame_w, 3))
            results += check_gradients(lambda: cross_entropy(model(video, "video"), labels),
                                       list(model.named_parameters()), tol,
                                       prefix=f"vision_encoder[B={layers}]:")
            frozen = model.backbone.projection
            results.append(GradCheckResult(f"vision_encoder[B={layers}]:backbone receives no grad",
                                           0.0 if frozen.grad is None else np.inf, tol, frozen.data.size))

        cfg = miniature_config(tokens=4, vocab_size=3, frames=8)
        model = CrossEncoderModel(cfg, seed)
        randomize_parameters(model, rng)
        feats = rng.standard_normal((2, cfg.channels, cfg.tokens))
        results += check_gradients(lambda: cross_entropy(model(feats), labels),
                                   list(model.named_parameters()), tol, prefix="cross_encoder:")
    return results


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    return check_primitives(seed) + check_layers(seed) + check_architectures(seed)
