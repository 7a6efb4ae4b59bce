"""Finite-difference checks over every op, both encoders and all fusion kinds.

Each case is built from a seed at toy dimensions and checked in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .encoders import EncoderConfig, init_text_params, init_vision_params, text_encode, vision_encode
from .fusion import FusionKind, fused_forward, init_fusion_params

Case = tuple[Callable[[dict[str, Tensor]], Tensor], dict[str, np.ndarray]]

TOY_VISION = EncoderConfig(depth=1, width=4, heads=2, mlp_dim=4, patch=2, side=4)
TOY_TEXT = EncoderConfig(depth=1, width=4, heads=2, mlp_dim=4, patch=0, max_positions=4, vocab_size=8)

# central differences straddling a ReLU hinge measure a one-sided slope, not the gradient
KINK_MARGIN = 1e-3


@contextlib.contextmanager
def _relu_probe(record: list):
    real = ad.relu

    def probe(a):
        record.append(float(np.min(np.abs(a.data))) if a.data.size else np.inf)
        return real(a)

    ad.relu = probe
    try:
        yield
    finally:
        ad.relu = real


def _off_kinks(build: Callable[[np.random.Generator], Case], seed: int) -> Case:
    """Draw a case from ``seed``, redrawing while any ReLU input sits near zero."""
    for attempt in range(100):
        rng = np.random.default_rng(seed if attempt == 0 else (seed, attempt))
        fn, inputs = build(rng)
        seen: list[float] = []
        with _relu_probe(seen):
            fn({k: Tensor(v) for k, v in inputs.items()})
        if min(seen, default=np.inf) > KINK_MARGIN:
            return fn, inputs
    raise RuntimeError(f"no kink-free draw for seed {seed}")


def _projected(op, inputs: dict[str, np.ndarray], rng: np.random.Generator) -> Case:
    shape = op({k: Tensor(v) for k, v in inputs.items()}).shape
    w = rng.standard_normal(shape)
    return (lambda p: ad.mean(ad.mul(op(p), w))), inputs


def op_case(name: str, seed: int) -> Case:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    b, t, d = (int(v) for v in rng.integers(1, 4, size=3))
    ops = {
        "matmul": lambda: (lambda p: ad.matmul(p["a"], p["b"]), {"a": r(b, t, d), "b": r(d, 3)}),
        "matmul_batched": lambda: (lambda p: ad.matmul(p["a"], p["b"]), {"a": r(b, 2, t, d), "b": r(b, 2, d, 2)}),
        "add": lambda: (lambda p: ad.add(p["a"], p["b"]), {"a": r(b, t, d), "b": r(d)}),
        "mul": lambda: (lambda p: ad.mul(p["a"], p["b"]), {"a": r(b, t), "b": r(b, t)}),
        "concat": lambda: (lambda p: ad.concat([p["a"], p["b"]], axis=1), {"a": r(b, d), "b": r(b, t)}),
        "mean": lambda: (lambda p: ad.mean(p["a"], axis=1), {"a": r(b, t, d)}),
        "tanh": lambda: (lambda p: ad.tanh(p["a"]), {"a": r(b, d)}),
        "sigmoid": lambda: (lambda p: ad.sigmoid(p["a"]), {"a": r(b, d)}),
        "relu": lambda: (lambda p: ad.relu(p["a"]), {"a": r(b, d)}),
        "layer_norm": lambda: (lambda p: ad.layer_norm(p["a"], p["g"], p["b"]),
                               {"a": r(b, t, d + 2), "g": r(d + 2), "b": r(d + 2)}),
        "transpose": lambda: (lambda p: ad.transpose(p["a"], (1, 2, 0)), {"a": r(b, t, d)}),
        "scale": lambda: (lambda p: ad.scale(p["a"], -0.7), {"a": r(b, d)}),
        "embedding_lookup": lambda: (lambda p: ad.embedding_lookup(p["a"], ids), {"a": r(5, d)}),
        "masked_fill": lambda: (lambda p: ad.masked_fill(p["a"], mask, 0.0), {"a": r(b, t)}),
        "softmax": lambda: (lambda p: ad.softmax(p["a"], axis=-1), {"a": r(b, t + 1)}),
        "cross_entropy": lambda: (lambda p: ad.cross_entropy(p["a"], labels), {"a": r(b, 2)}),
    }
    ids = rng.integers(0, 5, size=(b, t))
    mask = rng.random((b, t)) < 0.4
    labels = rng.integers(0, 2, size=b)
    op, inputs = ops[name]()
    if name == "cross_entropy":
        return op, inputs
    return _projected(op, inputs, rng)


OP_NAMES = ("matmul", "matmul_batched", "add", "mul", "concat", "mean", "tanh", "sigmoid", "relu",
            "layer_norm", "transpose", "scale", "embedding_lookup", "masked_fill", "softmax", "cross_entropy")


def _text_batch(rng: np.random.Generator, cfg: EncoderConfig, batch: int):
    t = cfg.max_positions
    ids = rng.integers(4, cfg.vocab_size, size=(batch, t))
    lengths = rng.integers(2, t + 1, size=batch)
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int64)
    ids[:, 0] = 2
    ids[mask == 0] = 0
    return ids, mask


def _as64(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in params.items()}


def vision_case(seed: int, cfg: EncoderConfig = TOY_VISION, batch: int = 2) -> Case:
    return _off_kinks(lambda rng: _vision_draw(rng, cfg, batch), seed)


def _vision_draw(rng, cfg, batch) -> Case:
    params = _as64(init_vision_params(cfg, rng))
    # widen the tiny default init so every path carries visible gradient
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()}
    images = rng.uniform(-1, 1, size=(batch, 3, cfg.side, cfg.side))
    seq_len = cfg.n_patches + 1
    w = rng.standard_normal((batch, seq_len, cfg.width))
    return (lambda p: ad.mean(ad.mul(vision_encode(images, cfg, p).tokens, w))), params


def text_case(seed: int, cfg: EncoderConfig = TOY_TEXT, batch: int = 2) -> Case:
    return _off_kinks(lambda rng: _text_draw(rng, cfg, batch), seed)


def _text_draw(rng, cfg, batch) -> Case:
    params = _as64(init_text_params(cfg, rng))
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()}
    ids, mask = _text_batch(rng, cfg, batch)
    w = rng.standard_normal((batch, cfg.max_positions, cfg.width))
    return (lambda p: ad.mean(ad.mul(text_encode(ids, mask, cfg, p).tokens, w))), params


def fusion_case(kind, seed: int, vision: EncoderConfig = TOY_VISION, text: EncoderConfig = TOY_TEXT,
                batch: int = 2, gmu_dim: int = 3, hidden: int = 5) -> Case:
    kind = FusionKind.parse(kind)
    return _off_kinks(lambda rng: _fusion_draw(rng, kind, vision, text, batch, gmu_dim, hidden), seed)


def _fusion_draw(rng, kind, vision, text, batch, gmu_dim, hidden) -> Case:
    params = init_vision_params(vision, rng)
    params.update(init_text_params(text, rng))
    params.update(init_fusion_params(kind, text.width, vision.width, rng, gmu_dim, hidden))
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in _as64(params).items()}
    images = rng.uniform(-1, 1, size=(batch, 3, vision.side, vision.side))
    ids, mask = _text_batch(rng, text, batch)
    labels = rng.integers(0, 2, size=batch)

    def fn(p):
        return ad.cross_entropy(fused_forward(kind, vision, text, p, images, ids, mask).logits, labels)

    return fn, params


@dataclass
class SuiteResult:
    group: str
    name: str
    seed: int
    report: GradCheckReport


GROUPS = ("op", "encoder", "fusion")


def suite_cases(seeds: Iterable[int] = range(20), groups: Iterable[str] = GROUPS):
    seeds, groups = list(seeds), set(groups)
    if "op" in groups:
        for name in OP_NAMES:
            for s in seeds:
                yield "op", name, s, op_case(name, s)
    if "encoder" in groups:
        for s in seeds:
            yield "encoder", "vision", s, vision_case(s)
            yield "encoder", "text", s, text_case(s)
    if "fusion" in groups:
        for kind in FusionKind:
            for s in seeds:
                yield "fusion", kind.value, s, fusion_case(kind, s)


def run_suite(seeds: Iterable[int] = range(20), tol: float = 1e-4,
              groups: Iterable[str] = GROUPS) -> list[SuiteResult]:
    return [SuiteResult(g, n, s, grad_check(fn, inputs, tol=tol))
            for g, n, s, (fn, inputs) in suite_cases(seeds, groups)]
