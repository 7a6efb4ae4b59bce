"""Small pre-norm transformer encoders for feature images and token sequences.

Parameters live in flat ``name -> array`` dicts (``vision.*`` / ``text.*``) so
they can be optimized and checkpointed uniformly. Forward functions take the
same dict with values wrapped as :class:`~multifuse.autodiff.Tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_dim: int = 128
    patch: int = 16
    side: int = 64
    max_positions: int = 128
    vocab_size: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.patch and self.side % self.patch:
            raise ValueError(f"side {self.side} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.side // self.patch) ** 2


@dataclass
class ModalitySequence:
    tokens: Tensor  # [B, T, d]
    cls: Tensor  # [B, d]
    mask: np.ndarray  # [B, T], 1 = attend


# ---------------------------------------------------------------- patches

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[..., 3, S, S] -> [..., N, 3*patch*patch], patches in row-major order."""
    images = np.asarray(images)
    side = images.shape[-1]
    if images.shape[-2] != side or side % patch:
        raise ValueError(f"patchify: image {images.shape[-2:]} not divisible by patch {patch}")
    g = side // patch
    lead = images.shape[:-3]
    c = images.shape[-3]
    x = images.reshape(lead + (c, g, patch, g, patch))
    n = len(lead)
    # -> lead, gy, gx, c, py, px
    x = x.transpose(tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
    return x.reshape(lead + (g * g, c * patch * patch))


def unpatchify(patches: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    lead = patches.shape[:-2]
    g = math.isqrt(patches.shape[-2])
    n = len(lead)
    x = patches.reshape(lead + (g, g, channels, patch, patch))
    x = x.transpose(tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4))
    return x.reshape(lead + (channels, g * patch, g * patch))


# ---------------------------------------------------------------- init

def init_layer_params(rng: np.random.Generator, prefix: str, d: int, mlp_dim: int) -> dict[str, np.ndarray]:
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.w_{name}"] = ad.glorot_uniform(rng, d, d)
        # no key bias: it shifts every score in a row equally, so softmax ignores it
        if name != "k":
            p[f"{prefix}.attn.b_{name}"] = np.zeros(d, np.float32)
    p[f"{prefix}.ln1.gamma"] = np.ones(d, np.float32)
    p[f"{prefix}.ln1.beta"] = np.zeros(d, np.float32)
    p[f"{prefix}.ln2.gamma"] = np.ones(d, np.float32)
    p[f"{prefix}.ln2.beta"] = np.zeros(d, np.float32)
    p[f"{prefix}.mlp.w1"] = ad.glorot_uniform(rng, d, mlp_dim)
    p[f"{prefix}.mlp.b1"] = np.zeros(mlp_dim, np.float32)
    p[f"{prefix}.mlp.w2"] = ad.glorot_uniform(rng, mlp_dim, d)
    p[f"{prefix}.mlp.b2"] = np.zeros(d, np.float32)
    return p


def _init_stack(rng, prefix: str, cfg: EncoderConfig, n_positions: int) -> dict[str, np.ndarray]:
    d = cfg.width
    p = {
        f"{prefix}.pos": (0.02 * rng.standard_normal((n_positions, d))).astype(np.float32),
        f"{prefix}.ln_f.gamma": np.ones(d, np.float32),
        f"{prefix}.ln_f.beta": np.zeros(d, np.float32),
    }
    for i in range(cfg.depth):
        p.update(init_layer_params(rng, f"{prefix}.layers.{i}", d, cfg.mlp_dim))
    return p


def init_vision_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "vision") -> dict[str, np.ndarray]:
    d = cfg.width
    patch_dim = 3 * cfg.patch * cfg.patch
    p = {
        f"{prefix}.patch.w": ad.glorot_uniform(rng, patch_dim, d),
        f"{prefix}.patch.b": np.zeros(d, np.float32),
        f"{prefix}.cls": (0.02 * rng.standard_normal(d)).astype(np.float32),
    }
    p.update(_init_stack(rng, prefix, cfg, cfg.n_patches + 1))
    return p


def init_text_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "text") -> dict[str, np.ndarray]:
    if cfg.vocab_size < 4:
        raise ValueError("text encoder needs vocab_size >= 4 (reserved ids)")
    p = {f"{prefix}.embed": (0.02 * rng.standard_normal((cfg.vocab_size, cfg.width))).astype(np.float32)}
    p.update(_init_stack(rng, prefix, cfg, cfg.max_positions))
    return p


# ---------------------------------------------------------------- blocks

def attention_weights(q: Tensor, k: Tensor, key_mask: np.ndarray | None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) over the key axis.

    ``q`` is [..., Tq, dk], ``k`` is [..., Tk, dk]; ``key_mask`` is [B, Tk]
    with 0 marking keys that must receive zero weight.
    """
    dk = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        blocked = np.asarray(key_mask) == 0
        # [B, Tk] -> broadcast over every axis between batch and keys
        blocked = blocked.reshape((blocked.shape[0],) + (1,) * (scores.ndim - 2) + (blocked.shape[1],))
        scores = ad.masked_fill(scores, blocked)
    return ad.softmax(scores, axis=-1)


def multi_head_self_attention(x: Tensor, mask: np.ndarray | None, params: dict[str, Tensor],
                              prefix: str, heads: int, return_weights: bool = False):
    if x.ndim != 3:
        raise ValueError(f"multi_head_self_attention: expected [B, T, d], got {x.shape}")
    b, t, d = x.shape
    if d % heads:
        raise ValueError(f"multi_head_self_attention: width {d} not divisible by {heads} heads")
    if mask is not None and np.shape(mask) != (b, t):
        raise ValueError(f"multi_head_self_attention: mask {np.shape(mask)} does not match {(b, t)}")
    dh = d // heads

    def split(name):
        y = ad.linear(x, params[f"{prefix}.w_{name}"], params.get(f"{prefix}.b_{name}"))
        return ad.transpose(ad.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    weights = attention_weights(q, k, mask)
    ctx = ad.matmul(weights, v)  # [B, h, T, dh]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = ad.linear(ctx, params[f"{prefix}.w_o"], params[f"{prefix}.b_o"])
    return (out, weights) if return_weights else out


def encoder_layer(x: Tensor, mask: np.ndarray | None, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    x = ad.add(x, multi_head_self_attention(h, mask, params, f"{prefix}.attn", heads))
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = ad.relu(ad.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    h = ad.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return ad.add(x, h)


def _run_stack(x: Tensor, mask, params, prefix: str, cfg: EncoderConfig) -> ModalitySequence:
    for i in range(cfg.depth):
        x = encoder_layer(x, mask, params, f"{prefix}.layers.{i}", cfg.heads)
    x = ad.layer_norm(x, params[f"{prefix}.ln_f.gamma"], params[f"{prefix}.ln_f.beta"])
    return ModalitySequence(tokens=x, cls=x[:, 0, :], mask=mask)


def vision_encode(images: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor],
                  prefix: str = "vision") -> ModalitySequence:
    """Encode a batch of feature images [B, 3, S, S]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[-1] != cfg.side:
        raise ValueError(f"vision_encode: image side {images.shape[-1]} != configured {cfg.side}")
    b = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch), dtype=params[f"{prefix}.patch.w"].dtype)
    x = ad.linear(patches, params[f"{prefix}.patch.w"], params[f"{prefix}.patch.b"])
    cls = ad.repeat_batch(ad.reshape(params[f"{prefix}.cls"], (1, cfg.width)), b)
    x = ad.concat([cls, x], axis=1)
    x = ad.add(x, params[f"{prefix}.pos"])
    mask = np.ones((b, x.shape[1]), dtype=np.int64)
    return _run_stack(x, mask, params, prefix, cfg)


def text_encode(ids: np.ndarray, mask: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor],
                prefix: str = "text") -> ModalitySequence:
    """Encode token ids [B, T] with attention mask [B, T]."""
    ids = np.asarray(ids)
    mask = np.asarray(mask)
    if ids.ndim == 1:
        ids, mask = ids[None], mask[None]
    t = ids.shape[1]
    if t > cfg.max_positions:
        raise ValueError(f"text_encode: length {t} exceeds max_positions {cfg.max_positions}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ValueError(f"text_encode: token id outside vocabulary of {cfg.vocab_size}")
    x = ad.embedding_lookup(params[f"{prefix}.embed"], ids)
    pos = params[f"{prefix}.pos"]
    if t < pos.shape[0]:
        pos = pos[:t]
    x = ad.add(x, pos)
    return _run_stack(x, mask, params, prefix, cfg)
