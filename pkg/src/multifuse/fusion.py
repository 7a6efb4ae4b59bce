"""Fusion of text and image representations into two-class logits.

Three strategies share one parameter layout (``fusion.*`` and ``head.*``):

* ``concat``: [text CLS; image CLS] -> Dense(hidden, ReLU) -> Dense(2)
* ``gmu``: gated multimodal unit over the two CLS vectors -> Dense(2)
* ``crossattn``: image<-text and text<-image crossmodal attention over the
  full token sequences, concatenated in time, mean pooled -> Dense(2)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, init_text_params, init_vision_params, text_encode, vision_encode

N_CLASSES = 2


class FusionKind(str, enum.Enum):
    CONCAT = "concat"
    GMU = "gmu"
    CROSSATTN = "crossattn"

    @classmethod
    def parse(cls, value) -> "FusionKind":
        if isinstance(value, cls):
            return value
        aliases = {"crossattention": "crossattn", "cross": "crossattn", "cross_attention": "crossattn"}
        v = str(value).lower()
        return cls(aliases.get(v, v))


@dataclass
class FusionModel:
    kind: FusionKind
    vision: EncoderConfig
    text: EncoderConfig
    params: dict[str, np.ndarray]
    gmu_dim: int = 128
    hidden: int = 512

    def copy(self) -> "FusionModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class ForwardResult:
    logits: Tensor
    aux: dict = field(default_factory=dict)


def _dense(rng, fan_in, fan_out):
    return ad.glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out, np.float32)


def init_fusion_params(kind: FusionKind, d_text: int, d_vision: int, rng: np.random.Generator,
                       gmu_dim: int = 128, hidden: int = 512) -> dict[str, np.ndarray]:
    kind = FusionKind.parse(kind)
    p: dict[str, np.ndarray] = {}
    if kind is FusionKind.CONCAT:
        p["head.w1"], p["head.b1"] = _dense(rng, d_text + d_vision, hidden)
        p["head.w2"], p["head.b2"] = _dense(rng, hidden, N_CLASSES)
    elif kind is FusionKind.GMU:
        # stored [out, in] to mirror W f + b
        p["fusion.gmu.w_t"] = ad.glorot_uniform(rng, d_text, gmu_dim, shape=(gmu_dim, d_text))
        p["fusion.gmu.w_v"] = ad.glorot_uniform(rng, d_vision, gmu_dim, shape=(gmu_dim, d_vision))
        p["fusion.gmu.w_z"] = ad.glorot_uniform(rng, d_text + d_vision, gmu_dim,
                                                shape=(gmu_dim, d_text + d_vision))
        for name in ("b_t", "b_v", "b_z"):
            p[f"fusion.gmu.{name}"] = np.zeros(gmu_dim, np.float32)
        p["head.w"], p["head.b"] = _dense(rng, gmu_dim, N_CLASSES)
    else:
        if d_text != d_vision:
            raise ValueError(f"crossmodal attention needs equal widths, got {d_text} and {d_vision}")
        d = d_text
        for name in ("w_q_a", "w_k_b", "w_v_b", "w_q_b", "w_k_a", "w_v_a"):
            p[f"fusion.cm.{name}"] = ad.glorot_uniform(rng, d, d)
        p["head.w"], p["head.b"] = _dense(rng, d, N_CLASSES)
    return p


def init_fusion_model(kind, vision: EncoderConfig, text: EncoderConfig, seed: int = 0,
                      gmu_dim: int = 128, hidden: int = 512) -> FusionModel:
    kind = FusionKind.parse(kind)
    rng = np.random.default_rng(seed)
    params = init_vision_params(vision, rng)
    params.update(init_text_params(text, rng))
    params.update(init_fusion_params(kind, text.width, vision.width, rng, gmu_dim, hidden))
    return FusionModel(kind, vision, text, params, gmu_dim, hidden)


# ---------------------------------------------------------------- heads

def _check_pair(op: str, f_t: Tensor, f_v: Tensor) -> None:
    if f_t.ndim != 2 or f_v.ndim != 2 or f_t.shape[0] != f_v.shape[0]:
        raise ValueError(f"{op}: expected [B, d] inputs, got {f_t.shape} and {f_v.shape}")


def concat_head(f_t: Tensor, f_v: Tensor, params: dict[str, Tensor]) -> Tensor:
    _check_pair("concat_head", f_t, f_v)
    w1 = params["head.w1"]
    if f_t.shape[1] + f_v.shape[1] != w1.shape[0]:
        raise ValueError(f"concat_head: {f_t.shape[1]}+{f_v.shape[1]} inputs vs weight {w1.shape}")
    h = ad.relu(ad.linear(ad.concat([f_t, f_v], axis=1), w1, params["head.b1"]))
    return ad.linear(h, params["head.w2"], params["head.b2"])


def gmu_fuse(f_t: Tensor, f_v: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Gated multimodal unit; returns the fused vector h and the gate z.

    z weighs the text branch: h = z * tanh(W_t f_t + b_t) + (1 - z) * tanh(W_v f_v + b_v).
    """
    _check_pair("gmu_fuse", f_t, f_v)
    w_t, w_v, w_z = params["fusion.gmu.w_t"], params["fusion.gmu.w_v"], params["fusion.gmu.w_z"]
    if w_t.shape[1] != f_t.shape[1] or w_v.shape[1] != f_v.shape[1]:
        raise ValueError(f"gmu_fuse: inputs {f_t.shape}, {f_v.shape} vs weights {w_t.shape}, {w_v.shape}")
    h_t = ad.tanh(ad.linear(f_t, ad.transpose(w_t), params["fusion.gmu.b_t"]))
    h_v = ad.tanh(ad.linear(f_v, ad.transpose(w_v), params["fusion.gmu.b_v"]))
    z = ad.sigmoid(ad.linear(ad.concat([f_t, f_v], axis=1), ad.transpose(w_z), params["fusion.gmu.b_z"]))
    # z*h_t + (1-z)*h_v, written with a single gate product
    h = ad.add(h_v, ad.mul(z, ad.sub(h_t, h_v)))
    return h, z


def gmu_head(f_t: Tensor, f_v: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    h, z = gmu_fuse(f_t, f_v, params)
    return ad.linear(h, params["head.w"], params["head.b"]), z


def crossmodal_attention(x_query: Tensor, x_key: Tensor, key_mask: np.ndarray | None,
                         w_q: Tensor, w_k: Tensor, w_v: Tensor, return_scores: bool = False):
    """Latent adaptation of the key modality into the query modality.

    Rows of the result are score-weighted summaries of ``x_key @ w_v``; keys
    with ``key_mask == 0`` get zero weight.
    """
    if x_query.ndim != 3 or x_key.ndim != 3 or x_query.shape[0] != x_key.shape[0]:
        raise ValueError(f"crossmodal_attention: expected [B, T, d] pair, got {x_query.shape}, {x_key.shape}")
    if x_query.shape[2] != w_q.shape[0] or x_key.shape[2] != w_k.shape[0] or w_q.shape[1] != w_k.shape[1]:
        raise ValueError(
            f"crossmodal_attention: dims {x_query.shape}, {x_key.shape} vs projections {w_q.shape}, {w_k.shape}"
        )
    q = ad.matmul(x_query, w_q)
    k = ad.matmul(x_key, w_k)
    v = ad.matmul(x_key, w_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(w_q.shape[1]))
    if key_mask is not None:
        blocked = (np.asarray(key_mask) == 0)[:, None, :]
        scores = ad.masked_fill(scores, blocked)
    weights = ad.softmax(scores, axis=-1)
    y = ad.matmul(weights, v)
    return (y, weights) if return_scores else y


def crossmodal_head(y_a: Tensor, y_b: Tensor, params: dict[str, Tensor]) -> Tensor:
    if y_a.ndim != 3 or y_b.ndim != 3 or y_a.shape[0] != y_b.shape[0] or y_a.shape[2] != y_b.shape[2]:
        raise ValueError(f"crossmodal_head: incompatible sequences {y_a.shape}, {y_b.shape}")
    pooled = ad.mean(ad.concat([y_a, y_b], axis=1), axis=1)
    return ad.linear(pooled, params["head.w"], params["head.b"])


# ---------------------------------------------------------------- end to end

def wrap_params(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def fused_forward(kind: FusionKind, vision: EncoderConfig, text: EncoderConfig,
                  params: dict[str, Tensor], images, ids, mask) -> ForwardResult:
    kind = FusionKind.parse(kind)
    img_seq = vision_encode(images, vision, params)
    txt_seq = text_encode(ids, mask, text, params)
    if kind is FusionKind.CONCAT:
        return ForwardResult(concat_head(txt_seq.cls, img_seq.cls, params))
    if kind is FusionKind.GMU:
        logits, z = gmu_head(txt_seq.cls, img_seq.cls, params)
        return ForwardResult(logits, {"gate": z})
    # image = alpha (query side of Y_a), text = beta
    y_a = crossmodal_attention(img_seq.tokens, txt_seq.tokens, txt_seq.mask,
                               params["fusion.cm.w_q_a"], params["fusion.cm.w_k_b"], params["fusion.cm.w_v_b"])
    y_b = crossmodal_attention(txt_seq.tokens, img_seq.tokens, img_seq.mask,
                               params["fusion.cm.w_q_b"], params["fusion.cm.w_k_a"], params["fusion.cm.w_v_a"])
    return ForwardResult(crossmodal_head(y_a, y_b, params), {"y_alpha": y_a, "y_beta": y_b})


def model_forward(model: FusionModel, images, ids, mask,
                  params: dict[str, Tensor] | None = None) -> ForwardResult:
    """Logits [B, 2] for a batch; ``params`` overrides the model's own arrays."""
    if params is None:
        params = wrap_params(model.params)
    return fused_forward(model.kind, model.vision, model.text, params, images, ids, mask)


def predict_proba(model: FusionModel, images, ids, mask) -> np.ndarray:
    logits = model_forward(model, images, ids, mask).logits.data.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
