"""Embedding encoders: transformer backbone, prior MLP, alignment head.

The backbone reads the adapter feature as one token alongside the patch's
raw spectra (each linearly projected to the embedding width), runs pre-norm
self-attention blocks, and mean-pools to a single embedding. The prior
encoder maps a clean library spectrum into the same space; the alignment
head projects adapter features there so the physical-consistency loss can
pull them toward the prior anchor without touching the backbone.

Namespaces: "backbone/", "prior/", "align/". Freezing "backbone/" stops
gradient into its weights while the path through it stays differentiable,
so adapter parameters still receive gradient from downstream losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hsio import ValidationError

__all__ = [
    "EncoderConfig",
    "Prototype",
    "init_encoder_params",
    "backbone_encode",
    "prior_encode",
    "align_encode",
    "physical_loss",
    "rectify_prototype",
]

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    """Widths of the backbone, prior, and alignment encoders."""

    bands: int
    adapter_dim: int = 64
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 2
    prior_hidden: int = 128
    ff_mult: int = 2
    patch_size: int = 5

    def validate(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise ValidationError("embed_dim must be divisible by heads")
        if min(self.bands, self.adapter_dim, self.embed_dim, self.heads,
               self.blocks, self.prior_hidden, self.patch_size) < 1:
            raise ValidationError("encoder widths must be >= 1")


@dataclass
class Prototype:
    """Convex blend of the support-mean embedding and the prior anchor."""

    class_id: int
    p_c: np.ndarray
    blend: float
    support_mean: np.ndarray
    e_prior: np.ndarray


def _fanin_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(store: ad.ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    cfg.validate()
    de = cfg.embed_dim
    store.add("backbone/tok_ada_w", _fanin_uniform(rng, (cfg.adapter_dim, de)))
    store.add("backbone/tok_ada_b", np.zeros(de))
    store.add("backbone/tok_raw_w", _fanin_uniform(rng, (cfg.bands, de)))
    store.add("backbone/tok_raw_b", np.zeros(de))
    # zero start: position information fades in as training needs it
    store.add("backbone/pos",
              np.zeros((1 + cfg.patch_size * cfg.patch_size, de)))
    for blk in range(cfg.blocks):
        pre = f"backbone/blk{blk}/"
        store.add(pre + "ln1_g", np.ones(de))
        store.add(pre + "ln1_b", np.zeros(de))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(pre + f"attn_{name}", _fanin_uniform(rng, (de, de)))
            store.add(pre + f"attn_{name}b", np.zeros(de))
        store.add(pre + "ln2_g", np.ones(de))
        store.add(pre + "ln2_b", np.zeros(de))
        hidden = cfg.ff_mult * de
        store.add(pre + "ff_w1", _fanin_uniform(rng, (de, hidden)))
        store.add(pre + "ff_b1", np.zeros(hidden))
        store.add(pre + "ff_w2", _fanin_uniform(rng, (hidden, de)))
        store.add(pre + "ff_b2", np.zeros(de))
    store.add("backbone/ln_f_g", np.ones(de))
    store.add("backbone/ln_f_b", np.zeros(de))

    store.add("prior/w1", _fanin_uniform(rng, (cfg.bands, cfg.prior_hidden)))
    store.add("prior/b1", np.zeros(cfg.prior_hidden))
    store.add("prior/w2", _fanin_uniform(rng, (cfg.prior_hidden, de)))
    store.add("prior/b2", np.zeros(de))

    store.add("align/w", _fanin_uniform(rng, (cfg.adapter_dim, de)))
    store.add("align/b", np.zeros(de))


def _layer_norm(x: ad.Tensor, gain: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    mean = ad.reduce_mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = ad.reduce_mean(centered * centered, axis=-1, keepdims=True)
    return centered / ad.sqrt(var + LN_EPS) * gain + bias


def _attention(x: ad.Tensor, store: ad.ParamStore, pre: str,
               heads: int) -> ad.Tensor:
    p, t, de = x.shape
    dh = de // heads

    def split(v):
        return ad.transpose(ad.reshape(v, (p, t, heads, dh)), (0, 2, 1, 3))

    q = split(x @ store.node(pre + "attn_wq") + store.node(pre + "attn_wqb"))
    k = split(x @ store.node(pre + "attn_wk") + store.node(pre + "attn_wkb"))
    v = split(x @ store.node(pre + "attn_wv") + store.node(pre + "attn_wvb"))
    scores = q @ ad.transpose(k, (0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    ctx = ad.softmax(scores, axis=-1) @ v
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (p, t, de))
    return merged @ store.node(pre + "attn_wo") + store.node(pre + "attn_wob")


def backbone_encode(h_ada: ad.Tensor, raw_tokens: np.ndarray,
                    store: ad.ParamStore, cfg: EncoderConfig) -> ad.Tensor:
    """Embed a batch of patches: adapter token + raw spectral tokens.

    h_ada is the (P, d_ada) graph node; raw_tokens is the matching
    (P, s*s, B) patch content. Returns embeddings (P, d_e).
    """
    cfg.validate()
    if h_ada.shape[1] != cfg.adapter_dim:
        raise ValidationError(
            f"adapter feature width {h_ada.shape[1]}, expected {cfg.adapter_dim}")
    expected = cfg.patch_size * cfg.patch_size
    if raw_tokens.shape[1] != expected:
        raise ValidationError(
            f"patch has {raw_tokens.shape[1]} raw tokens, expected {expected}")
    p = h_ada.shape[0]
    tok0 = h_ada @ store.node("backbone/tok_ada_w") + store.node("backbone/tok_ada_b")
    tok0 = ad.reshape(tok0, (p, 1, cfg.embed_dim))
    raw = ad.constant(raw_tokens)
    tokr = raw @ store.node("backbone/tok_raw_w") + store.node("backbone/tok_raw_b")
    x = ad.concat([tok0, tokr], axis=1) + store.node("backbone/pos")
    for blk in range(cfg.blocks):
        pre = f"backbone/blk{blk}/"
        normed = _layer_norm(x, store.node(pre + "ln1_g"), store.node(pre + "ln1_b"))
        x = x + _attention(normed, store, pre, cfg.heads)
        normed = _layer_norm(x, store.node(pre + "ln2_g"), store.node(pre + "ln2_b"))
        ff = ad.relu(normed @ store.node(pre + "ff_w1") + store.node(pre + "ff_b1"))
        x = x + (ff @ store.node(pre + "ff_w2") + store.node(pre + "ff_b2"))
    x = _layer_norm(x, store.node("backbone/ln_f_g"), store.node("backbone/ln_f_b"))
    return ad.reduce_mean(x, axis=1)


def prior_encode(t_prior, store: ad.ParamStore) -> ad.Tensor:
    """Anchor embedding of a clean spectrum; accepts (B,) or (K, B)."""
    t = t_prior if isinstance(t_prior, ad.Tensor) else ad.constant(t_prior)
    hidden = ad.relu(t @ store.node("prior/w1") + store.node("prior/b1"))
    return hidden @ store.node("prior/w2") + store.node("prior/b2")


def align_encode(h_ada: ad.Tensor, store: ad.ParamStore) -> ad.Tensor:
    return h_ada @ store.node("align/w") + store.node("align/b")


def physical_loss(h_ada: ad.Tensor, store: ad.ParamStore,
                  e_prior: ad.Tensor) -> ad.Tensor:
    """Mean squared distance between aligned adapter features and the anchor.

    Pulls the adapter toward the prior without routing gradient through
    the backbone at all.
    """
    k = h_ada.shape[0]
    if k < 1:
        raise ValidationError("physical loss needs at least one support sample")
    diff = align_encode(h_ada, store) - e_prior
    return ad.reduce_sum(diff * diff) * (1.0 / k)


def rectify_prototype(support_mean: np.ndarray, e_prior: np.ndarray,
                      blend: float, class_id: int = 0) -> Prototype:
    """p_c = blend * support_mean + (1 - blend) * e_prior, components kept."""
    if not (0.0 <= blend <= 1.0):
        raise ValidationError("blend coefficient must lie in [0, 1]")
    support_mean = np.asarray(support_mean, dtype=np.float64)
    e_prior = np.asarray(e_prior, dtype=np.float64)
    if support_mean.shape != e_prior.shape:
        raise ValidationError("prototype components must share a shape")
    p_c = blend * support_mean + (1.0 - blend) * e_prior
    return Prototype(class_id=class_id, p_c=p_c, blend=blend,
                     support_mean=support_mean, e_prior=e_prior)
