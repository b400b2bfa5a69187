"""Model wiring: adapter + encoders + heads over a shared parameter store.

scene_forward runs the no-gradient full-scene pass in fixed-size pixel
chunks with preassigned output slots, so results are byte-identical for
any worker-thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders
from .adapter import AdapterConfig, adapter_forward, init_adapter_params
from .encoders import EncoderConfig, backbone_encode, init_encoder_params
from .hsio import HsiCube, ValidationError, extract_patch_block

__all__ = [
    "ModelSpec",
    "init_param_store",
    "embed_batch",
    "embed_batch_full",
    "detect_logit",
    "detect_prob",
    "class_logits",
    "scene_forward",
    "cosine_baseline_map",
]

DEFAULT_CHUNK = 256


@dataclass
class ModelSpec:
    """All architecture widths in one place."""

    bands: int
    patch_size: int = 5
    descr_dim: int = 64
    adapter_dim: int = 64
    embed_dim: int = 64
    state_dim: int = 16
    heads: int = 4
    blocks: int = 2
    prior_hidden: int = 128
    ff_mult: int = 2
    freq_low_ratio: float = 0.25
    freq_mid_ratio: float = 0.60
    freq_masking: bool = True
    n_way: int = 10

    def adapter_cfg(self) -> AdapterConfig:
        return AdapterConfig(
            bands=self.bands, patch_size=self.patch_size,
            descr_dim=self.descr_dim, out_dim=self.adapter_dim,
            state_dim=self.state_dim, freq_low_ratio=self.freq_low_ratio,
            freq_mid_ratio=self.freq_mid_ratio, freq_masking=self.freq_masking)

    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig(
            bands=self.bands, adapter_dim=self.adapter_dim,
            embed_dim=self.embed_dim, heads=self.heads, blocks=self.blocks,
            prior_hidden=self.prior_hidden, ff_mult=self.ff_mult,
            patch_size=self.patch_size)


def init_param_store(spec: ModelSpec, seed: int) -> ad.ParamStore:
    """Fresh parameters for every namespace, derived from one seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ad.ParamStore()
    init_adapter_params(store, spec.adapter_cfg(), rng)
    init_encoder_params(store, spec.encoder_cfg(), rng)
    store.add("cls/w", rng.uniform(-1, 1, size=(spec.n_way, spec.embed_dim))
              / np.sqrt(spec.embed_dim))
    store.add("det/w", rng.uniform(-1, 1, size=spec.embed_dim)
              / np.sqrt(spec.embed_dim))
    store.add("det/b", np.array(0.0))
    return store


def embed_batch_full(values: np.ndarray, store: ad.ParamStore,
                     spec: ModelSpec) -> tuple[ad.Tensor, ad.Tensor]:
    """Patch values (P, s, s, B) -> (embeddings (P, d_e), adapter features
    (P, d_ada)), one shared adapter pass, graph attached."""
    h_ada = adapter_forward(values, store, spec.adapter_cfg())
    p = values.shape[0]
    raw = values.reshape(p, -1, spec.bands)
    return backbone_encode(h_ada, raw, store, spec.encoder_cfg()), h_ada


def embed_batch(values: np.ndarray, store: ad.ParamStore,
                spec: ModelSpec) -> ad.Tensor:
    """Patch values (P, s, s, B) -> embeddings (P, d_e), graph attached."""
    return embed_batch_full(values, store, spec)[0]


def detect_logit(emb: ad.Tensor, store: ad.ParamStore) -> ad.Tensor:
    return emb @ store.node("det/w") + store.node("det/b")


def detect_prob(emb: ad.Tensor, store: ad.ParamStore) -> ad.Tensor:
    return ad.sigmoid(detect_logit(emb, store))


def class_logits(emb: ad.Tensor, store: ad.ParamStore) -> ad.Tensor:
    return emb @ ad.transpose(store.node("cls/w"), (1, 0))


def _chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def scene_forward(cube: HsiCube, store: ad.ParamStore, spec: ModelSpec,
                  want_prob: bool = True, want_embed: bool = False,
                  chunk: int = DEFAULT_CHUNK, threads: int = 1) -> dict:
    """Evaluate the model at every pixel without building gradients.

    Chunk boundaries depend only on (pixel count, chunk), and each chunk
    writes its own preassigned slice, so output bytes do not depend on
    the thread count. Returns {"prob": (H, W)} and/or
    {"embed": (H*W, d_e)}.
    """
    if chunk < 1 or threads < 1:
        raise ValidationError("chunk and threads must be >= 1")
    h, w = cube.data.shape[:2]
    n = h * w
    locs = np.column_stack(np.unravel_index(np.arange(n), (h, w)))
    prob = np.empty(n, dtype=np.float64) if want_prob else None
    emb = np.empty((n, spec.embed_dim), dtype=np.float64) if want_embed else None

    def run(bounds: tuple[int, int]) -> None:
        a, b = bounds
        values = extract_patch_block(cube, locs[a:b], spec.patch_size)
        e = embed_batch(values, store, spec)
        if emb is not None:
            emb[a:b] = e.data
        if prob is not None:
            prob[a:b] = detect_prob(e, store).data

    bounds = _chunk_bounds(n, chunk)
    if threads == 1:
        for bd in bounds:
            run(bd)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, bounds))
    out = {}
    if want_prob:
        out["prob"] = prob.reshape(h, w)
    if want_embed:
        out["embed"] = emb
    return out


def cosine_baseline_map(cube: HsiCube, t_prior: np.ndarray) -> np.ndarray:
    """Plain per-pixel cosine similarity against the raw prior spectrum,
    min-max normalized to [0, 1]; the reference detector with no learning."""
    t = np.asarray(t_prior, dtype=np.float64)
    data = cube.data.astype(np.float64)
    num = data @ t
    den = np.linalg.norm(data, axis=2) * np.linalg.norm(t)
    scores = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        scores = (scores - lo) / (hi - lo)
    else:
        scores = np.zeros_like(scores)
    return scores
