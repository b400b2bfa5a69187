"""Frequency-aware spectral/spatial adapter.

Two branches read an s x s x B patch. The spectral branch applies an
orthonormal DCT along the band axis, splits coefficients into low, mid,
and high frequency groups by hard masks, encodes each group, and blends
the three descriptors with softmax attention weights. The spatial branch
runs a selective state-space scan over the s*s spectral tokens in linear
time. A cross-gated fusion head mixes the two branch features into the
adapter output h_ada.

All trainable tensors live in a ParamStore under the "dctma/" namespace.
Functions prefixed with an underscore build autodiff graphs; the public
single-patch ops mirror them in plain numpy for direct inspection.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .hsio import Patch, ValidationError

__all__ = [
    "AdapterConfig",
    "FreqPartition",
    "dct_matrix",
    "dct_spectral",
    "build_partition",
    "group_encode",
    "spectral_gate",
    "zoh_discretize",
    "selective_scan",
    "init_adapter_params",
    "adapter_forward",
    "dctma_forward",
]

ZOH_SMALL = 1e-6
# softplus(b) = 0.1 at this bias, setting the initial step size of the scan
DELTA_BIAS_INIT = float(np.log(np.expm1(0.1)))


@dataclass
class AdapterConfig:
    """Widths and frequency split of the adapter."""

    bands: int
    patch_size: int = 5
    descr_dim: int = 64       # per-group spectral descriptor width d
    out_dim: int = 64         # adapter output width d_ada
    state_dim: int = 16       # scan state size per channel
    freq_low_ratio: float = 0.25
    freq_mid_ratio: float = 0.60
    freq_masking: bool = True

    def validate(self) -> None:
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ValidationError("patch_size must be odd and positive")
        if min(self.bands, self.descr_dim, self.out_dim, self.state_dim) < 1:
            raise ValidationError("adapter widths must be >= 1")
        if not (0.0 < self.freq_low_ratio < self.freq_mid_ratio < 1.0):
            raise ValidationError("need 0 < low ratio < mid ratio < 1")


@dataclass
class FreqPartition:
    """Disjoint low/mid/high frequency index sets covering 0..B-1."""

    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray

    def masks(self, bands: int) -> np.ndarray:
        """Three 0/1 selector vectors, rows summing to the all-ones vector."""
        m = np.zeros((3, bands))
        for row, idx in enumerate((self.low, self.mid, self.high)):
            m[row, idx] = 1.0
        return m


@lru_cache(maxsize=8)
def dct_matrix(bands: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D with f = D @ x; D @ D.T = I."""
    k = np.arange(bands)[:, None]
    n = np.arange(bands)[None, :]
    mat = np.cos(np.pi * (2 * n + 1) * k / (2 * bands))
    mat *= np.sqrt(2.0 / bands)
    mat[0] *= np.sqrt(0.5)
    return mat


def dct_spectral(patch: Patch) -> np.ndarray:
    """DCT down each spectral column; returns coefficients (B, s*s)."""
    s, _, b = patch.values.shape
    cols = patch.values.reshape(s * s, b).T
    return dct_matrix(b) @ cols


def build_partition(bands: int, low_ratio: float, mid_ratio: float) -> FreqPartition:
    """Split 0..B-1 into low/mid/high by the floor rule on the two ratios."""
    if not (0.0 < low_ratio < mid_ratio < 1.0):
        raise ValidationError("need 0 < low ratio < mid ratio < 1")
    n_low = int(np.floor(low_ratio * bands))
    n_midend = int(np.floor(mid_ratio * bands))
    low = np.arange(0, n_low)
    mid = np.arange(n_low, n_midend)
    high = np.arange(n_midend, bands)
    for name, idx in (("low", low), ("mid", mid), ("high", high)):
        if idx.size == 0:
            raise ValidationError(f"empty {name} frequency group for B={bands}")
    return FreqPartition(low, mid, high)


def group_encode(coeffs: np.ndarray, partition: FreqPartition,
                 weights: list[np.ndarray]) -> list[np.ndarray]:
    """Per group: mask, project each token, rectify, mean-pool over tokens.

    coeffs is (B, s*s); weights holds three (B, d) matrices. Returns three
    (d,) descriptors.
    """
    bands = coeffs.shape[0]
    masks = partition.masks(bands)
    out = []
    for mask, w in zip(masks, weights):
        tokens = np.maximum((mask[:, None] * coeffs).T @ w, 0.0)
        out.append(tokens.mean(axis=0))
    return out


def spectral_gate(z_low: np.ndarray, z_mid: np.ndarray, z_high: np.ndarray,
                  w_att: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted blend of the three group descriptors."""
    z = np.stack([z_low, z_mid, z_high])
    scores = z @ w_att
    shifted = np.exp(scores - scores.max())
    alpha = shifted / shifted.sum()
    return alpha, alpha @ z


def zoh_discretize(a_diag: np.ndarray, delta: float | np.ndarray,
                   b_coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold step: abar = exp(delta*a), bbar = ((exp(delta*a)-1)/a)*b.

    Takes the limit bbar = delta*b where |delta*a| < 1e-6.
    """
    a_diag = np.asarray(a_diag, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b_coef = np.asarray(b_coef, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValidationError("discretization step must be > 0")
    u = delta * a_diag
    abar = np.exp(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.expm1(u) / a_diag
    phi = np.where(np.abs(u) < ZOH_SMALL, delta * np.ones_like(u), phi)
    return abar, phi * b_coef


# ---------------------------------------------------------------------------
# parameter registration


def _fanin_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_adapter_params(store: ad.ParamStore, cfg: AdapterConfig,
                        rng: np.random.Generator) -> None:
    """Register every adapter tensor under "dctma/"."""
    cfg.validate()
    b, d, n = cfg.bands, cfg.descr_dim, cfg.state_dim
    for g in ("low", "mid", "high"):
        store.add(f"dctma/spec_w_{g}", _fanin_uniform(rng, (b, d)))
    store.add("dctma/spec_w_att", rng.uniform(-1, 1, size=d) / np.sqrt(d))
    store.add("dctma/ssm_a_log", np.log(np.arange(1, n + 1, dtype=np.float64)))
    store.add("dctma/ssm_w_delta", _fanin_uniform(rng, (b, 1)).reshape(b))
    store.add("dctma/ssm_b_delta", np.array(DELTA_BIAS_INIT))
    store.add("dctma/ssm_w_b", _fanin_uniform(rng, (b, n)))
    store.add("dctma/ssm_b_b", np.zeros(n))
    store.add("dctma/ssm_w_c", _fanin_uniform(rng, (b, n)))
    store.add("dctma/ssm_b_c", np.zeros(n))
    d_f = cfg.out_dim
    store.add("dctma/fuse_proj_spec_w", _fanin_uniform(rng, (d, d_f)))
    store.add("dctma/fuse_proj_spec_b", np.zeros(d_f))
    store.add("dctma/fuse_proj_spa_w", _fanin_uniform(rng, (b, d_f)))
    store.add("dctma/fuse_proj_spa_b", np.zeros(d_f))
    store.add("dctma/fuse_gate_spa2spec_w", _fanin_uniform(rng, (d_f, d_f)))
    store.add("dctma/fuse_gate_spa2spec_b", np.zeros(d_f))
    store.add("dctma/fuse_gate_spec2spa_w", _fanin_uniform(rng, (d_f, d_f)))
    store.add("dctma/fuse_gate_spec2spa_b", np.zeros(d_f))
    store.add("dctma/fuse_out_w", _fanin_uniform(rng, (2 * d_f, cfg.out_dim)))
    store.add("dctma/fuse_out_b", np.zeros(cfg.out_dim))


# ---------------------------------------------------------------------------
# graph-building forward


def selective_scan(tokens: ad.Tensor, store: ad.ParamStore) -> ad.Tensor:
    """Scan branch: per-token step size and coefficients from learned maps,
    one forward recurrence, mean of the emitted outputs.

    tokens is (P, T, B); returns (P, B).
    """
    w_delta = ad.reshape(store.node("dctma/ssm_w_delta"), (-1, 1))
    delta_pre = tokens @ w_delta + store.node("dctma/ssm_b_delta")
    delta = ad.softplus(ad.reshape(delta_pre, tokens.shape[:2]))
    b_in = tokens @ store.node("dctma/ssm_w_b") + store.node("dctma/ssm_b_b")
    c_out = tokens @ store.node("dctma/ssm_w_c") + store.node("dctma/ssm_b_c")
    a_diag = ad.neg(ad.exp(store.node("dctma/ssm_a_log")))
    y = ad.state_scan(tokens, delta, b_in, c_out, a_diag)
    return ad.reduce_mean(y, axis=1)


def adapter_forward(values: np.ndarray, store: ad.ParamStore,
                    cfg: AdapterConfig) -> ad.Tensor:
    """Adapter features for a batch of patches.

    values is (P, s, s, B) float64; returns the graph node of shape
    (P, d_ada). Deterministic given (values, parameters).
    """
    cfg.validate()
    if values.ndim != 4 or values.shape[3] != cfg.bands:
        raise ValidationError(
            f"expected (P, s, s, {cfg.bands}) patches, got {values.shape}")
    p = values.shape[0]
    t = values.shape[1] * values.shape[2]
    tokens_np = values.reshape(p, t, cfg.bands)
    tokens = ad.constant(tokens_np)

    # spectral branch: DCT along bands, hard-masked groups, gated blend
    coeffs = tokens @ ad.constant(dct_matrix(cfg.bands).T)
    partition = build_partition(cfg.bands, cfg.freq_low_ratio, cfg.freq_mid_ratio)
    masks = (partition.masks(cfg.bands) if cfg.freq_masking
             else np.ones((3, cfg.bands)))
    descr = []
    for row, g in enumerate(("low", "mid", "high")):
        masked = coeffs * ad.constant(masks[row])
        z_tok = ad.relu(masked @ store.node(f"dctma/spec_w_{g}"))
        descr.append(ad.reduce_mean(z_tok, axis=1))       # (P, d)
    w_att = ad.reshape(store.node("dctma/spec_w_att"), (-1, 1))
    scores = ad.concat([dz @ w_att for dz in descr], axis=1)   # (P, 3)
    alpha = ad.softmax(scores, axis=1)
    e_spec = None
    for g_idx, dz in enumerate(descr):
        term = dz * ad.take(alpha, [g_idx], axis=1)
        e_spec = term if e_spec is None else e_spec + term

    # spatial branch: selective scan over the s*s spectral tokens
    e_spa = selective_scan(tokens, store)

    # cross-gated fusion
    et_spec = (e_spec @ store.node("dctma/fuse_proj_spec_w")
               + store.node("dctma/fuse_proj_spec_b"))
    et_spa = (e_spa @ store.node("dctma/fuse_proj_spa_w")
              + store.node("dctma/fuse_proj_spa_b"))
    gate_spec = ad.sigmoid(et_spa @ store.node("dctma/fuse_gate_spa2spec_w")
                           + store.node("dctma/fuse_gate_spa2spec_b"))
    gate_spa = ad.sigmoid(et_spec @ store.node("dctma/fuse_gate_spec2spa_w")
                          + store.node("dctma/fuse_gate_spec2spa_b"))
    h_spec = et_spec * gate_spec
    h_spa = et_spa * gate_spa
    fused = ad.concat([h_spec, h_spa], axis=1)
    return fused @ store.node("dctma/fuse_out_w") + store.node("dctma/fuse_out_b")


def dctma_forward(patch: Patch, store: ad.ParamStore,
                  cfg: AdapterConfig) -> np.ndarray:
    """Adapter feature of a single patch as a plain (d_ada,) array."""
    out = adapter_forward(patch.values[None], store, cfg)
    return out.data[0]
