"""Test-time adaptation from pseudo-labels on the target scene.

A coarse cosine-similarity map against the rectified prototype picks
high-confidence positive and negative pixel sets by quantile thresholds;
the uncertain band in between is discarded. Each selected patch gets one
augmented view per iteration (random 90-degree rotation, independent
coin-flip mirrorings, additive Gaussian noise), and the class-balanced
binary cross-entropy plus a prediction-consistency penalty is minimized
over the adapter and detection-head parameters only. Everything else
stays frozen and is restored bit-exactly afterwards.

Augmentation draws are keyed by (seed, iteration, pixel index), so the
evaluation order of selected pixels can never change the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OptimConfig
from .hsio import HsiCube, ValidationError, extract_patch_block
from .pipeline import ModelSpec, detect_prob, embed_batch, scene_forward

__all__ = [
    "PseudoLabelSets",
    "AugmentConfig",
    "TtaConfig",
    "DegenerateSetsError",
    "cosine_scores",
    "similarity_map",
    "select_pseudo_labels",
    "augment",
    "loss_wbce",
    "loss_self",
    "tta_adapt",
    "normalize_map",
]

TTA_FROZEN = ("backbone/", "prior/", "align/", "cls/")


class DegenerateSetsError(ValidationError):
    """Both or either pseudo-label set came out empty."""


@dataclass
class PseudoLabelSets:
    """Confident flat pixel indices with the thresholds that chose them."""

    omega_pos: np.ndarray
    omega_neg: np.ndarray
    tau_pos: float
    tau_neg: float
    q_pos: float
    q_neg: float


@dataclass
class AugmentConfig:
    """Hybrid augmentation: k*90 rotation, coin-flip mirrors, noise."""

    noise_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.noise_std < 0:
            raise ValidationError("augment noise std must be >= 0")


@dataclass
class TtaConfig:
    iterations: int = 50
    consistency_weight: float = 0.4     # eta
    quantile_pos: float = 0.95
    quantile_neg: float = 0.05
    refresh_every: int = 10
    noise_std: float = 0.01
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    chunk: int = 256
    threads: int = 1

    def validate(self) -> None:
        if not (0.0 <= self.quantile_neg < self.quantile_pos <= 1.0):
            raise ValidationError("need 0 <= q_neg < q_pos <= 1")
        if self.consistency_weight < 0 or self.iterations < 0:
            raise ValidationError("eta and iterations must be >= 0")
        if self.refresh_every < 1:
            raise ValidationError("refresh_every must be >= 1")


def cosine_scores(embeddings: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Cosine similarity of each row against the prototype; zero-norm rows
    score 0. Errors on a zero-norm prototype."""
    p = np.asarray(prototype, dtype=np.float64)
    p_norm = np.linalg.norm(p)
    if p_norm == 0.0:
        raise ValidationError("prototype has zero norm")
    e = np.asarray(embeddings, dtype=np.float64)
    e_norm = np.linalg.norm(e, axis=-1)
    num = e @ p
    den = e_norm * p_norm
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def similarity_map(cube: HsiCube, store: ad.ParamStore, spec: ModelSpec,
                   prototype: np.ndarray, chunk: int = 256,
                   threads: int = 1) -> np.ndarray:
    """Per-pixel cosine between scene embeddings and the prototype."""
    out = scene_forward(cube, store, spec, want_prob=False, want_embed=True,
                        chunk=chunk, threads=threads)
    h, w = cube.data.shape[:2]
    return cosine_scores(out["embed"], prototype).reshape(h, w)


def select_pseudo_labels(scores: np.ndarray, q_pos: float,
                         q_neg: float) -> PseudoLabelSets:
    """Quantile-threshold the flattened map; strict inequalities on both
    sides, the band between the thresholds is discarded."""
    if not (0.0 <= q_neg < q_pos <= 1.0):
        raise ValidationError("need 0 <= q_neg < q_pos <= 1")
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValidationError("empty score map")
    tau_pos = float(np.quantile(flat, q_pos))
    tau_neg = float(np.quantile(flat, q_neg))
    omega_pos = np.flatnonzero(flat > tau_pos)
    omega_neg = np.flatnonzero(flat < tau_neg)
    if omega_pos.size == 0 or omega_neg.size == 0:
        raise DegenerateSetsError(
            f"degenerate pseudo-sets: |pos|={omega_pos.size}, "
            f"|neg|={omega_neg.size}")
    return PseudoLabelSets(omega_pos, omega_neg, tau_pos, tau_neg, q_pos, q_neg)


def augment(values: np.ndarray, cfg: AugmentConfig,
            iteration: int, pixel_index: int) -> np.ndarray:
    """One augmented view of an s x s x B patch, keyed by
    (cfg.seed, iteration, pixel_index)."""
    cfg.validate()
    if values.ndim != 3 or values.shape[0] != values.shape[1]:
        raise ValidationError("augment expects a square s x s x B patch")
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, iteration, pixel_index)))
    k = int(rng.integers(4))
    flips = rng.random(2) < 0.5
    out = np.rot90(values, k, axes=(0, 1))
    if flips[0]:
        out = out[::-1, :, :]
    if flips[1]:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out, dtype=np.float64)
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    return out


def loss_wbce(probs: ad.Tensor, pseudo: np.ndarray) -> ad.Tensor:
    """Class-rebalanced binary cross-entropy.

    Weights omega_i = |Omega| / (2 |Omega_class(i)|) make the two classes
    contribute exactly equal total weight regardless of their sizes.
    """
    y = np.asarray(pseudo, dtype=np.float64)
    n_pos = float(y.sum())
    n_neg = float(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("weighted BCE needs both classes present")
    total = y.size
    weights = np.where(y == 1.0, total / (2.0 * n_pos), total / (2.0 * n_neg))
    p = ad.clip(probs, 1e-7, 1.0 - 1e-7)
    per = ad.neg(ad.constant(y) * ad.log(p)
                 + ad.constant(1.0 - y) * ad.log(1.0 - p))
    return ad.reduce_mean(per * ad.constant(weights))


def loss_self(p_orig: ad.Tensor, p_aug: ad.Tensor) -> ad.Tensor:
    """Mean squared difference between paired predictions."""
    if p_orig.shape != p_aug.shape:
        raise ValidationError("consistency loss needs paired predictions")
    diff = p_orig - p_aug
    return ad.reduce_mean(diff * diff)


def normalize_map(scores: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        return (scores - lo) / (hi - lo)
    return np.zeros_like(scores)


def tta_adapt(cube: HsiCube, prototype: np.ndarray, store: ad.ParamStore,
              spec: ModelSpec, cfg: TtaConfig) -> tuple[np.ndarray, dict]:
    """Adapt the detector to one target scene from its own pseudo-labels.

    Mutates only the "dctma/" and "det/" entries of the store; every other
    namespace (and every freeze flag) is restored bit-exactly. Returns the
    min-max normalized detection map and a diagnostics dict with the loss
    trajectory and selected-set sizes.
    """
    cfg.validate()
    h, w = cube.data.shape[:2]
    flag_snapshot = store.freeze_flags()
    for prefix in TTA_FROZEN:
        store.set_frozen(prefix, True)
    store.reset_optimizer_state()
    aug_cfg = AugmentConfig(noise_std=cfg.noise_std, seed=cfg.seed)
    diag = {"pseudo_counts": [], "loss_wbce": [], "loss_self": [],
            "loss_total": []}
    try:
        scores = similarity_map(cube, store, spec, prototype,
                                chunk=cfg.chunk, threads=cfg.threads)
        sets = select_pseudo_labels(scores, cfg.quantile_pos, cfg.quantile_neg)
        omega = np.concatenate([sets.omega_pos, sets.omega_neg])
        pseudo = np.concatenate([np.ones(sets.omega_pos.size),
                                 np.zeros(sets.omega_neg.size)])
        locs = np.column_stack(np.unravel_index(omega, (h, w)))
        patches = extract_patch_block(cube, locs, spec.patch_size)
        diag["pseudo_counts"].append((sets.omega_pos.size, sets.omega_neg.size))

        for it in range(cfg.iterations):
            if it > 0 and it % cfg.refresh_every == 0:
                scores = similarity_map(cube, store, spec, prototype,
                                        chunk=cfg.chunk, threads=cfg.threads)
                try:
                    sets = select_pseudo_labels(scores, cfg.quantile_pos,
                                                cfg.quantile_neg)
                    omega = np.concatenate([sets.omega_pos, sets.omega_neg])
                    pseudo = np.concatenate([np.ones(sets.omega_pos.size),
                                             np.zeros(sets.omega_neg.size)])
                    locs = np.column_stack(np.unravel_index(omega, (h, w)))
                    patches = extract_patch_block(cube, locs, spec.patch_size)
                except DegenerateSetsError:
                    pass   # keep the previous confident sets
                diag["pseudo_counts"].append(
                    (sets.omega_pos.size, sets.omega_neg.size))
            aug_patches = np.stack([
                augment(patches[k], aug_cfg, it, int(omega[k]))
                for k in range(len(omega))])
            both = np.concatenate([patches, aug_patches])
            emb = embed_batch(both, store, spec)
            probs = detect_prob(emb, store)
            p_orig = ad.take(probs, np.arange(len(omega)))
            p_aug = ad.take(probs, np.arange(len(omega), 2 * len(omega)))
            l_w = loss_wbce(p_orig, pseudo)
            l_s = loss_self(p_orig, p_aug)
            total = l_w + cfg.consistency_weight * l_s
            ad.backward_gradients(total, store)
            ad.adamw_update(store, cfg.optim)
            diag["loss_wbce"].append(l_w.item())
            diag["loss_self"].append(l_s.item())
            diag["loss_total"].append(total.item())

        final = scene_forward(cube, store, spec, want_prob=True,
                              chunk=cfg.chunk, threads=cfg.threads)["prob"]
    finally:
        store.restore_freeze_flags(flag_snapshot)
    return normalize_map(final), diag
