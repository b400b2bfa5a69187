"""Episodic meta-training with classification, detection, and prior losses.

Each iteration samples a batch of N-way K-shot episodes from the labeled
source scene and minimizes

    L_total = Loss_cl + beta * Loss_de + gamma * L_phy

over the query sets. Loss_de needs binary pseudo-labels on the source
domain; one episode class is drawn as the pseudo-target, its rectified
prototype scores the query set by cosine similarity, and the confident
quantile tails become the positive/negative sets (reduced quantiles
0.9/0.1; an episode whose tails come out empty simply contributes
Loss_de = 0). L_phy anchors the pseudo-target's support features to the
prior encoder's embedding of that class's prior spectrum.

Classes without a user-supplied prior use their scene-mean spectrum.
The loop is a pure function of (data, config, seed, initialization).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OptimConfig
from .encoders import physical_loss, prior_encode
from .hsio import Episode, HsiCube, LabelMap, ValidationError, sample_episode
from .pipeline import ModelSpec, class_logits, detect_prob, embed_batch_full
from .tta import (DegenerateSetsError, PseudoLabelSets, cosine_scores,
                  select_pseudo_labels)

__all__ = [
    "TrainConfig",
    "loss_cl",
    "loss_de",
    "total_loss",
    "class_mean_priors",
    "meta_train_run",
    "single_episode_loss",
    "write_trace",
]


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_episodes: int = 32
    n_way: int = 10
    k_shot: int = 2
    query_count: int = 15          # query pixels per class per episode
    det_weight: float = 1.0        # beta
    phys_weight: float = 0.1       # gamma
    support_blend: float = 0.7     # lambda in the rectified prototype
    pseudo_q_pos: float = 0.9
    pseudo_q_neg: float = 0.1
    target_bias: float = 0.8       # pseudo-target pull toward priored classes
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_episodes < 1:
            raise ValidationError("iterations >= 0 and batch_episodes >= 1")
        if self.det_weight < 0 or self.phys_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if not (0.0 <= self.support_blend <= 1.0):
            raise ValidationError("support_blend must lie in [0, 1]")
        if not (0.0 <= self.target_bias <= 1.0):
            raise ValidationError("target_bias must lie in [0, 1]")
        if min(self.n_way, self.k_shot) < 1 or self.query_count < 1:
            raise ValidationError("episode shape fields must be >= 1")


def loss_cl(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy of query logits against episode-local labels."""
    labels = np.asarray(labels, dtype=np.intp)
    m, n = logits.shape
    if labels.shape != (m,):
        raise ValidationError("one label per query row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValidationError(f"labels must lie in 0..{n - 1}")
    onehot = np.zeros((m, n))
    onehot[np.arange(m), labels] = 1.0
    picked = ad.reduce_sum(ad.log_softmax(logits, axis=1) * ad.constant(onehot),
                           axis=1)
    return ad.neg(ad.reduce_mean(picked))


def loss_de(probs: ad.Tensor, pseudo: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy after clamping probabilities to
    [1e-7, 1 - 1e-7]."""
    y = np.asarray(pseudo, dtype=np.float64)
    if y.size == 0:
        raise ValidationError("detection loss needs at least one sample")
    p = ad.clip(probs, 1e-7, 1.0 - 1e-7)
    per = ad.neg(ad.constant(y) * ad.log(p)
                 + ad.constant(1.0 - y) * ad.log(1.0 - p))
    return ad.reduce_mean(per)


def total_loss(l_cl: ad.Tensor, l_de: ad.Tensor, l_phy: ad.Tensor,
               beta: float, gamma: float) -> ad.Tensor:
    return l_cl + beta * l_de + gamma * l_phy


def class_mean_priors(cube: HsiCube, labels: LabelMap) -> dict[int, np.ndarray]:
    """Scene-mean spectrum per labeled class, the fallback prior source."""
    data = cube.data.astype(np.float64)
    out = {}
    for cid in labels.class_ids():
        mask = labels.labels == cid
        out[int(cid)] = data[mask].mean(axis=0)
    return out


def meta_train_run(cube: HsiCube, labels: LabelMap, cfg: TrainConfig,
                   store: ad.ParamStore, spec: ModelSpec,
                   priors: dict[int, np.ndarray] | None = None,
                   trace_path=None) -> list[dict]:
    """Train all non-frozen namespaces episodically; returns the loss trace.

    priors maps original class ids to prior spectra; classes it does not
    cover fall back to their scene-mean spectrum.
    """
    cfg.validate()
    if spec.n_way != cfg.n_way:
        raise ValidationError("model head way count must match episode N")
    merged_priors = class_mean_priors(cube, labels)
    for cid, t in (priors or {}).items():
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (cube.bands,):
            raise ValidationError(f"prior for class {cid} has wrong length")
        merged_priors[int(cid)] = t

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5EED)))
    n_sup = cfg.n_way * cfg.k_shot
    m_query = cfg.query_count * cfg.n_way
    trace: list[dict] = []

    priored = {int(c) for c in (priors or {})}

    for it in range(cfg.iterations):
        episodes = []
        for _ in range(cfg.batch_episodes):
            ep_seed = int(rng.integers(0, 2 ** 63))
            ep = sample_episode(cube, labels, cfg.n_way, cfg.k_shot, m_query,
                                ep_seed, patch_size=spec.patch_size)
            # detection head benefits from a consistent pseudo-target, so
            # classes with user-supplied priors get extra sampling mass
            named = np.flatnonzero(np.isin(ep.class_ids, sorted(priored)))
            if named.size and rng.random() < cfg.target_bias:
                target_slot = int(named[rng.integers(named.size)])
            else:
                target_slot = int(rng.integers(cfg.n_way))
            episodes.append((ep, target_slot))

        # one shared embedding pass over every patch in the batch
        all_values = np.concatenate(
            [ep.support_values for ep, _ in episodes]
            + [ep.query_values for ep, _ in episodes])
        emb, h_ada = embed_batch_full(all_values, store, spec)
        sup_base = 0
        qry_base = n_sup * len(episodes)

        cl_terms, de_terms, phy_terms = [], [], []
        for e_idx, (ep, target_slot) in enumerate(episodes):
            sup_lo = sup_base + e_idx * n_sup
            qry_lo = qry_base + e_idx * m_query
            qry_emb = ad.take(emb, np.arange(qry_lo, qry_lo + m_query))
            cl_terms.append(loss_cl(class_logits(qry_emb, store),
                                    ep.query_labels))

            # pseudo-target bookkeeping for the detection and prior losses
            target_cid = int(ep.class_ids[target_slot])
            t_prior = merged_priors[target_cid]
            e_prior = prior_encode(t_prior, store)
            sup_idx = np.flatnonzero(ep.support_labels == target_slot) + sup_lo
            sup_emb = ad.take(emb, sup_idx)
            proto = (cfg.support_blend * sup_emb.data.mean(axis=0)
                     + (1.0 - cfg.support_blend) * e_prior.data)
            sims = cosine_scores(qry_emb.data, proto)
            try:
                sets = select_pseudo_labels(sims, cfg.pseudo_q_pos,
                                            cfg.pseudo_q_neg)
                omega = np.concatenate([sets.omega_pos, sets.omega_neg])
                pseudo = np.concatenate([np.ones(sets.omega_pos.size),
                                         np.zeros(sets.omega_neg.size)])
                probs = detect_prob(ad.take(qry_emb, omega), store)
                de_terms.append(loss_de(probs, pseudo))
            except DegenerateSetsError:
                de_terms.append(ad.constant(0.0))

            # L_phy on the pseudo-target's support adapter features
            h_sup = ad.take(h_ada, sup_idx)
            phy_terms.append(physical_loss(h_sup, store, e_prior))

        k = 1.0 / len(episodes)
        l_cl_b = ad.reduce_sum(ad.concat(
            [ad.reshape(t, (1,)) for t in cl_terms])) * k
        l_de_b = ad.reduce_sum(ad.concat(
            [ad.reshape(t, (1,)) for t in de_terms])) * k
        l_phy_b = ad.reduce_sum(ad.concat(
            [ad.reshape(t, (1,)) for t in phy_terms])) * k
        l_total = total_loss(l_cl_b, l_de_b, l_phy_b,
                             cfg.det_weight, cfg.phys_weight)
        ad.backward_gradients(l_total, store)
        ad.adamw_update(store, cfg.optim)
        trace.append({"iteration": it, "loss_cl": l_cl_b.item(),
                      "loss_de": l_de_b.item(), "loss_phy": l_phy_b.item(),
                      "loss_total": l_total.item()})

    if trace_path is not None:
        write_trace(trace, trace_path)
    return trace


def single_episode_loss(episode: Episode, target_slot: int,
                        t_prior: np.ndarray, store: ad.ParamStore,
                        spec: ModelSpec, cfg: TrainConfig,
                        pseudo_sets: PseudoLabelSets | None = None
                        ) -> ad.Tensor:
    """The complete training objective of one episode as a single graph.

    Same composition as one meta_train_run episode at batch size one;
    meant for gradient audits, where the builder is re-run per probe.
    pseudo_sets pins the detection-loss index sets; pass the base-point
    selection when probing, because selection is a constant of the graph
    and must not re-run under perturbed parameters.
    """
    if not (0 <= target_slot < episode.n_way):
        raise ValidationError("target slot outside episode way count")
    values = np.concatenate([episode.support_values, episode.query_values])
    emb, h_ada = embed_batch_full(values, store, spec)
    n_sup = episode.support_values.shape[0]
    m_query = episode.query_values.shape[0]
    qry_emb = ad.take(emb, np.arange(n_sup, n_sup + m_query))
    l_cl = loss_cl(class_logits(qry_emb, store), episode.query_labels)

    e_prior = prior_encode(np.asarray(t_prior, dtype=np.float64), store)
    sup_idx = np.flatnonzero(episode.support_labels == target_slot)
    sets = pseudo_sets
    if sets is None:
        sup_emb = ad.take(emb, sup_idx)
        proto = (cfg.support_blend * sup_emb.data.mean(axis=0)
                 + (1.0 - cfg.support_blend) * e_prior.data)
        sims = cosine_scores(qry_emb.data, proto)
        try:
            sets = select_pseudo_labels(sims, cfg.pseudo_q_pos,
                                        cfg.pseudo_q_neg)
        except DegenerateSetsError:
            sets = None
    if sets is None:
        l_de = ad.constant(0.0)
    else:
        omega = np.concatenate([sets.omega_pos, sets.omega_neg])
        pseudo = np.concatenate([np.ones(sets.omega_pos.size),
                                 np.zeros(sets.omega_neg.size)])
        l_de = loss_de(detect_prob(ad.take(qry_emb, omega), store), pseudo)

    l_phy = physical_loss(ad.take(h_ada, sup_idx), store, e_prior)
    return total_loss(l_cl, l_de, l_phy, cfg.det_weight, cfg.phys_weight)


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss_cl", "loss_de", "loss_phy",
                         "loss_total"])
        for row in trace:
            writer.writerow([row["iteration"], f"{row['loss_cl']:.10g}",
                             f"{row['loss_de']:.10g}",
                             f"{row['loss_phy']:.10g}",
                             f"{row['loss_total']:.10g}"])
