"""Episodic training losses, the training loop, and its trace output."""

import numpy as np
import pytest

from specdetect import autodiff as ad
from specdetect.hsio import (SynthConfig, ValidationError, random_prior,
                             sample_episode, synth_scene)
from specdetect.metatrain import (TrainConfig, class_mean_priors, loss_cl,
                                  loss_de, meta_train_run,
                                  single_episode_loss, total_loss, write_trace)
from specdetect.pipeline import ModelSpec, init_param_store


def quick_cfg(iterations=2, seed=0, **kw):
    kw.setdefault("batch_episodes", 2)
    kw.setdefault("n_way", 3)
    kw.setdefault("k_shot", 1)
    kw.setdefault("query_count", 4)
    return TrainConfig(iterations=iterations, seed=seed, **kw)


# -- classification loss -------------------------------------------------------


def test_loss_cl_single_class_is_zero():
    logits = ad.constant(np.array([[3.7], [-2.0]]))
    loss = loss_cl(logits, np.array([0, 0]))
    assert abs(loss.item()) < 1e-12


def test_loss_cl_uniform_logits():
    logits = ad.constant(np.zeros((4, 10)))
    loss = loss_cl(logits, np.array([0, 3, 5, 9]))
    assert abs(loss.item() - np.log(10.0)) < 1e-12


def test_loss_cl_confident_margin():
    logits = np.zeros((3, 5))
    labels = np.array([0, 2, 4])
    logits[np.arange(3), labels] = 20.0
    assert loss_cl(ad.constant(logits), labels).item() < 1e-8


def test_loss_cl_label_range_check():
    logits = ad.constant(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        loss_cl(logits, np.array([0, 3]))
    with pytest.raises(ValidationError):
        loss_cl(logits, np.array([-1, 0]))


# -- detection loss --------------------------------------------------------------


def test_loss_de_exact_predictions():
    probs = ad.constant(np.array([1.0, 0.0, 1.0]))
    labels = np.array([1.0, 0.0, 1.0])
    assert loss_de(probs, labels).item() <= 1e-6


def test_loss_de_coin_flip():
    probs = ad.constant(np.full(6, 0.5))
    labels = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    assert abs(loss_de(probs, labels).item() - np.log(2.0)) < 1e-12


def test_loss_de_single_sample():
    loss = loss_de(ad.constant(np.array([0.8])), np.array([1.0]))
    assert abs(loss.item() - 0.22314355) < 1e-6


def test_loss_de_empty_rejected():
    with pytest.raises(ValidationError):
        loss_de(ad.constant(np.zeros(0)), np.zeros(0))


# -- total objective -------------------------------------------------------------


def test_total_loss_weights():
    one = ad.constant(1.0)
    two = ad.constant(2.0)
    three = ad.constant(3.0)
    assert total_loss(one, two, three, beta=0.0, gamma=0.0).item() == 1.0
    got = total_loss(one, two, three, beta=1.0, gamma=0.1).item()
    assert abs(got - 3.3) < 1e-12


def test_total_loss_monotone():
    base = total_loss(ad.constant(1.0), ad.constant(1.0), ad.constant(1.0),
                      beta=0.5, gamma=0.5).item()
    for bumped in ((2.0, 1.0, 1.0), (1.0, 2.0, 1.0), (1.0, 1.0, 2.0)):
        got = total_loss(*(ad.constant(v) for v in bumped),
                         beta=0.5, gamma=0.5).item()
        assert got > base


# -- training loop ----------------------------------------------------------------


def make_source(seed=3):
    cfg = SynthConfig(height=20, width=20, bands=12, background_classes=4,
                      implant_count=10, seed=seed)
    prior = random_prior(12, seed=seed)
    cube, labels, _ = synth_scene(cfg, [prior])
    return cube, labels, prior


def source_spec():
    return ModelSpec(bands=12, patch_size=3, descr_dim=8, adapter_dim=8,
                     embed_dim=8, state_dim=4, heads=2, blocks=1,
                     prior_hidden=8, n_way=3)


def test_meta_train_zero_iterations_keeps_initialization():
    cube, labels, prior = make_source()
    spec = source_spec()
    store = init_param_store(spec, seed=4)
    before = {n: store.value(n).tobytes() for n in store.names()}
    trace = meta_train_run(cube, labels, quick_cfg(iterations=0), store,
                           spec, priors={5: prior.t_prior})
    assert trace == []
    for name in store.names():
        assert store.value(name).tobytes() == before[name]


def test_meta_train_respects_frozen_namespace():
    cube, labels, prior = make_source()
    spec = source_spec()
    store = init_param_store(spec, seed=5)
    store.set_frozen("backbone/", True)
    before = {n: store.value(n).tobytes() for n in store.names()
              if n.startswith("backbone/")}
    meta_train_run(cube, labels, quick_cfg(iterations=3, seed=1), store,
                   spec, priors={5: prior.t_prior})
    for name, blob in before.items():
        assert store.value(name).tobytes() == blob, name


def test_meta_train_deterministic():
    cube, labels, prior = make_source()
    spec = source_spec()

    def run():
        store = init_param_store(spec, seed=6)
        trace = meta_train_run(cube, labels, quick_cfg(iterations=3, seed=2),
                               store, spec, priors={5: prior.t_prior})
        return trace, {n: store.value(n).tobytes() for n in store.names()}

    trace_a, params_a = run()
    trace_b, params_b = run()
    assert trace_a == trace_b
    assert params_a == params_b


def test_meta_train_trace_schema_and_nonnegative_losses():
    cube, labels, prior = make_source()
    spec = source_spec()
    store = init_param_store(spec, seed=7)
    cfg = quick_cfg(iterations=3, seed=3)
    trace = meta_train_run(cube, labels, cfg, store, spec,
                           priors={5: prior.t_prior})
    assert len(trace) == 3
    for i, row in enumerate(trace):
        assert row["iteration"] == i
        assert row["loss_cl"] >= 0.0
        assert row["loss_de"] >= 0.0
        assert row["loss_total"] >= row["loss_cl"]


def test_meta_train_way_count_must_match_head():
    cube, labels, prior = make_source()
    spec = source_spec()
    store = init_param_store(spec, seed=8)
    with pytest.raises(ValidationError):
        meta_train_run(cube, labels, quick_cfg(n_way=4), store, spec,
                       priors={5: prior.t_prior})


def test_meta_train_loss_decreases_over_300_iterations():
    # seeded medium run: classification loss must trend down
    cube, labels, prior = make_source(seed=7)
    spec = source_spec()
    store = init_param_store(spec, seed=7)
    cfg = TrainConfig(iterations=300, batch_episodes=2, n_way=3, k_shot=1,
                      query_count=4, seed=7)
    trace = meta_train_run(cube, labels, cfg, store, spec,
                           priors={5: prior.t_prior})
    cl = np.array([row["loss_cl"] for row in trace])
    assert cl[-50:].mean() < cl[:50].mean()


def test_single_episode_loss_gradient_audit():
    cube, labels, prior = make_source(seed=9)
    spec = source_spec()
    store = init_param_store(spec, seed=9)
    cfg = quick_cfg(seed=4)
    episode = sample_episode(cube, labels, cfg.n_way, cfg.k_shot,
                             cfg.query_count, seed=11,
                             patch_size=spec.patch_size)

    def fn(s):
        return single_episode_loss(episode, 1, prior.t_prior, s, spec, cfg)

    err = ad.finite_difference_check(fn, store, h=1e-5, coords_per_entry=2,
                                     seed=3)
    assert err < 1e-4


def test_class_mean_priors_cover_all_classes():
    cube, labels, _ = make_source(seed=10)
    means = class_mean_priors(cube, labels)
    np.testing.assert_array_equal(sorted(means), list(labels.class_ids()))
    for cid, curve in means.items():
        sel = labels.labels == cid
        np.testing.assert_allclose(
            curve, cube.data[sel].astype(np.float64).mean(axis=0), atol=1e-6)


def test_write_trace_round_trippable(tmp_path):
    rows = [{"iteration": 0, "loss_cl": 1.25, "loss_de": 0.5,
             "loss_phy": 0.125, "loss_total": 1.7625},
            {"iteration": 1, "loss_cl": 1.0, "loss_de": 0.25,
             "loss_phy": 0.0625, "loss_total": 1.25625}]
    path = tmp_path / "trace.csv"
    write_trace(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,loss_cl,loss_de,loss_phy,loss_total"
    assert len(lines) == 3
    got = [float(v) for v in lines[1].split(",")]
    assert got == [0.0, 1.25, 0.5, 0.125, 1.7625]
