"""Reverse-mode engine, parameter store, AdamW, and the FD auditor."""

import numpy as np
import pytest

from specdetect import autodiff as ad
from specdetect.autodiff import OptimConfig, ParamStore


def make_store(**entries):
    store = ParamStore()
    for name, value in entries.items():
        store.add(name, value)
    return store


# -- gradients of hand-checkable graphs ---------------------------------------


def test_quadratic_gradient():
    store = make_store(w=[1.0, 2.0, 3.0])
    loss = ad.reduce_sum(store.node("w") * store.node("w"))
    ad.backward_gradients(loss, store)
    np.testing.assert_allclose(store.grad("w"), [2.0, 4.0, 6.0], rtol=0, atol=0)


def test_frozen_only_loss_gives_zero_slot_and_skip_mark():
    store = ParamStore()
    store.add("w", [1.0, -2.0], frozen=True)
    loss = ad.reduce_sum(store.node("w") * store.node("w"))
    assert not loss.requires_grad
    ad.backward_gradients(loss, store)
    assert np.all(store.grad("w") == 0.0)
    assert store.is_skipped("w")


def test_gradient_flows_through_frozen_leaf():
    # freezing stops gradient INTO the entry, not through ops reading it
    store = ParamStore()
    store.add("a", [2.0, 3.0])
    store.add("b", [5.0, 7.0], frozen=True)
    loss = ad.reduce_sum(store.node("a") * store.node("b"))
    ad.backward_gradients(loss, store)
    np.testing.assert_array_equal(store.grad("a"), [5.0, 7.0])
    assert np.all(store.grad("b") == 0.0)


def test_three_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(3)
    store = make_store(
        w1=rng.normal(size=(4, 5)), b1=rng.normal(size=5),
        w2=rng.normal(size=(5, 3)), b2=rng.normal(size=3),
        w3=rng.normal(size=(3, 1)))
    x = ad.constant(rng.normal(size=(2, 4)))

    def fn(s):
        h1 = ad.sigmoid(x @ s.node("w1") + s.node("b1"))
        h2 = ad.softplus(h1 @ s.node("w2") + s.node("b2"))
        y = h2 @ s.node("w3")
        return ad.reduce_sum(y * y)

    err = ad.finite_difference_check(fn, store, h=1e-3, coords_per_entry=6,
                                     seed=0)
    assert err < 1e-4


def test_fd_check_quadratic_is_essentially_exact():
    store = make_store(x=np.array(3.0))

    def fn(s):
        return s.node("x") * s.node("x")

    err = ad.finite_difference_check(fn, store, h=1e-3, coords_per_entry=1)
    assert err < 1e-9


def test_fd_check_constant_function_zero_error():
    store = make_store(x=np.array([1.0, 2.0]))

    def fn(s):
        s.node("x")   # read it, ignore it
        return ad.constant(5.0) * ad.constant(2.0)

    assert ad.finite_difference_check(fn, store, coords_per_entry=2) == 0.0


def test_fd_check_rejects_nondeterministic_fn():
    store = make_store(x=np.array(1.0))
    calls = []

    def fn(s):
        calls.append(1)
        return s.node("x") * float(len(calls))

    with pytest.raises(ad.GraphError):
        ad.finite_difference_check(fn, store)


def test_fd_full_adapter_with_alignment_loss():
    # end-to-end audit of one realistic composite graph
    from specdetect.encoders import physical_loss
    from specdetect.adapter import adapter_forward
    from specdetect.pipeline import ModelSpec, init_param_store

    spec = ModelSpec(bands=16, patch_size=5, descr_dim=8, adapter_dim=8,
                     embed_dim=8, state_dim=4, heads=2, blocks=1,
                     prior_hidden=8, n_way=2)
    store = init_param_store(spec, seed=5)
    rng = np.random.default_rng(5)
    patch = rng.uniform(0.0, 1.0, size=(1, 5, 5, 16))
    anchor = ad.constant(rng.normal(size=8))

    def fn(s):
        h_ada = adapter_forward(patch, s, spec.adapter_cfg())
        return physical_loss(h_ada, s, anchor)

    err = ad.finite_difference_check(fn, store, h=1e-5, coords_per_entry=3,
                                     seed=1)
    assert err < 1e-4


# -- per-primitive gradient audits --------------------------------------------


def _away_from_zero(rng, shape, lo=0.2, hi=1.0):
    """Values bounded away from 0 so kinked ops see no sign flips."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _fd(fn, store, seed):
    return ad.finite_difference_check(fn, store, h=1e-5, coords_per_entry=5,
                                      seed=seed)


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_and_matmul_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    store = make_store(a=_away_from_zero(rng, (3, 4)),
                       b=_away_from_zero(rng, (3, 4)),
                       m=rng.normal(size=(4, 3)),
                       v=rng.normal(size=4))
    w = ad.constant(rng.normal(size=(3, 4)))
    wv = ad.constant(rng.normal(size=(3, 3)))

    cases = {
        "add": lambda s: ad.reduce_sum((s.node("a") + s.node("b")) * w),
        "sub": lambda s: ad.reduce_sum((s.node("a") - s.node("b")) * w),
        "mul": lambda s: ad.reduce_sum(s.node("a") * s.node("b") * w),
        "div": lambda s: ad.reduce_sum(s.node("a") / s.node("b") * w),
        "neg": lambda s: ad.reduce_sum(ad.neg(s.node("a")) * w),
        "matmul": lambda s: ad.reduce_sum((s.node("a") @ s.node("m")) * wv),
        "matvec": lambda s: ad.reduce_sum(s.node("a") @ s.node("v")),
        "vecmat": lambda s: ad.reduce_sum(s.node("v") @ s.node("m")),
    }
    for name, fn in cases.items():
        assert _fd(fn, store, seed) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_nonlinearity_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    store = make_store(p=rng.uniform(0.5, 2.0, size=(2, 5)),
                       x=_away_from_zero(rng, (2, 5)))
    w = ad.constant(rng.normal(size=(2, 5)))

    cases = {
        "exp": lambda s: ad.reduce_sum(ad.exp(s.node("x")) * w),
        "log": lambda s: ad.reduce_sum(ad.log(s.node("p")) * w),
        "sqrt": lambda s: ad.reduce_sum(ad.sqrt(s.node("p")) * w),
        "relu": lambda s: ad.reduce_sum(ad.relu(s.node("x")) * w),
        "sigmoid": lambda s: ad.reduce_sum(ad.sigmoid(s.node("x")) * w),
        "softplus": lambda s: ad.reduce_sum(ad.softplus(s.node("x")) * w),
        "clip": lambda s: ad.reduce_sum(ad.clip(s.node("x"), -10.0, 10.0) * w),
        "softmax": lambda s: ad.reduce_sum(ad.softmax(s.node("x"), axis=1) * w),
        "log_softmax":
            lambda s: ad.reduce_sum(ad.log_softmax(s.node("x"), axis=1) * w),
    }
    for name, fn in cases.items():
        assert _fd(fn, store, seed) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_shape_and_reduction_gradients(seed):
    rng = np.random.default_rng(300 + seed)
    store = make_store(x=rng.normal(size=(2, 3, 4)),
                       y=rng.normal(size=(2, 3, 4)))
    w_full = ad.constant(rng.normal(size=(2, 3, 4)))
    w_flat = ad.constant(rng.normal(size=24))
    w_axis = ad.constant(rng.normal(size=(2, 4)))
    w_tr = ad.constant(rng.normal(size=(4, 2, 3)))
    w_cat = ad.constant(rng.normal(size=(2, 3, 8)))
    w_take = ad.constant(rng.normal(size=(2, 3, 4)))
    idx = np.array([0, 2, 0, 1])   # repeats exercise accumulation

    cases = {
        "sum_all": lambda s: ad.reduce_sum(s.node("x") * w_full),
        "sum_axis": lambda s: ad.reduce_sum(
            ad.reduce_sum(s.node("x"), axis=1) * w_axis),
        "mean": lambda s: ad.reduce_sum(
            ad.reduce_mean(s.node("x"), axis=1) * w_axis),
        "reshape": lambda s: ad.reduce_sum(
            ad.reshape(s.node("x"), (24,)) * w_flat),
        "transpose": lambda s: ad.reduce_sum(
            ad.transpose(s.node("x"), (2, 0, 1)) * w_tr),
        "concat": lambda s: ad.reduce_sum(
            ad.concat([s.node("x"), s.node("y")], axis=2) * w_cat),
        "take": lambda s: ad.reduce_sum(
            ad.take(s.node("x"), idx, axis=2) * w_take),
    }
    for name, fn in cases.items():
        assert _fd(fn, store, seed) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_state_scan_gradients(seed):
    rng = np.random.default_rng(400 + seed)
    p, t, c, n = 2, 6, 3, 4
    store = make_store(x=rng.normal(size=(p, t, c)),
                       dpre=rng.normal(size=(p, t)),
                       b=rng.normal(size=(p, t, n)),
                       cc=rng.normal(size=(p, t, n)),
                       alog=rng.normal(size=n))
    w = ad.constant(rng.normal(size=(p, t, c)))

    def fn(s):
        delta = ad.softplus(s.node("dpre")) + 1e-3
        a = ad.neg(ad.exp(s.node("alog")))
        y = ad.state_scan(s.node("x"), delta, s.node("b"), s.node("cc"), a)
        return ad.reduce_sum(y * w)

    assert _fd(fn, store, seed) < 1e-4


def test_take_accumulates_duplicate_indices():
    store = make_store(x=np.array([1.0, 2.0, 3.0]))
    out = ad.take(store.node("x"), np.array([0, 0, 2]))
    ad.backward_gradients(ad.reduce_sum(out), store)
    np.testing.assert_array_equal(store.grad("x"), [2.0, 0.0, 1.0])


# -- guards -------------------------------------------------------------------


def test_nonfinite_output_raises_at_the_op():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.constant([-1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.constant([1.0]) / ad.constant([0.0])


def test_backward_gradients_requires_scalar_loss():
    store = make_store(x=np.ones(3))
    with pytest.raises(ad.GraphError):
        ad.backward_gradients(store.node("x") * 2.0, store)


def test_item_requires_single_element():
    with pytest.raises(ad.GraphError):
        ad.constant([1.0, 2.0]).item()


def test_state_scan_rejects_nonpositive_delta():
    z = np.zeros((1, 2, 3))
    with pytest.raises(ad.GraphError):
        ad.state_scan(ad.constant(z), ad.constant(np.zeros((1, 2))),
                      ad.constant(np.zeros((1, 2, 4))),
                      ad.constant(np.zeros((1, 2, 4))),
                      ad.constant(-np.ones(4)))


def test_duplicate_parameter_name_rejected():
    store = make_store(w=1.0)
    with pytest.raises(ValueError):
        store.add("w", 2.0)


# -- AdamW --------------------------------------------------------------------


def _fill_grads(store, grads):
    for name, g in grads.items():
        store.grad(name)[...] = g
    store.grads_ready = True


def test_adamw_zero_gradient_zero_decay_is_fixed_point():
    store = make_store(w=np.array([1.5, -2.5]))
    before = store.value("w").copy()
    _fill_grads(store, {"w": 0.0})
    ad.adamw_update(store, OptimConfig(learning_rate=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(store.value("w"), before)


def test_adamw_never_touches_frozen_entries():
    store = ParamStore()
    store.add("w", np.array([1.0, 2.0]), frozen=True)
    store.add("u", np.array([1.0, 2.0]))
    before = store.value("w").tobytes()
    _fill_grads(store, {"w": 1.0, "u": 1.0})
    ad.adamw_update(store, OptimConfig(learning_rate=0.1))
    assert store.value("w").tobytes() == before
    assert store.value("u").tobytes() != np.array([1.0, 2.0]).tobytes()


def test_adamw_single_step_hand_value():
    # theta=1, grad=1, lr=0.1, wd=0: bias-corrected ratio is 1, so theta -> 0.9
    store = make_store(w=np.array(1.0))
    _fill_grads(store, {"w": 1.0})
    ad.adamw_update(store, OptimConfig(learning_rate=0.1, weight_decay=0.0))
    assert abs(float(store.value("w")) - 0.9) < 1e-7


def test_adamw_requires_fresh_gradients():
    store = make_store(w=np.array(1.0))
    with pytest.raises(ad.StaleGradientsError):
        ad.adamw_update(store, OptimConfig())
    _fill_grads(store, {"w": 1.0})
    ad.adamw_update(store, OptimConfig())
    with pytest.raises(ad.StaleGradientsError):
        ad.adamw_update(store, OptimConfig())


def test_adamw_deterministic():
    def run():
        store = make_store(w=np.linspace(-1, 1, 6).reshape(2, 3))
        for step in range(3):
            loss = ad.reduce_sum(store.node("w") * store.node("w"))
            ad.backward_gradients(loss, store)
            ad.adamw_update(store, OptimConfig(learning_rate=0.05))
        return store.value("w").tobytes()

    assert run() == run()


def test_adamw_gradient_clipping_matches_prescaled_gradients():
    g = np.array([3.0, 4.0])    # norm 5, cap 1 scales by 1/5
    cfg = OptimConfig(learning_rate=0.1, max_grad_norm=1.0)
    s1 = make_store(w=np.array([1.0, 1.0]))
    _fill_grads(s1, {"w": g})
    ad.adamw_update(s1, cfg)

    s2 = make_store(w=np.array([1.0, 1.0]))
    _fill_grads(s2, {"w": g / 5.0})
    ad.adamw_update(s2, OptimConfig(learning_rate=0.1))
    np.testing.assert_allclose(s1.value("w"), s2.value("w"), rtol=0, atol=1e-15)


def test_optimizer_state_survives_scalar_entries():
    # rank-0 entries must stay 0-d arrays through update and reset
    store = make_store(w=np.array(2.0))
    _fill_grads(store, {"w": 0.5})
    ad.adamw_update(store, OptimConfig())
    assert isinstance(store.value("w"), np.ndarray)
    assert store.value("w").shape == ()
    store.reset_optimizer_state()    # raised TypeError when entries collapsed
    loss_fn = lambda s: s.node("w") * s.node("w")
    assert ad.finite_difference_check(loss_fn, store, coords_per_entry=1) < 1e-9


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0).validate()


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    store = ParamStore()
    # values chosen to be exactly float32-representable
    store.add("a/w", np.array([[0.5, -1.25], [2.0, 0.0]]))
    store.add("a/b", np.array(3.5), frozen=True)
    store.add("z", np.arange(4, dtype=np.float64))
    path = tmp_path / "model.spdm"
    store.save(path)

    loaded = ParamStore.load(path)
    assert sorted(loaded.names()) == sorted(store.names())
    for name in store.names():
        np.testing.assert_array_equal(loaded.value(name), store.value(name))
        assert loaded.value(name).shape == store.value(name).shape
        assert loaded.is_frozen(name) == store.is_frozen(name)


def test_checkpoint_float32_quantization(tmp_path):
    store = make_store(w=np.array([1.0 + 1e-12]))
    path = tmp_path / "m.spdm"
    store.save(path)
    assert float(ParamStore.load(path).value("w")[0]) == 1.0


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.spdm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ad.GraphError):
        ParamStore.load(path)


def test_checkpoint_truncated(tmp_path):
    store = make_store(w=np.ones((8, 8)))
    path = tmp_path / "t.spdm"
    store.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 40])
    with pytest.raises(ad.GraphError):
        ParamStore.load(path)


def test_checkpoint_unsupported_version(tmp_path):
    store = make_store(w=np.ones(2))
    path = tmp_path / "v.spdm"
    store.save(path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(ad.GraphError):
        ParamStore.load(path)


def test_set_frozen_prefix_and_unknown_prefix():
    store = make_store(**{"b/x": 1.0})
    store.set_frozen("b/", True)
    assert store.is_frozen("b/x")
    with pytest.raises(KeyError):
        store.set_frozen("nope/", True)


def test_set_value_shape_guard():
    store = make_store(w=np.ones(3))
    with pytest.raises(ValueError):
        store.set_value("w", np.ones(4))
