"""Frequency-aware spectral branch, selective scan, and cross-gated fusion."""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specdetect import autodiff as ad
from specdetect.adapter import (DELTA_BIAS_INIT, AdapterConfig, adapter_forward,
                                build_partition, dct_matrix, dct_spectral,
                                dctma_forward, group_encode,
                                init_adapter_params, selective_scan,
                                spectral_gate, zoh_discretize)
from specdetect.hsio import Patch, ValidationError

from conftest import rand_patches


def small_cfg(bands=8, patch_size=3, descr_dim=6, out_dim=6, state_dim=4):
    return AdapterConfig(bands=bands, patch_size=patch_size,
                         descr_dim=descr_dim, out_dim=out_dim,
                         state_dim=state_dim)


def adapter_store(cfg, seed=0):
    store = ad.ParamStore()
    init_adapter_params(store, cfg, np.random.default_rng(seed))
    return store


# -- spectral transform ----------------------------------------------------------


def test_dct_constant_spectrum():
    patch = Patch((0, 0), np.full((1, 1, 4), 2.0))
    coeffs = dct_spectral(patch)
    np.testing.assert_allclose(coeffs[:, 0], [4.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_dct_alternating_two_band():
    patch = Patch((0, 0), np.array([1.0, -1.0]).reshape(1, 1, 2))
    coeffs = dct_spectral(patch)
    np.testing.assert_allclose(coeffs[:, 0], [0.0, np.sqrt(2.0)], atol=1e-12)


def test_dct_inverse_recovers_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=16)
    d = dct_matrix(16)
    np.testing.assert_allclose(d.T @ (d @ x), x, atol=1e-6)


def test_dct_matrix_is_orthonormal():
    d = dct_matrix(12)
    np.testing.assert_allclose(d @ d.T, np.eye(12), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(bands=st.integers(2, 24), seed=st.integers(0, 1000))
def test_dct_parseval_property(bands, seed):
    x = np.random.default_rng(seed).normal(size=bands)
    coeffs = dct_matrix(bands) @ x
    energy_in, energy_out = float(x @ x), float(coeffs @ coeffs)
    assert abs(energy_out - energy_in) <= 1e-6 * max(1.0, energy_in)


# -- frequency partition ----------------------------------------------------------


def test_partition_default_ratios_on_128_bands():
    part = build_partition(128, 0.25, 0.60)
    assert (len(part.low), len(part.mid), len(part.high)) == (32, 44, 52)


def test_partition_three_bands_singletons():
    part = build_partition(3, 0.34, 0.67)
    np.testing.assert_array_equal(part.low, [0])
    np.testing.assert_array_equal(part.mid, [1])
    np.testing.assert_array_equal(part.high, [2])


def test_partition_empty_group_errors():
    with pytest.raises(ValidationError, match="low"):
        build_partition(4, 0.1, 0.6)
    with pytest.raises(ValidationError, match="mid"):
        build_partition(4, 0.25, 0.26)
    with pytest.raises(ValidationError):
        build_partition(4, 0.6, 0.25)


def test_partition_masks_cover_exactly():
    part = build_partition(10, 0.3, 0.7)
    np.testing.assert_array_equal(part.masks(10).sum(axis=0), np.ones(10))


@settings(max_examples=60, deadline=None)
@given(bands=st.integers(3, 200),
       low=st.floats(0.05, 0.45), mid=st.floats(0.5, 0.95))
def test_partition_disjoint_covering_property(bands, low, mid):
    if int(np.floor(low * bands)) < 1 or int(np.floor(mid * bands)) >= bands:
        return    # precondition violated by construction, covered above
    part = build_partition(bands, low, mid)
    joined = np.concatenate([part.low, part.mid, part.high])
    np.testing.assert_array_equal(np.sort(joined), np.arange(bands))
    # reconstruction: summing the three masked copies gives the input back
    f = np.random.default_rng(bands).normal(size=(bands, 4))
    masks = part.masks(bands)
    np.testing.assert_array_equal(
        sum(masks[g][:, None] * f for g in range(3)), f)


# -- group descriptors and gating --------------------------------------------------


def test_group_encode_zero_weights():
    part = build_partition(8, 0.25, 0.6)
    coeffs = np.random.default_rng(1).normal(size=(8, 9))
    zs = group_encode(coeffs, part, [np.zeros((8, 4))] * 3)
    for z in zs:
        np.testing.assert_array_equal(z, np.zeros(4))


def test_group_encode_single_token_is_identity_pool():
    part = build_partition(6, 0.34, 0.67)
    rng = np.random.default_rng(2)
    coeffs = rng.normal(size=(6, 1))
    weights = [rng.normal(size=(6, 3)) for _ in range(3)]
    zs = group_encode(coeffs, part, weights)
    masks = part.masks(6)
    for g in range(3):
        want = np.maximum((masks[g] * coeffs[:, 0]) @ weights[g], 0.0)
        np.testing.assert_allclose(zs[g], want, atol=1e-12)


def test_group_encode_masking_equals_zeroed_weight_rows():
    part = build_partition(10, 0.3, 0.7)
    rng = np.random.default_rng(3)
    coeffs = rng.normal(size=(10, 25))
    weights = [rng.normal(size=(10, 5)) for _ in range(3)]
    zs = group_encode(coeffs, part, weights)
    masks = part.masks(10)
    for g in range(3):
        w_zeroed = weights[g] * masks[g][:, None]
        want = np.maximum(coeffs.T @ w_zeroed, 0.0).mean(axis=0)
        np.testing.assert_allclose(zs[g], want, atol=1e-12)


def test_spectral_gate_symmetry():
    z = np.array([0.3, -0.7, 1.1])
    alpha, blended = spectral_gate(z, z, z, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(alpha, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(blended, z, atol=1e-12)


def test_spectral_gate_dominant_score():
    alpha, _ = spectral_gate(np.array([10.0]), np.array([0.0]),
                             np.array([0.0]), np.array([1.0]))
    np.testing.assert_allclose(alpha, [0.9999092, 4.5396e-5, 4.5396e-5],
                               rtol=1e-4)


def test_spectral_gate_shift_invariance():
    rng = np.random.default_rng(4)
    w = rng.normal(size=5)
    zs = [rng.normal(size=5) for _ in range(3)]
    alpha0, _ = spectral_gate(*zs, w)
    for c in (-3.0, 0.5, 20.0):
        shift = c * w / (w @ w)    # adds exactly c to every score
        alpha, _ = spectral_gate(*(z + shift for z in zs), w)
        np.testing.assert_allclose(alpha, alpha0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_spectral_gate_simplex_property(seed):
    rng = np.random.default_rng(seed)
    alpha, _ = spectral_gate(rng.normal(size=4), rng.normal(size=4),
                             rng.normal(size=4), rng.normal(size=4))
    assert np.all(alpha >= 0.0)
    assert abs(alpha.sum() - 1.0) < 1e-12


# -- discretization and scan --------------------------------------------------------


def test_zoh_scalar_case():
    abar, bbar = zoh_discretize(np.array([-1.0]), 0.1, np.array([1.0]))
    np.testing.assert_allclose(abar, [np.exp(-0.1)], atol=1e-9)
    np.testing.assert_allclose(bbar, [0.0951626], atol=1e-6)


def test_zoh_zero_eigenvalue_limit():
    abar, bbar = zoh_discretize(np.array([0.0]), 0.5, np.array([2.0]))
    np.testing.assert_array_equal(abar, [1.0])
    np.testing.assert_array_equal(bbar, [1.0])


def test_zoh_vanishing_step():
    abar, bbar = zoh_discretize(np.array([-3.0]), 1e-12, np.array([5.0]))
    np.testing.assert_allclose(abar, [1.0], atol=1e-9)
    np.testing.assert_allclose(bbar, [5e-12], atol=1e-15)


def test_zoh_rejects_nonpositive_step():
    with pytest.raises(ValidationError):
        zoh_discretize(np.array([-1.0]), 0.0, np.array([1.0]))
    with pytest.raises(ValidationError):
        zoh_discretize(np.array([-1.0]), -0.1, np.array([1.0]))


@settings(max_examples=60, deadline=None)
@given(a=st.floats(-10.0, -1e-9), delta=st.floats(1e-9, 10.0))
def test_zoh_stability_property(a, delta):
    abar, _ = zoh_discretize(np.array([a]), delta, np.array([1.0]))
    assert 0.0 < abar[0] < 1.0


def naive_scan(xd, dd, bd, cd, a):
    """Step-by-step reference recurrence in float64."""
    p, t_len, ch = xd.shape
    n = a.shape[0]
    y = np.zeros((p, t_len, ch))
    for pi in range(p):
        h = np.zeros((ch, n))
        for t in range(t_len):
            abar, bbar = zoh_discretize(a, dd[pi, t], bd[pi, t])
            h = h * abar[None, :] + np.outer(xd[pi, t], bbar)
            y[pi, t] = h @ cd[pi, t]
    return y


def test_state_scan_single_step():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 3))
    delta = np.array([[0.2]])
    b = rng.normal(size=(1, 1, 4))
    c = rng.normal(size=(1, 1, 4))
    a = -np.array([1.0, 2.0, 3.0, 4.0])
    y = ad.state_scan(ad.constant(x), ad.constant(delta), ad.constant(b),
                      ad.constant(c), ad.constant(a))
    _, bbar = zoh_discretize(a, 0.2, b[0, 0])
    np.testing.assert_allclose(y.data[0, 0], x[0, 0] * float(bbar @ c[0, 0]),
                               atol=1e-12)


def test_state_scan_matches_naive_recurrence_length_25():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 25, 5))
    delta = rng.uniform(0.01, 1.0, size=(1, 25))
    b = rng.normal(size=(1, 25, 6))
    c = rng.normal(size=(1, 25, 6))
    a = -np.exp(rng.normal(size=6))
    y = ad.state_scan(ad.constant(x), ad.constant(delta), ad.constant(b),
                      ad.constant(c), ad.constant(a))
    diff = np.abs(y.data - naive_scan(x, delta, b, c, a)).max()
    assert diff < 1e-5


def test_selective_scan_zero_tokens_zero_output():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=1)
    tokens = ad.constant(np.zeros((2, 9, cfg.bands)))
    out = selective_scan(tokens, store)
    np.testing.assert_array_equal(out.data, np.zeros((2, cfg.bands)))


def test_selective_scan_runtime_scales_linearly():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=2)
    rng = np.random.default_rng(7)

    def best_time(t_len):
        tokens = ad.constant(rng.normal(size=(1, t_len, cfg.bands)))
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            selective_scan(tokens, store)
            best = min(best, time.perf_counter() - t0)
        return best

    short, long = best_time(256), best_time(512)
    # linear cost doubles with length; allow 1.3x per-token slack
    assert long <= 2.6 * short + 1e-3


# -- full adapter -----------------------------------------------------------------


def numpy_adapter_oracle(values, store, cfg):
    """Reference composition of the published numpy building blocks."""
    part = build_partition(cfg.bands, cfg.freq_low_ratio, cfg.freq_mid_ratio)
    weights = [store.value(f"dctma/spec_w_{g}") for g in ("low", "mid", "high")]
    w_att = store.value("dctma/spec_w_att")
    a = -np.exp(store.value("dctma/ssm_a_log"))
    w_delta = store.value("dctma/ssm_w_delta")
    b_delta = float(store.value("dctma/ssm_b_delta"))
    w_b, b_b = store.value("dctma/ssm_w_b"), store.value("dctma/ssm_b_b")
    w_c, b_c = store.value("dctma/ssm_w_c"), store.value("dctma/ssm_b_c")

    out = []
    for patch in values:
        tokens = patch.reshape(-1, cfg.bands)
        coeffs = dct_matrix(cfg.bands) @ tokens.T
        zs = group_encode(coeffs, part, weights)
        _, e_spec = spectral_gate(*zs, w_att)

        h = np.zeros((cfg.bands, len(a)))
        ys = []
        for tok in tokens:
            delta = np.log1p(np.exp(tok @ w_delta + b_delta))
            abar, bbar = zoh_discretize(a, delta, tok @ w_b + b_b)
            h = h * abar[None, :] + np.outer(tok, bbar)
            ys.append(h @ (tok @ w_c + b_c))
        e_spa = np.mean(ys, axis=0)

        et_spec = (e_spec @ store.value("dctma/fuse_proj_spec_w")
                   + store.value("dctma/fuse_proj_spec_b"))
        et_spa = (e_spa @ store.value("dctma/fuse_proj_spa_w")
                  + store.value("dctma/fuse_proj_spa_b"))
        g_spec = 1.0 / (1.0 + np.exp(-(
            et_spa @ store.value("dctma/fuse_gate_spa2spec_w")
            + store.value("dctma/fuse_gate_spa2spec_b"))))
        g_spa = 1.0 / (1.0 + np.exp(-(
            et_spec @ store.value("dctma/fuse_gate_spec2spa_w")
            + store.value("dctma/fuse_gate_spec2spa_b"))))
        fused = np.concatenate([et_spec * g_spec, et_spa * g_spa])
        out.append(fused @ store.value("dctma/fuse_out_w")
                   + store.value("dctma/fuse_out_b"))
    return np.stack(out)


def test_adapter_forward_matches_numpy_oracle():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=3)
    values = rand_patches(4, cfg.patch_size, cfg.bands, seed=8)
    got = adapter_forward(values, store, cfg).data
    want = numpy_adapter_oracle(values, store, cfg)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_adapter_forward_deterministic():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=4)
    values = rand_patches(3, cfg.patch_size, cfg.bands, seed=9)
    a = adapter_forward(values, store, cfg).data
    b = adapter_forward(values, store, cfg).data
    assert a.tobytes() == b.tobytes()


def test_dctma_forward_single_patch():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=5)
    values = rand_patches(1, cfg.patch_size, cfg.bands, seed=10)
    single = dctma_forward(Patch((1, 1), values[0]), store, cfg)
    np.testing.assert_array_equal(single,
                                  adapter_forward(values, store, cfg).data[0])


def test_adapter_gradients_all_tensors():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=6)
    values = rand_patches(2, cfg.patch_size, cfg.bands, seed=11)

    def fn(s):
        h = adapter_forward(values, s, cfg)
        return ad.reduce_sum(h * h)

    err = ad.finite_difference_check(fn, store, h=1e-5, coords_per_entry=3,
                                     seed=2)
    assert err < 1e-4


def test_adapter_patch_size_changes_only_token_count():
    for side in (1, 5):
        cfg = small_cfg(patch_size=side)
        store = adapter_store(cfg, seed=7)
        values = rand_patches(2, side, cfg.bands, seed=12)
        assert adapter_forward(values, store, cfg).data.shape == (2, cfg.out_dim)


def test_adapter_band_mismatch_rejected():
    cfg = small_cfg(bands=8)
    store = adapter_store(cfg, seed=8)
    with pytest.raises(ValidationError):
        adapter_forward(rand_patches(1, 3, 9), store, cfg)


def test_fusion_gate_zero_and_saturated_regimes():
    cfg = small_cfg()
    store = adapter_store(cfg, seed=9)
    d_f = cfg.out_dim
    # identity readout of the gated spectral feature
    store.set_value("dctma/fuse_out_w",
                    np.vstack([np.eye(d_f), np.zeros((d_f, d_f))]))
    store.set_value("dctma/fuse_out_b", np.zeros(d_f))
    for name in ("fuse_gate_spa2spec_w", "fuse_gate_spec2spa_w"):
        store.set_value(f"dctma/{name}", np.zeros((d_f, d_f)))
    values = rand_patches(1, cfg.patch_size, cfg.bands, seed=13)

    store.set_value("dctma/fuse_gate_spa2spec_b", np.zeros(d_f))
    half = adapter_forward(values, store, cfg).data[0]    # gate = 0.5 exactly

    store.set_value("dctma/fuse_gate_spa2spec_b", np.full(d_f, 20.0))
    sat = adapter_forward(values, store, cfg).data[0]     # gate ~ 1

    e_tilde = 2.0 * half
    assert np.abs(sat - e_tilde).max() < 1e-8 * max(1.0, np.abs(e_tilde).max())


def test_adapter_masking_flag_off_uses_full_spectrum():
    cfg_on = small_cfg()
    cfg_off = AdapterConfig(bands=8, patch_size=3, descr_dim=6, out_dim=6,
                            state_dim=4, freq_masking=False)
    store = adapter_store(cfg_on, seed=10)
    values = rand_patches(2, 3, 8, seed=14)
    on = adapter_forward(values, store, cfg_on).data
    off = adapter_forward(values, store, cfg_off).data
    assert not np.array_equal(on, off)
