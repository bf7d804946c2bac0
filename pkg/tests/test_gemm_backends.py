import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ogemm.device import ContinuousLevels, TransmittanceTable
from ogemm.emulator import (ELECTRON_CHARGE_C, EmulatorConfig, ExactBackend, OpticalBackend, decompose,
                            exact_gemm, gemm_optical, gemm_optical_tiled, mvm_optical)
from ogemm.errors import DegenerateDeviceError, DomainError

QUIET = EmulatorConfig(noise_enabled=False)
IDEAL = ContinuousLevels(0.1, 0.7)


def triple_loop(A, B):
    m, k = len(A), len(A[0])
    n = len(B[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += A[i][t] * B[t][j]
            out[i][j] = acc
    return np.array(out)


# --- exact ---------------------------------------------------------------------------------------


def test_exact_small_cases():
    B = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(exact_gemm(np.eye(3), B), B)
    assert exact_gemm([[2.0]], [[3.0]])[0, 0] == 6.0


def test_exact_vs_triple_loop(rng):
    A, B = rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (8, 8))
    assert np.max(np.abs(exact_gemm(A, B) - triple_loop(A.tolist(), B.tolist()))) < 1e-12


def test_exact_shape_mismatch():
    with pytest.raises(DomainError):
        exact_gemm(np.ones((2, 3)), np.ones((2, 3)))


# --- decompose -----------------------------------------------------------------------------------


def test_decompose_examples():
    enc = decompose([-0.5, 0.2], np.ones((2, 2)))
    assert np.array_equal(enc.v_plus, [0.0, 0.2]) and np.array_equal(enc.v_minus, [0.5, 0.0])
    assert enc.scale_v == 1.0
    W = np.array([[0.5, 2.0], [1.0, 1.5]])
    enc = decompose([0.1, 0.1], W)
    assert enc.scale_w == 2.0
    assert np.array_equal(enc.w_minus, np.zeros((2, 2)))
    assert np.array_equal(enc.w_plus, W / 2)


def test_decompose_round_trip(rng):
    for _ in range(200):
        v = rng.uniform(-3, 3, 5) * rng.choice([0.1, 1.0])
        W = rng.uniform(-3, 3, (4, 5)) * rng.choice([0.1, 1.0])
        e = decompose(v, W)
        assert np.max(np.abs(e.scale_v * (e.v_plus - e.v_minus) - v)) < 1e-12
        assert np.max(np.abs(e.scale_w * (e.w_plus - e.w_minus) - W)) < 1e-12


@given(arrays(float, 6, elements=st.floats(-50, 50)), arrays(float, (3, 6), elements=st.floats(-50, 50)))
def test_decompose_invariants(v, W):
    e = decompose(v, W)
    assert np.all(np.minimum(e.v_plus, e.v_minus) == 0) and np.all(np.minimum(e.w_plus, e.w_minus) == 0)
    for part in (e.v_plus, e.v_minus, e.w_plus, e.w_minus):
        assert np.all((part >= 0) & (part <= 1))
    assert np.allclose(e.scale_v * (e.v_plus - e.v_minus), v, atol=1e-12, rtol=0)


# --- single pass ---------------------------------------------------------------------------------


def test_mvm_continuous_all_ones():
    y = mvm_optical(np.ones(4), np.ones((4, 4)), IDEAL, QUIET)
    assert np.allclose(y, 4.0, atol=1e-9, rtol=0)


def test_mvm_zero_input(ref_tt, rng):
    y = mvm_optical(np.zeros(4), rng.uniform(0, 1, (4, 4)), ref_tt, QUIET)
    assert np.allclose(y, 0.0, atol=1e-12)


def test_mvm_quantization_bound(ref_tt, rng):
    v = rng.uniform(0, 1, (10_000, 4))
    W = rng.uniform(0, 1, (10_000, 4, 4))
    y = mvm_optical(v, W, ref_tt, QUIET)
    exact = np.einsum("bij,bj->bi", W, v)
    gap = np.max(np.diff(np.sort(ref_tt.levels)))
    assert np.max(np.abs(y - exact)) <= 4 * gap / ref_tt.t_diff


def test_mvm_noise_matches_closed_form(ref_tt):
    cfg = EmulatorConfig()
    rng = np.random.default_rng(5)
    v = np.array([0.9, 0.3, 0.6, 0.1])
    W = np.array([[0.2, 0.8, 0.5, 1.0]] * 4)
    reps = 100_000
    y = mvm_optical(np.broadcast_to(v, (reps, 4)), np.broadcast_to(W, (reps, 4, 4)), ref_tt, cfg, rng)
    # closed form, written out from the physics rather than the module
    T = ref_tt.realize(ref_tt.t_min + W * ref_tt.t_diff)
    p_ch = cfg.p_total_w / cfg.array_cols
    current = cfg.responsivity_a_per_w * p_ch * (T @ v)
    sigma = np.sqrt(2 * ELECTRON_CHARGE_C * current * cfg.bandwidth_hz)
    want = sigma / (cfg.responsivity_a_per_w * p_ch * ref_tt.t_diff)
    got = y.std(axis=0, ddof=1)
    assert np.all(np.abs(got / want - 1) < 0.05)


def test_mvm_errors(ref_tt):
    flat = TransmittanceTable(np.full(30, 0.4), np.linspace(0, 1, 30))
    with pytest.raises(DegenerateDeviceError):
        mvm_optical(np.ones(4), np.ones((4, 4)), flat, QUIET)
    with pytest.raises(DomainError):
        mvm_optical(np.ones(3), np.ones((4, 4)), ref_tt, QUIET)
    with pytest.raises(DomainError):
        mvm_optical(np.full(4, 1.5), np.ones((4, 4)), ref_tt, QUIET)


# --- GEMM ----------------------------------------------------------------------------------------


def test_gemm_continuous_equals_exact(rng):
    A, B = rng.uniform(-1, 1, (8, 6)), rng.uniform(-1, 1, (6, 5))
    assert np.max(np.abs(gemm_optical(A, B, IDEAL, QUIET) - exact_gemm(A, B))) < 1e-9
    assert np.max(np.abs(gemm_optical_tiled(A, B, IDEAL, QUIET) - exact_gemm(A, B))) < 1e-9


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1),
       st.sampled_from([0.3, 1.0, 7.0]))
def test_gemm_oracle_equivalence(m, k, n, seed, mag):
    r = np.random.default_rng(seed)
    A, B = r.uniform(-mag, mag, (m, k)), r.uniform(-mag, mag, (k, n))
    assert np.max(np.abs(gemm_optical(A, B, IDEAL, QUIET) - A @ B)) < 1e-9 * max(1.0, mag * mag * k)


def test_gemm_zero_operands(ref_tt, rng):
    A = rng.uniform(-1, 1, (4, 4))
    Z = np.zeros((4, 4))
    assert np.array_equal(gemm_optical(Z, A, ref_tt, QUIET), Z)
    assert np.array_equal(gemm_optical(A, Z, ref_tt, QUIET), Z)
    # no light reaches the detectors, so there is no shot noise either
    assert np.array_equal(gemm_optical(A, Z, ref_tt, EmulatorConfig(rng_seed=3)), Z)
    # a zero weight still transmits t_min, so the readout stays noisy
    assert np.any(gemm_optical(Z, A, ref_tt, EmulatorConfig(rng_seed=3)) != 0)


def test_gemm_single_cell_bound(ref_tt, rng):
    bound = ref_tt.max_gap / ref_tt.t_diff
    for a, b in rng.uniform(-1, 1, (500, 2)):
        got = gemm_optical([[a]], [[b]], ref_tt, QUIET)[0, 0]
        assert abs(got - a * b) <= bound + 1e-15


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_fast_path_matches_tiled_noiseless(m, k, n, seed):
    from ogemm.device import transmittance_table
    from ogemm.experiments import reference_device
    from ogemm.materials import load_materials

    tt = transmittance_table(reference_device(), load_materials())
    r = np.random.default_rng(seed)
    A, B = r.uniform(-1, 1, (m, k)), r.uniform(-1, 1, (k, n))
    assert np.allclose(gemm_optical(A, B, tt, QUIET), gemm_optical_tiled(A, B, tt, QUIET), atol=1e-12, rtol=0)


def test_fast_path_noise_matches_tiled(ref_tt):
    # same distribution: compare per-entry mean and spread over repetitions
    cfg = EmulatorConfig(p_total_w=1e-4)
    A = np.array([[0.5, -0.3, 0.8, 0.1], [-0.9, 0.2, 0.4, -0.6]])
    B = np.array([[0.7], [-0.4], [0.2], [0.9]])
    rng = np.random.default_rng(0)
    tiled = np.array([gemm_optical_tiled(A, B, ref_tt, cfg, rng)[:, 0] for _ in range(4000)])
    fast = gemm_optical(np.broadcast_to(A, (20_000, 2, 4)), np.broadcast_to(B, (20_000, 4, 1)),
                        ref_tt, cfg, rng)[..., 0]
    assert np.allclose(tiled.mean(0), fast.mean(0), atol=4 * tiled.std(0).max() / np.sqrt(4000))
    assert np.all(np.abs(tiled.std(0, ddof=1) / fast.std(0, ddof=1) - 1) < 0.06)


def test_noise_reproducible(ref_tt, rng):
    A, B = rng.uniform(-1, 1, (5, 5)), rng.uniform(-1, 1, (5, 3))
    cfg = EmulatorConfig(rng_seed=9)
    a = gemm_optical(A, B, ref_tt, cfg, np.random.default_rng(1))
    b = gemm_optical(A, B, ref_tt, cfg, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(DomainError):
        EmulatorConfig(p_total_w=0.0)
    with pytest.raises(DomainError):
        EmulatorConfig(array_rows=0)


# --- backends ------------------------------------------------------------------------------------


def test_optical_backend_noiseless_matches_exact(rng):
    opt, ex = OpticalBackend(IDEAL, QUIET), ExactBackend()
    A, B = rng.uniform(-2, 2, (7, 3)), rng.uniform(-5, 5, (3, 4))
    assert np.allclose(opt.matmul(A, B), ex.matmul(A, B), atol=1e-9)


def test_backend_weight_cache_respects_version(ref_tt, rng):
    be = OpticalBackend(ref_tt, QUIET)
    A, B = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 2))
    first = be.matmul(A, B, a_key=(0, 0, 0))
    A2 = A * 0.5
    # same version: the stored encoding is reused
    assert np.array_equal(be.matmul(A2, B, a_key=(0, 0, 0)), first)
    assert np.array_equal(be.matmul(A2, B, a_key=(0, 0, 1)), be.matmul(A2, B))
    # transposed reuse equals a fresh encoding of the transpose for the nearest-level rule
    C = rng.uniform(-1, 1, (4, 3))
    assert np.allclose(be.matmul(A2.T, C, a_key=(0, 0, 1), a_transposed=True), be.matmul(A2.T, C), atol=1e-12)


def test_backend_streams_differ_per_call(ref_tt, rng):
    be = OpticalBackend(ref_tt, EmulatorConfig(p_total_w=1e-5))
    A, B = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))
    assert not np.array_equal(be.matmul(A, B), be.matmul(A, B))
