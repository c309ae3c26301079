# tests/test_gs_protocol_service.py

import numpy as np
import pytest

from src import pauli_core as pc
from src.errors import ConfigError, MissingArtifactError, OptimizationFailedError
from src.gs_protocol_service import (
    EnergyShiftProblem, ProtocolTable, alpha_at, default_grid, energy_shift,
    gs_polynomial, load_protocol_table, moments, omega, omega_derivative, omega_shape,
    pair_weight, pair_weight_ratio, save_protocol_table, solve_linear_system,
    solve_protocol, solve_single, state_weight,
)
from src.model_service import ising_hamiltonian, one_body_ansatz, two_body_ansatz, sample_ising
from src.oracle_service import to_dense
from src.weighted_action_service import precompute_factorized

SPECTRUM = np.array([-3.0, -1.0, 0.0, 2.0, 2.5, 4.0])


def _spectrum_problem(K, spectrum=SPECTRUM):
    return EnergyShiftProblem(K, np.array([np.mean(spectrum ** k) for k in range(2 * K)]))


def test_gs_polynomial_coefficients():
    np.testing.assert_allclose(gs_polynomial(3, 0.5).coefficients(0.0), [-0.125, 0.75, -1.5, 1.0])
    np.testing.assert_allclose(gs_polynomial(1).coefficients(0.7), [0.0, 1.0])
    with pytest.raises(ConfigError):
        gs_polynomial(0)


@pytest.mark.parametrize("K", [2, 3, 4])
def test_omega_is_weighted_mean_energy(K):
    prob = _spectrum_problem(K)
    for E in (-2.0, 0.3, 5.0):
        w = (SPECTRUM - E) ** (2 * K - 2)
        assert omega(prob, E) == pytest.approx(np.sum(w * SPECTRUM) / np.sum(w), rel=1e-12)


@pytest.mark.parametrize("K", [2, 3, 4])
def test_energy_shift_is_interior_minimum(K):
    prob = _spectrum_problem(K)
    E = energy_shift(prob)
    h = 1e-4
    assert abs(omega_derivative(prob, E)) < 1e-8
    assert omega(prob, E) < omega(prob, E - h)
    assert omega(prob, E) < omega(prob, E + h)
    if K == 2:
        assert omega(prob, E) < np.mean(SPECTRUM)


def test_quadratic_shift_agrees_with_grid_scan():
    prob = _spectrum_problem(2)
    E = energy_shift(prob)
    grid = np.linspace(E - 1.0, E + 1.0, 2001)
    values = np.array([omega(prob, x) for x in grid])
    assert grid[np.argmin(values)] == pytest.approx(E, abs=2e-3)
    assert omega_shape(prob) == (1, 1)


def test_zero_variance_raises():
    prob = EnergyShiftProblem(2, np.array([1.0, 2.0, 4.0, 8.0]))
    with pytest.raises(OptimizationFailedError) as info:
        energy_shift(prob)
    assert "moments" in info.value.diagnostics


def test_energy_shift_problem_validation():
    with pytest.raises(ValueError):
        EnergyShiftProblem(1, np.zeros(2))
    with pytest.raises(ValueError):
        EnergyShiftProblem(3, np.zeros(4))


def test_moments_from_sparse_operator(glass_3x1):
    Hf = ising_hamiltonian(glass_3x1)
    H = Hf.eval(0.6)
    Hd = to_dense(H)
    prob = moments(H, 3, 0.6)
    expected = [np.trace(np.linalg.matrix_power(Hd, k)).real / 8 for k in range(6)]
    np.testing.assert_allclose(prob.omega, expected, rtol=1e-10, atol=1e-12)
    ft = precompute_factorized(Hf, 3, one_body_ansatz(3))
    np.testing.assert_allclose(moments(ft, 3, 0.6).omega, prob.omega, rtol=1e-10, atol=1e-12)


def test_pair_weight_closed_form_matches_ratio(rng):
    n = 10000
    K = rng.integers(1, 6, size=n)
    E = rng.uniform(-2.0, 2.0, size=n)
    eps_m = rng.uniform(-3.0, 3.0, size=n)
    eps_n = rng.uniform(-3.0, 3.0, size=n)
    keep = np.abs(eps_m - eps_n) >= 0.05
    for k in range(1, 6):
        sel = keep & (K == k)
        closed = pair_weight(eps_m[sel], eps_n[sel], E[sel], k)
        ratio = pair_weight_ratio(eps_m[sel], eps_n[sel], E[sel], k)
        scale = k ** 2 * (np.abs(eps_m[sel] - E[sel]) + np.abs(eps_n[sel] - E[sel])) ** (2 * k - 2)
        assert np.all(np.abs(closed - ratio) <= 1e-10 * np.maximum(scale, 1.0))
        assert np.all(closed >= -1e-10 * np.maximum(scale, 1.0))


@pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
def test_pair_weight_bounded_by_state_weights(rng, K):
    n = 2000
    E = rng.uniform(-2.0, 2.0, size=n)
    eps_m = rng.uniform(-3.0, 3.0, size=n)
    eps_n = rng.uniform(-3.0, 3.0, size=n)
    w_mn = pair_weight(eps_m, eps_n, E, K)
    w_m = state_weight(eps_m, E, K)
    w_n = state_weight(eps_n, E, K)
    upper = np.maximum(w_m, w_n)
    lower = np.minimum(w_m, w_n)
    tol = 1e-10 * np.maximum(upper, 1.0)
    assert np.all(w_mn <= upper + tol)
    # gleiches Vorzeichen von eps - E: w_mn liegt zwischen w_m und w_n
    same = (eps_m - E) * (eps_n - E) > 0.0
    assert np.all(w_mn[same] >= lower[same] - tol[same])
    assert same.any()


def test_pair_weight_diagonal_is_state_weight():
    eps = np.array([-1.5, 0.2, 3.0])
    for K in (1, 2, 3):
        np.testing.assert_allclose(pair_weight(eps, eps, 0.4, K), state_weight(eps, 0.4, K))
        np.testing.assert_allclose(pair_weight_ratio(eps, eps, 0.4, K), state_weight(eps, 0.4, K))
    # K = 1: alle Gewichte eins
    np.testing.assert_allclose(pair_weight(eps, eps[::-1], 0.4, 1), np.ones(3))


def test_solve_linear_system_variants(rng):
    A = rng.normal(size=(5, 5))
    Q = A @ A.T + np.eye(5)
    r = rng.normal(size=5)
    qr = solve_linear_system(Q, r, "qr")
    cg = solve_linear_system(Q, r, "cg")
    assert qr["solver"] == "qr"
    assert qr["residual"] < 1e-10
    np.testing.assert_allclose(cg["alpha"], qr["alpha"], rtol=1e-7, atol=1e-9)
    with pytest.raises(ConfigError):
        solve_linear_system(Q, r, "lu")


def test_single_lambda_k1_is_conventional(glass_3x1):
    Hf = ising_hamiltonian(glass_3x1)
    ansatz = two_body_ansatz(glass_3x1)
    alpha, E, diag = solve_single(Hf.eval(0.3), Hf.derivative(0.3), ansatz, 1, 0.3)
    assert E is None
    assert diag["residual"] < 1e-8
    assert alpha.shape == (ansatz.size,)


def test_factorized_protocol_matches_single_lambda(ferro_2x2):
    Hf = ising_hamiltonian(ferro_2x2)
    ansatz = two_body_ansatz(ferro_2x2)
    grid = np.linspace(0.0, 1.0, 10)
    table = solve_protocol(Hf, ansatz, 3, grid)
    assert table.failures == []
    assert table.K == 3
    assert not table.metadata["stage1_cached"]
    for i, lam in enumerate(grid):
        alpha, E, _ = solve_single(Hf.eval(lam), Hf.derivative(lam), ansatz, 3, lam)
        np.testing.assert_allclose(table.alphas[i], alpha, rtol=1e-8, atol=1e-10)
        assert table.energy_shifts[i] == pytest.approx(E, rel=1e-8, abs=1e-10)


@pytest.mark.slow
def test_factorized_protocol_matches_single_lambda_six_spins():
    inst = sample_ising("spin-glass", 3, 2, 8)
    Hf = ising_hamiltonian(inst)
    ansatz = two_body_ansatz(inst)
    grid = np.linspace(0.0, 1.0, 10)
    table = solve_protocol(Hf, ansatz, 3, grid)
    for i, lam in enumerate(grid):
        if not table.valid[i]:
            continue
        alpha, _, _ = solve_single(Hf.eval(lam), Hf.derivative(lam), ansatz, 3, lam)
        np.testing.assert_allclose(table.alphas[i], alpha, rtol=1e-8, atol=1e-10)


def test_protocol_reuses_higher_degree_traces(ferro_2x2):
    Hf = ising_hamiltonian(ferro_2x2)
    ansatz = one_body_ansatz(4)
    ft = precompute_factorized(Hf, 3, ansatz)
    grid = np.linspace(0.0, 1.0, 5)
    cached = solve_protocol(Hf, ansatz, 2, grid, traces=ft)
    fresh = solve_protocol(Hf, ansatz, 2, grid)
    assert not cached.metadata["stage1_cached"]
    assert solve_protocol(Hf, ansatz, 2, grid, traces=ft, traces_cached=True).metadata["stage1_cached"]
    # Grad zu klein: Stufe 1 läuft neu, auch wenn die Spuren aus dem Cache kamen
    assert not solve_protocol(Hf, ansatz, 4, grid, traces=ft, traces_cached=True).metadata["stage1_cached"]
    np.testing.assert_allclose(cached.alphas, fresh.alphas, rtol=1e-8, atol=1e-12)
    k1 = solve_protocol(Hf, ansatz, 1, grid, traces=ft)
    assert np.all(np.isnan(k1.energy_shifts))


def test_protocol_rejects_bad_grid(ferro_2x2):
    Hf = ising_hamiltonian(ferro_2x2)
    with pytest.raises(ConfigError):
        solve_protocol(Hf, one_body_ansatz(4), 1, [0.5, 0.2])
    with pytest.raises(ConfigError):
        solve_protocol(Hf, one_body_ansatz(4), 0, default_grid(3))


def test_alpha_interpolation_skips_failed_points():
    table = ProtocolTable(
        lambdas=np.array([0.0, 0.5, 1.0]),
        alphas=np.array([[0.0, 1.0], [np.nan, np.nan], [1.0, 3.0]]),
        energy_shifts=np.full(3, np.nan), residuals=np.zeros(3), iterations=np.zeros(3, dtype=int),
        metadata={"K": 1},
    )
    np.testing.assert_allclose(alpha_at(table, 0.25), [0.25, 1.5])
    assert list(table.valid) == [True, False, True]


def test_protocol_table_save_and_load(tmp_path, ferro_2x2):
    Hf = ising_hamiltonian(ferro_2x2)
    table = solve_protocol(Hf, one_body_ansatz(4), 2, np.linspace(0.0, 1.0, 6))
    stem = str(tmp_path / "protocols" / "ferro_K2")
    csv_path, json_path = save_protocol_table(table, stem, {"instance_hash": "abc"})
    with open(csv_path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
    assert header == "lambda,E_shift,alpha_1,alpha_2,alpha_3,alpha_4,residual"
    loaded = load_protocol_table(stem)
    np.testing.assert_array_equal(loaded.alphas, table.alphas)
    np.testing.assert_array_equal(loaded.energy_shifts, table.energy_shifts)
    assert loaded.K == 2
    assert loaded.metadata["instance_hash"] == "abc"
    with pytest.raises(MissingArtifactError):
        load_protocol_table(str(tmp_path / "nothing"))


def test_commuting_driver_has_zero_coefficients():
    # H = Z1 + Z2, dH = Z1: kein Y-Term kann die Dynamik verbessern, r = 0
    H = pc.operator_from_terms(2, {pc.parse_term("Z1"): 1.0, pc.parse_term("Z2"): 0.5})
    dH = pc.pauli_operator(2, [("Z", 1)])
    alpha, _, _ = solve_single(H, dH, one_body_ansatz(2), 1, 0.0)
    np.testing.assert_allclose(alpha, 0.0, atol=1e-14)
