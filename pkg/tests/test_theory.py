import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles
from scipy.stats import ortho_group

from fedclust import theory as th
from fedclust.theory import TheorySpec


def test_noiseless_single_cluster_is_exact():
    inst = th.generate_theory_instance(TheorySpec(K=1, num_clients=3, samples_per_client=10))
    assert np.allclose(inst.y, inst.X @ inst.B_star @ inst.theta_star[0], atol=1e-12)


def test_planted_heads_are_well_posed():
    for seed in range(10):
        inst = th.generate_theory_instance(TheorySpec(seed=seed))
        assert th.sigma_min_star(inst.theta_star) > 0
        assert np.allclose(inst.B_star.T @ inst.B_star, np.eye(2), atol=1e-12)


def test_unit_direction_example():
    B = np.array([[1.0], [0.0], [0.0], [0.0]])
    theta = np.array([1.0])
    x = B[:, 0]
    assert float(x @ B @ theta) == 1.0


def test_distance_examples():
    e1, e2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    assert th.principal_angle_dist(e1, e1) == 0.0
    assert th.principal_angle_dist(e1, e2) == pytest.approx(1.0)
    b = np.array([[math.cos(math.pi / 6)], [math.sin(math.pi / 6)]])
    assert th.principal_angle_dist(e1, b) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 3))
def test_distance_matches_scipy_angles_and_is_a_subspace_property(seed, d, c):
    c = min(c, d)
    rng = np.random.default_rng(seed)
    B1, B2 = rng.normal(size=(d, c)), rng.normal(size=(d, c))
    expected = math.sin(subspace_angles(B1, B2).max())
    got = th.principal_angle_dist(B1, B2)
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(th.principal_angle_dist(B2, B1), abs=1e-12)
    R = ortho_group.rvs(c, random_state=seed) if c > 1 else np.array([[-1.0]])
    assert th.principal_angle_dist(B1 @ R, B2) == pytest.approx(got, abs=1e-9)


def test_orthonormalize_sign_convention():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 3))
    Q = th.orthonormalize(B)
    R = Q.T @ B
    assert np.all(np.diag(R) > 0)
    assert np.array_equal(th.orthonormalize(Q), th.orthonormalize(Q))
    with pytest.raises(th.TheoryError):
        th.orthonormalize(np.zeros((4, 2)))


def test_fixed_point_at_the_planted_basis():
    spec = TheorySpec(d=10, c=2, K=2, num_clients=20, samples_per_client=10, iterations=50)
    inst = th.generate_theory_instance(spec)
    theta, B = th.alt_min_step(inst.B_star, inst.X, inst.y, inst.omega, 0.1)
    assert np.allclose(theta, inst.theta_star, atol=1e-10)
    assert np.allclose(th.basis_gradient(inst.B_star, theta, inst.X, inst.y, inst.omega), 0, atol=1e-10)
    report, _, _ = th.run(spec, inst, B0=inst.B_star)
    assert max(report.dists) <= 1e-12


def test_zero_step_keeps_the_basis():
    spec = TheorySpec(d=8, c=2, K=2, num_clients=10, samples_per_client=10)
    inst = th.generate_theory_instance(spec)
    B0 = th.orthonormalize(np.random.default_rng(1).normal(size=(8, 2)))
    _, B1 = th.alt_min_step(B0, inst.X, inst.y, inst.omega, 0.0)
    assert np.allclose(B1, B0, atol=1e-12)


def test_basis_stays_orthonormal():
    spec = TheorySpec(d=10, c=3, K=2, num_clients=10, samples_per_client=10, sigma=0.1)
    inst = th.generate_theory_instance(spec)
    B = th.orthonormalize(np.random.default_rng(2).normal(size=(10, 3)))
    eta = th.default_eta(spec, inst)
    for _ in range(30):
        _, B = th.alt_min_step(B, inst.X, inst.y, inst.omega, eta)
        assert np.allclose(B.T @ B, np.eye(3), atol=1e-10)


def test_theta_decomposition_identity():
    spec = TheorySpec(d=6, c=2, K=2, num_clients=5, samples_per_client=8, sigma=0.3, seed=4)
    inst = th.generate_theory_instance(spec)
    B = th.orthonormalize(np.random.default_rng(5).normal(size=(6, 2)))
    aligned, F, G = th.theta_decomposition(B, inst.X, inst.y, inst.omega, inst.noise, inst.B_star, inst.theta_star)
    theta = th.solve_heads(B, inst.X, inst.y, inst.omega)
    assert np.allclose(theta, aligned + F + G, atol=1e-8)
    assert np.allclose(aligned, (B.T @ inst.B_star @ inst.theta_star.T).T)


def test_small_instance_converges():
    spec = TheorySpec(d=10, c=2, K=2, num_clients=30, samples_per_client=10, iterations=500, seed=3)
    report, _, _ = th.run(spec)
    assert th.monotone_after(report.dists, start=3)
    assert report.dists[-1] < 1e-3
    check = th.verify_contraction(report)
    assert check.rate < 1


def test_zero_step_reports_failure():
    report, _, _ = th.run(TheorySpec(d=10, c=2, K=2, eta=0.0, iterations=20))
    check = th.verify_contraction(report)
    assert check.rate == pytest.approx(1.0)
    assert not check.passed and check.notes


def test_balanced_is_not_slower_than_imbalanced():
    base = TheorySpec(iterations=150)
    bal = th.verify_contraction(th.run(base)[0]).rate
    imb = th.verify_contraction(th.run(replace(base, cluster_fractions=(0.8, 0.1, 0.1)))[0]).rate
    assert bal <= imb


def test_solver_refuses_starved_cluster():
    spec = TheorySpec(d=5, c=2, K=2, num_clients=1, samples_per_client=3)
    inst = th.generate_theory_instance(spec)
    omega = np.zeros((3, 2))
    omega[:, 0] = 1
    with pytest.raises(th.TheoryError):
        th.solve_heads(inst.B_star, inst.X, inst.y, omega)


def test_fitted_rate_on_geometric_sequence():
    assert th.fitted_rate(0.9 ** np.arange(50)) == pytest.approx(0.9)
    assert th.contraction_factor(0.0, 0.0) == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        TheorySpec(c=30).validate()
    with pytest.raises(ValueError):
        TheorySpec(cluster_fractions=(0.5, 0.5)).validate()
    assert TheorySpec().regime_ok
