"""Sample-wise and client-wise clustering weights.

Soft mode runs the EM-style update, all in log space:

    gamma[j, k]   ∝ omega[j, k]    * L_k(x_j, y_j)
    gamma~[j, k]  ∝ omega~[k]      * L_k(x_j, y_j)
    omega~[k]     = mean_j gamma~[j, k]
    omega[j, k]   = mu~ * gamma[j, k] + (1 - mu~) * omega~[k]

Hard modes (IFCA, FeSEM) put one-hot weights on every sample of a client.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

TIER2_MODES = ("soft", "ifca", "fesem")


@dataclass
class WeightState:
    omega: np.ndarray  # (N_i, K)
    omega_tilde: np.ndarray  # (K,)
    gamma: np.ndarray  # (N_i, K)
    gamma_tilde: np.ndarray  # (N_i, K)
    mu_tilde: float = 1.0
    reset_count: int = 0

    @classmethod
    def uniform(cls, n: int, k: int, mu_tilde: float = 1.0) -> "WeightState":
        full = np.full((n, k), 1.0 / k)
        return cls(full.copy(), np.full(k, 1.0 / k), full.copy(), full.copy(), mu_tilde)

    @property
    def num_clusters(self) -> int:
        return self.omega.shape[1]

    def copy(self) -> "WeightState":
        return WeightState(self.omega.copy(), self.omega_tilde.copy(), self.gamma.copy(),
                           self.gamma_tilde.copy(), self.mu_tilde, self.reset_count)

    def check_simplex(self, atol: float = 1e-9) -> None:
        for name, arr in (("omega", self.omega), ("omega_tilde", self.omega_tilde[None, :])):
            if np.any(arr < -atol) or not np.allclose(arr.sum(axis=1), 1.0, atol=atol, rtol=0):
                raise AssertionError(f"{name} left the simplex")


def _posterior(log_prior: np.ndarray, log_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised ``prior * L`` and a mask of rows that degenerated."""
    with np.errstate(divide="ignore", invalid="ignore"):
        joint = log_prior + log_scores
        norm = logsumexp(joint, axis=1, keepdims=True)
        post = np.exp(joint - norm)
    bad = ~np.isfinite(norm[:, 0]) | ~np.all(np.isfinite(post), axis=1)
    if bad.any():
        post[bad] = 1.0 / post.shape[1]
    return post, bad


def e_step(state: WeightState, log_scores: np.ndarray) -> WeightState:
    log_scores = np.asarray(log_scores, dtype=float)
    if log_scores.shape != state.omega.shape:
        raise ValueError(f"log-score shape {log_scores.shape} != weight shape {state.omega.shape}")
    with np.errstate(divide="ignore"):
        log_omega = np.log(state.omega)
        log_omega_t = np.log(state.omega_tilde)[None, :]
    gamma, bad1 = _posterior(log_omega, log_scores)
    gamma_t, bad2 = _posterior(np.broadcast_to(log_omega_t, log_scores.shape), log_scores)
    omega_t = gamma_t.mean(axis=0)
    mu = state.mu_tilde
    omega = mu * gamma + (1.0 - mu) * omega_t[None, :]
    return WeightState(omega, omega_t, gamma, gamma_t, mu,
                       state.reset_count + int(bad1.sum() + bad2.sum()))


def e_step_naive(omega, omega_tilde, scores, mu_tilde):
    """Direct arithmetic on likelihood values (not logs). Test oracle only."""
    omega = np.asarray(omega, dtype=float)
    omega_tilde = np.asarray(omega_tilde, dtype=float)
    L = np.asarray(scores, dtype=float)
    N, K = L.shape
    gamma = np.zeros((N, K))
    gamma_t = np.zeros((N, K))
    for j in range(N):
        den = sum(omega[j, n] * L[j, n] for n in range(K))
        den_t = sum(omega_tilde[n] * L[j, n] for n in range(K))
        for k in range(K):
            gamma[j, k] = omega[j, k] * L[j, k] / den
            gamma_t[j, k] = omega_tilde[k] * L[j, k] / den_t
    new_omega_t = np.array([sum(gamma_t[j, k] for j in range(N)) / N for k in range(K)])
    new_omega = np.array([[mu_tilde * gamma[j, k] + (1 - mu_tilde) * new_omega_t[k] for k in range(K)]
                          for j in range(N)])
    return gamma, gamma_t, new_omega_t, new_omega


def _one_hot(k: int, K: int) -> np.ndarray:
    v = np.zeros(K)
    v[k] = 1.0
    return v


def hard_assign_ifca(losses) -> np.ndarray:
    """One-hot at the lowest expected loss; ties go to the lowest index."""
    losses = np.asarray(losses, dtype=float)
    return _one_hot(int(np.argmin(losses)), len(losses))


def hard_assign_fesem(client_params, cluster_params) -> np.ndarray:
    """One-hot at the nearest cluster parameter vector (Euclidean)."""
    theta = np.asarray(client_params, dtype=float).ravel()
    dists = []
    for p in cluster_params:
        p = np.asarray(p, dtype=float).ravel()
        if p.shape != theta.shape:
            raise ValueError(f"parameter shape {p.shape} != {theta.shape}")
        dists.append(np.linalg.norm(p - theta))
    return _one_hot(int(np.argmin(dists)), len(dists))


def hard_state(state: WeightState, one_hot: np.ndarray) -> WeightState:
    n = state.omega.shape[0]
    rows = np.tile(one_hot, (n, 1))
    return WeightState(rows.copy(), one_hot.copy(), rows.copy(), rows.copy(), state.mu_tilde, state.reset_count)


def test_time_mixture(omega_tilde, cluster_proba) -> np.ndarray:
    """Fuse per-cluster predictions with client weights.

    ``cluster_proba`` is (K, C) for one input or (N, K, C) for a batch.
    """
    w = np.asarray(omega_tilde, dtype=float)
    p = np.asarray(cluster_proba, dtype=float)
    return np.tensordot(p, w, axes=([p.ndim - 2], [0]))


def objective_a1(omega, log_scores) -> float:
    """Sum over samples of ``log sum_k omega[j, k] L_k`` (caller divides by N)."""
    with np.errstate(divide="ignore"):
        return float(logsumexp(np.log(np.asarray(omega)) + np.asarray(log_scores), axis=1).sum())
