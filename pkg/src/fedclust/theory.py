"""Linear representation testbed.

Labels follow ``y = theta*_k^T B*^T x + z`` with a shared orthonormal ``B*``
(d x c) and one ``theta*_k`` per planted cluster. The solver alternates an
exact least-squares solve for every ``theta_k`` with one gradient step on
``B`` followed by a QR retraction, and we track the principal-angle distance
between the estimated and planted subspaces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

WEIGHT_MODES = ("oracle", "estimated")
INIT_MODES = ("random", "spectral")


class TheoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class TheorySpec:
    d: int = 20
    c: int = 2
    K: int = 3
    num_clients: int = 50
    samples_per_client: int = 20
    sigma: float = 0.0
    eta: float | None = None  # None: chosen so that c_max <= 0.5
    iterations: int = 500
    seed: int = 0
    weight_mode: str = "oracle"
    cluster_fractions: tuple | None = None  # None: balanced
    init: str = "random"

    def validate(self) -> None:
        if not 1 <= self.c <= self.d:
            raise ValueError("need 1 <= c <= d")
        if self.K < 1 or self.num_clients < 1 or self.samples_per_client < 1:
            raise ValueError("K, num_clients and samples_per_client must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.cluster_fractions is not None:
            f = np.asarray(self.cluster_fractions, dtype=float)
            if len(f) != self.K or np.any(f <= 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("cluster_fractions must be K positive numbers summing to 1")

    @property
    def total_samples(self) -> int:
        return self.num_clients * self.samples_per_client

    @property
    def regime_ok(self) -> bool:
        """The sample-size precondition ``N >= K^2 / (d + c)``."""
        return self.total_samples >= self.K ** 2 / (self.d + self.c)


@dataclass
class TheoryInstance:
    X: np.ndarray  # (N, d), clients stacked in order
    y: np.ndarray  # (N,)
    noise: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) planted cluster of each sample
    client: np.ndarray  # (N,) owning client
    B_star: np.ndarray  # (d, c)
    theta_star: np.ndarray  # (K, c)

    @property
    def omega(self) -> np.ndarray:
        """Planted binary weights, (N, K)."""
        return np.eye(self.theta_star.shape[0])[self.labels]

    def client_data(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.client == i
        return self.X[sel], self.y[sel]


@dataclass
class ConvergenceReport:
    dists: list[float]
    residuals: list[list[float]]  # per iteration, per-cluster mean squared residual
    n_hat: np.ndarray
    total: int
    e0: float
    eta: float
    sigma_min_star: float
    kappa: float
    c_min: dict = field(default_factory=dict)  # keyed by normalisation: "linear", "squared"
    c_max: dict = field(default_factory=dict)
    theta_errors: list[float] = field(default_factory=list)
    sigma: float = 0.0
    regime_ok: bool = True

    def bound_factor(self, norm: str = "linear") -> float:
        return contraction_factor(self.c_min[norm], self.c_max[norm])

    def noise_floor(self, tail: float = 0.2) -> float:
        n = max(1, int(len(self.dists) * tail))
        return float(np.mean(self.dists[-n:]))


def contraction_factor(c_min: float, c_max: float) -> float:
    if c_max >= 2.0:
        return float("inf")
    return (1.0 - c_min + 57.0 / 200.0 * c_max) / math.sqrt(1.0 - 0.5 * c_max)


def orthonormalize(B: np.ndarray) -> np.ndarray:
    """Q factor of ``B`` with the sign convention diag(R) > 0."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    Q, R = np.linalg.qr(B)
    diag = np.diag(R)
    if np.any(np.abs(diag) <= 1e-12 * max(1.0, np.abs(R).max())):
        raise TheoryError("rank-deficient basis")
    return Q * np.where(diag < 0, -1.0, 1.0)


def principal_angle_dist(B1: np.ndarray, B2: np.ndarray) -> float:
    """Spectral norm of the component of span(B2) orthogonal to span(B1)."""
    Q1, Q2 = orthonormalize(B1), orthonormalize(B2)
    if Q1.shape[0] != Q2.shape[0]:
        raise ValueError("ambient dimensions differ")
    resid = Q2 - Q1 @ (Q1.T @ Q2)
    return float(min(1.0, np.linalg.norm(resid, 2)))


def _planted_labels(spec: TheorySpec, rng: np.random.Generator) -> np.ndarray:
    N = spec.total_samples
    frac = (np.full(spec.K, 1.0 / spec.K) if spec.cluster_fractions is None
            else np.asarray(spec.cluster_fractions, dtype=float))
    counts = np.floor(frac * N).astype(int)
    # hand the rounding remainder to the largest fractional parts
    rem = N - counts.sum()
    order = np.argsort(-(frac * N - counts), kind="stable")
    counts[order[:rem]] += 1
    labels = np.repeat(np.arange(spec.K), counts)
    return rng.permutation(labels)


def generate_theory_instance(spec: TheorySpec) -> TheoryInstance:
    spec.validate()
    # planted parameters come from their own stream so changing N keeps them fixed
    planted = derive_rng(spec.seed, "theory-planted")
    B_star = orthonormalize(planted.standard_normal((spec.d, spec.c)))
    theta = planted.standard_normal((spec.K, spec.c))
    theta *= math.sqrt(spec.c) / np.linalg.norm(theta, axis=1, keepdims=True)
    rng = derive_rng(spec.seed, "theory-samples")
    labels = _planted_labels(spec, rng)
    N = spec.total_samples
    X = rng.standard_normal((N, spec.d))
    noise = spec.sigma * rng.standard_normal(N)
    y = np.einsum("nc,nc->n", X @ B_star, theta[labels]) + noise
    client = np.repeat(np.arange(spec.num_clients), spec.samples_per_client)
    return TheoryInstance(X, y, noise, labels, client, B_star, theta)


def sigma_min_star(theta_star: np.ndarray) -> float:
    """Smallest singular value over K-row subsets, which is the full matrix here."""
    return float(np.linalg.svd(theta_star, compute_uv=False).min())


def default_eta(spec: TheorySpec, inst: TheoryInstance) -> float:
    """Step with ``c_max <= 0.5``, capped at the inverse curvature of the basis step.

    The cap only bites for ill-conditioned planted heads, where the first
    rule alone overshoots along the strongest direction.
    """
    n_hat = np.bincount(inst.labels, minlength=spec.K)
    frac = n_hat / len(inst.y)
    s = sigma_min_star(inst.theta_star)
    curvature = np.linalg.svd(np.sqrt(frac)[:, None] * inst.theta_star, compute_uv=False).max() ** 2
    return min(0.5 / (spec.K * frac.max() * s ** 2), 1.0 / curvature)


def solve_heads(B_hat: np.ndarray, X: np.ndarray, y: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-cluster least squares for theta_k restricted to the cluster's samples."""
    N = len(y)
    K = omega.shape[1]
    c = B_hat.shape[1]
    XB = X @ B_hat
    theta = np.zeros((K, c))
    for k in range(K):
        w = omega[:, k]
        if w.sum() < c:
            raise TheoryError(f"cluster {k} has {int(w.sum())} samples, need at least {c}")
        A = (XB * w[:, None]).T @ XB / N
        b = (XB * w[:, None]).T @ y / N
        try:
            theta[k] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise TheoryError(f"singular normal equations for cluster {k}") from exc
    return theta


def basis_gradient(B_hat: np.ndarray, theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                   omega: np.ndarray) -> np.ndarray:
    N = len(y)
    G = np.zeros_like(B_hat)
    for k in range(theta.shape[0]):
        w = omega[:, k]
        Xw = X * w[:, None]
        G += (Xw.T @ (X @ (B_hat @ theta[k])) - Xw.T @ y)[:, None] @ theta[k][None, :]
    return G / N


def alt_min_step(B_hat: np.ndarray, X: np.ndarray, y: np.ndarray, omega: np.ndarray,
                 eta: float) -> tuple[np.ndarray, np.ndarray]:
    theta = solve_heads(B_hat, X, y, omega)
    B = B_hat - eta * basis_gradient(B_hat, theta, X, y, omega)
    return theta, orthonormalize(B)


def theta_decomposition(B_hat, X, y, omega, noise, B_star, theta_star):
    """Split each least-squares head into its aligned part plus the two error terms.

    Returns ``(aligned, F, G)`` with shape (K, c) each so that
    ``solve_heads(...) == aligned + F + G``.
    """
    N = len(y)
    K = omega.shape[1]
    XB = X @ B_hat
    aligned, F, G = (np.zeros((K, B_hat.shape[1])) for _ in range(3))
    P = B_hat @ B_hat.T
    for k in range(K):
        w = omega[:, k]
        Xw = X * w[:, None]
        A_inv = np.linalg.inv(B_hat.T @ Xw.T @ X @ B_hat / N)
        target = B_star @ theta_star[k]
        aligned[k] = B_hat.T @ target
        F[k] = A_inv @ (B_hat.T @ Xw.T @ X @ target / N) - A_inv @ (B_hat.T @ Xw.T @ X @ P @ target / N)
        G[k] = A_inv @ (B_hat.T @ Xw.T @ (noise * w) / N)
    return aligned, F, G


def spectral_init(X: np.ndarray, y: np.ndarray, c: int) -> np.ndarray:
    """Top-c eigenvectors of ``mean(y^2 x x^T)``."""
    M = (X * (y ** 2)[:, None]).T @ X / len(y)
    vals, vecs = np.linalg.eigh(M)
    return orthonormalize(vecs[:, ::-1][:, :c])


def _estimated_omega(theta, B_hat, X, y) -> np.ndarray:
    pred = (X @ B_hat) @ theta.T  # (N, K)
    resid = (y[:, None] - pred) ** 2
    return np.eye(theta.shape[0])[resid.argmin(axis=1)]


def run(spec: TheorySpec, inst: TheoryInstance | None = None,
        B0: np.ndarray | None = None) -> tuple[ConvergenceReport, np.ndarray, np.ndarray]:
    """Iterate the alternating solver. Returns (report, final B_hat, final theta)."""
    spec.validate()
    inst = inst or generate_theory_instance(spec)
    X, y = inst.X, inst.y
    if B0 is not None:
        B_hat = orthonormalize(B0)
    elif spec.init == "spectral":
        B_hat = spectral_init(X, y, spec.c)
    else:
        B_hat = orthonormalize(derive_rng(spec.seed, "theory-init").standard_normal((spec.d, spec.c)))
    eta = default_eta(spec, inst) if spec.eta is None else spec.eta
    omega = inst.omega
    if spec.weight_mode == "estimated":
        omega = np.eye(spec.K)[derive_rng(spec.seed, "theory-omega").integers(spec.K, size=len(y))]

    N = len(y)
    n_hat = omega.sum(axis=0)
    s_min = sigma_min_star(inst.theta_star)
    svals = np.linalg.svd(inst.theta_star, compute_uv=False)
    d0 = principal_angle_dist(B_hat, inst.B_star)
    e0 = 1.0 - d0 ** 2
    dists = [d0]
    residuals = []
    theta = None
    for _ in range(spec.iterations):
        if spec.weight_mode == "estimated" and theta is not None:
            omega = _estimated_omega(theta, B_hat, X, y)
        theta, B_hat = alt_min_step(B_hat, X, y, omega, eta)
        dists.append(principal_angle_dist(B_hat, inst.B_star))
        pred = (X @ B_hat) @ theta.T
        r = (y[:, None] - pred) ** 2
        residuals.append([float(r[omega[:, k] > 0, k].mean()) if omega[:, k].any() else float("nan")
                          for k in range(spec.K)])

    report = ConvergenceReport(
        dists=dists, residuals=residuals, n_hat=n_hat, total=N, e0=e0, eta=eta,
        sigma_min_star=s_min, kappa=float(svals.max() / svals.min()), sigma=spec.sigma,
        regime_ok=spec.regime_ok,
    )
    for name, power in (("linear", 1), ("squared", 2)):
        report.c_min[name] = eta * spec.K * (n_hat.min() / N) ** power * s_min ** 2 * e0
        report.c_max[name] = eta * spec.K * (n_hat.max() / N) ** power * s_min ** 2 * e0
    if theta is not None:
        report.theta_errors = [float(np.linalg.norm(theta[k] - B_hat.T @ inst.B_star @ inst.theta_star[k]))
                               for k in range(spec.K)]
    return report, B_hat, theta


def fitted_rate(dists, start: int = 5, floor: float = 1e-10) -> float:
    """Geometric per-step ratio from a log-linear fit of the trace above ``floor``."""
    d = np.asarray(dists, dtype=float)
    idx = np.arange(len(d))
    keep = (idx >= start) & (d > floor)
    # only the leading run above the floor counts
    if keep.any():
        first = int(np.argmax(keep))
        stop = first
        while stop < len(d) and keep[stop]:
            stop += 1
        keep = np.zeros_like(keep)
        keep[first:stop] = True
    if keep.sum() < 2:
        raise TheoryError("not enough points above the floor to fit a rate")
    slope = np.polyfit(idx[keep], np.log(d[keep]), 1)[0]
    return float(np.exp(slope))


def monotone_after(dists, start: int = 5, floor: float = 1e-10) -> bool:
    """Strictly decreasing from ``start`` until the trace reaches ``floor``."""
    d = np.asarray(dists, dtype=float)[start:]
    for a, b in zip(d[:-1], d[1:]):
        if a <= floor:
            break
        if not b < a:
            return False
    return True


@dataclass
class ContractionCheck:
    passed: bool
    rate: float
    bound: float
    bound_linear: float
    bound_squared: float
    floor: float | None = None
    floor_doubled: float | None = None
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed, "fitted_rate": self.rate, "bound_factor": self.bound,
            "bound_factor_linear": self.bound_linear, "bound_factor_squared": self.bound_squared,
            "noise_floor": self.floor, "noise_floor_doubled": self.floor_doubled, "notes": list(self.notes),
        }


def verify_contraction(report: ConvergenceReport, doubled: ConvergenceReport | None = None,
                       slack: float = 0.05, start: int = 5) -> ContractionCheck:
    """Compare the fitted per-step ratio with the one-step bound (looser normalisation).

    With noise, the rate is fitted above ten times the observed floor, and if
    a run with twice the samples is given its floor must be smaller.
    """
    if len(report.dists) < 10:
        raise TheoryError("trace too short (need at least 10 points)")
    b_lin, b_sq = report.bound_factor("linear"), report.bound_factor("squared")
    bound = max(b_lin, b_sq)
    notes = []
    floor = None
    cut = 1e-10
    if report.sigma > 0:
        floor = report.noise_floor()
        cut = max(cut, 10 * floor)
    try:
        rate = fitted_rate(report.dists, start, cut)
    except TheoryError as exc:
        notes.append(str(exc))
        rate = float("nan")
    passed = bool(np.isfinite(rate) and rate < 1.0 and rate <= bound + slack)
    if not passed:
        notes.append(f"rate {rate:.4f} vs bound {bound:.4f} + {slack}")
    floor2 = None
    if doubled is not None:
        floor = report.noise_floor() if floor is None else floor
        floor2 = doubled.noise_floor()
        ok = np.isfinite(floor) and floor2 < floor
        if not ok:
            notes.append(f"noise floor did not shrink: {floor:.3g} -> {floor2:.3g}")
        passed = passed and bool(ok)
    return ContractionCheck(passed, rate, bound, b_lin, b_sq, floor, floor2, notes)
