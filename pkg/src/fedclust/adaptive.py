"""Adaptive cluster count: prototypes, client distances, split and removal."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .clusterweights import WeightState
from .models import ClusterHead, ClusterModel, FeatureExtractor, average_heads

BASE_METRICS = ("ascp", "cscp")
ABLATIONS = ("gradcos", "noconf", "mean")


@dataclass
class PrototypeSet:
    class_protos: np.ndarray  # (C, c); rows of absent classes are NaN
    present: np.ndarray  # (C,) bool
    counts: np.ndarray  # (C,)
    mean_proto: np.ndarray  # (c,)
    # flattened local update for the gradient-cosine ablation; either one
    # vector or a list indexed by cluster
    update: np.ndarray | list | None = None


@dataclass(frozen=True)
class Metric:
    base: str = "cscp"
    ablations: frozenset = frozenset()

    def __post_init__(self):
        if self.base not in BASE_METRICS:
            raise ValueError(f"unknown metric {self.base!r}")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}")
        object.__setattr__(self, "ablations", frozenset(self.ablations))

    @property
    def label(self) -> str:
        return "+".join([self.base, *sorted(self.ablations)])


@dataclass
class ClusterState:
    """Everything a split or a removal has to keep consistent."""

    model: ClusterModel
    weights: list[WeightState]  # one per client
    f_latest: list[np.ndarray]  # per client, (K, C) label mass per cluster

    @property
    def num_clusters(self) -> int:
        return self.model.num_clusters

    def f_global(self) -> np.ndarray:
        return np.sum(self.f_latest, axis=0)


@dataclass
class DistanceReport:
    metric: str
    members: dict[int, list[int]]
    matrices: dict[int, np.ndarray]
    split: tuple | None = None  # (cluster, (seed_a, seed_b), part_a, part_b)
    removals: list[int] = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)

    @property
    def max_dist(self) -> float:
        vals = [float(D.max()) for D in self.matrices.values() if D.size]
        return max(vals) if vals else 0.0

    @property
    def mean_dist(self) -> float:
        offs = [D[~np.eye(len(D), dtype=bool)] for D in self.matrices.values() if len(D) > 1]
        return float(np.concatenate(offs).mean()) if offs else 0.0


def compute_prototypes(client, phi: FeatureExtractor, num_classes: int) -> PrototypeSet:
    x, y = client.x_train, np.asarray(client.y_train)
    if len(y) == 0:
        raise ValueError("client has no training samples")
    z, _ = phi.forward(x)
    counts = np.bincount(y, minlength=num_classes)
    protos = np.full((num_classes, z.shape[1]), np.nan)
    sums = np.zeros((num_classes, z.shape[1]))
    np.add.at(sums, y, z)
    present = counts > 0
    protos[present] = sums[present] / counts[present, None]
    return PrototypeSet(protos, present, counts, z.mean(axis=0))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos(a, b)``, in [0, 2]. A zero vector is at distance 1 from
    anything non-zero and 0 from another zero vector."""
    if np.array_equal(a, b):
        return 0.0  # exact, where the rounded cosine may miss 1 by an ulp
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0 if na == nb else 1.0
    cos = float(np.dot(a, b) / (na * nb))
    return float(max(0.0, 1.0 - min(1.0, max(-1.0, cos))))


def _class_distance(pi: PrototypeSet, pj: PrototypeSet, use_mean: bool, diagnostics: Counter | None) -> float:
    shared = np.flatnonzero(pi.present & pj.present)
    if len(shared) == 0:
        if diagnostics is not None:
            diagnostics["no_shared_class"] += 1
        return 0.0
    d = [cosine_distance(pi.class_protos[c], pj.class_protos[c]) for c in shared]
    return float(np.mean(d) if use_mean else np.max(d))


def client_distance(pi: PrototypeSet, wi, pj: PrototypeSet, wj, k: int, metric: Metric,
                    diagnostics: Counter | None = None) -> float:
    if "gradcos" in metric.ablations:
        if pi.update is None or pj.update is None:
            raise ValueError("gradient-cosine metric needs local updates")
        ui = pi.update[k] if isinstance(pi.update, list) else pi.update
        uj = pj.update[k] if isinstance(pj.update, list) else pj.update
        base = cosine_distance(ui, uj)
    else:
        base = _class_distance(pi, pj, "mean" in metric.ablations, diagnostics)
        if metric.base == "ascp":
            base = max(base, cosine_distance(pi.mean_proto, pj.mean_proto))
    if "noconf" in metric.ablations:
        return base
    return base * (float(wi[k]) * float(wj[k]))


def cluster_members(omega_tildes, num_clusters: int, eligible=None) -> dict[int, list[int]]:
    """Clients grouped by their argmax client-wise weight."""
    members = {k: [] for k in range(num_clusters)}
    for i, w in enumerate(omega_tildes):
        if eligible is None or i in eligible:
            members[int(np.argmax(w))].append(i)
    return members


def distance_matrix(prototypes: dict, omega_tildes, members: list[int], k: int, metric: Metric,
                    diagnostics: Counter | None = None) -> np.ndarray:
    n = len(members)
    D = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            i, j = members[a], members[b]
            D[a, b] = D[b, a] = client_distance(
                prototypes[i], omega_tildes[i], prototypes[j], omega_tildes[j], k, metric, diagnostics
            )
    return D


def split_gap(D: np.ndarray) -> float:
    """max(D) - mean of off-diagonal entries; 0 for fewer than two members."""
    n = len(D)
    if n < 2:
        return 0.0
    off = D[~np.eye(n, dtype=bool)]
    return float(off.max() - off.mean())


def split_condition(D: np.ndarray, rho: float) -> bool:
    if len(D) < 2:
        return False
    return split_gap(D) >= rho


def bipartition(D: np.ndarray, members: list[int]) -> tuple[list[int], list[int]]:
    """Seed with the farthest pair, then attach each member to its nearer seed."""
    n = len(members)
    if n < 2:
        raise ValueError("need at least two members to split")
    a, b, best = 0, 1, -np.inf
    for i in range(n):
        for j in range(i + 1, n):
            if D[i, j] > best:
                a, b, best = i, j, D[i, j]
    part_a, part_b = [], []
    for i in range(n):
        if i == a or (i != b and D[i, a] <= D[i, b]):
            part_a.append(members[i])
        else:
            part_b.append(members[i])
    return part_a, part_b


def _halve_column(arr: np.ndarray, k: int) -> np.ndarray:
    arr = arr.copy()
    arr[..., k] /= 2.0
    return np.concatenate([arr, arr[..., k:k + 1]], axis=-1)


def apply_split(state: ClusterState, k: int, part_a, part_b,
                local_heads: dict[int, list[ClusterHead]] | None = None,
                sizes: dict[int, int] | None = None) -> ClusterState:
    """Append cluster K as a child of k; both children carry half of k's weight.

    Heads are re-averaged from the local heads of each sub-cluster's clients
    when available; a side without local heads inherits the parent head.
    """
    if len(part_a) == 0 or len(part_b) == 0:
        raise ValueError("cannot split a singleton cluster")
    local_heads = local_heads or {}
    sizes = sizes or {}
    model = state.model.copy()
    parent = model.heads[k]

    def side_head(part):
        ids = [i for i in part if i in local_heads]
        if not ids:
            return parent.copy()
        return average_heads([local_heads[i][k] for i in ids], [sizes.get(i, 1) for i in ids])

    model.heads[k], new_head = side_head(part_a), side_head(part_b)
    model.heads.append(new_head)
    weights = []
    for w in state.weights:
        weights.append(WeightState(
            _halve_column(w.omega, k), _halve_column(w.omega_tilde, k),
            _halve_column(w.gamma, k), _halve_column(w.gamma_tilde, k),
            w.mu_tilde, w.reset_count,
        ))
    f_latest = [np.concatenate([f, f[k:k + 1]], axis=0) for f in state.f_latest]
    return ClusterState(model, weights, f_latest)


def empty_clusters(state: ClusterState) -> list[int]:
    votes = np.zeros(state.num_clusters, dtype=int)
    for w in state.weights:
        votes[int(np.argmax(w.omega_tilde))] += 1
    return [int(k) for k in np.flatnonzero(votes == 0)]


def _drop_renormalise(arr: np.ndarray, keep: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    kept = arr[..., keep]
    total = kept.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = kept / total
    if fallback is not None:
        dead = (total[..., 0] <= 0)
        if np.any(dead):
            out[dead] = fallback
    return out


def remove_clusters(state: ClusterState, ks) -> ClusterState:
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        return state
    if len(ks) >= state.num_clusters:
        raise ValueError("refusing to remove every cluster")
    keep = np.array([k for k in range(state.num_clusters) if k not in ks])
    model = ClusterModel(state.model.phi.copy(), [state.model.heads[k].copy() for k in keep])
    weights = []
    for w in state.weights:
        ot = _drop_renormalise(w.omega_tilde, keep)
        weights.append(WeightState(
            _drop_renormalise(w.omega, keep, ot),
            ot,
            _drop_renormalise(w.gamma, keep, ot),
            _drop_renormalise(w.gamma_tilde, keep, ot),
            w.mu_tilde, w.reset_count,
        ))
    f_latest = [f[keep] for f in state.f_latest]
    return ClusterState(model, weights, f_latest)


def detect_and_remove_empty(state: ClusterState) -> tuple[ClusterState, list[int]]:
    if state.num_clusters < 2:
        return state, []
    ks = empty_clusters(state)
    return remove_clusters(state, ks), ks


def plan_split(prototypes: dict, omega_tildes, num_clusters: int, metric: Metric, rho: float,
               eligible=None) -> DistanceReport:
    """Distance matrices for every cluster and the (at most one) split to make."""
    members = cluster_members(omega_tildes, num_clusters, eligible)
    report = DistanceReport(metric.label, members, {})
    for k in range(num_clusters):
        report.matrices[k] = distance_matrix(prototypes, omega_tildes, members[k], k, metric, report.diagnostics)
    candidates = [k for k in range(num_clusters) if len(members[k]) >= 2]
    if candidates:
        # first maximum wins on ties
        ks = max(candidates, key=lambda k: (report.matrices[k].max(), -k))
        D = report.matrices[ks]
        if split_condition(D, rho):
            part_a, part_b = bipartition(D, members[ks])
            report.split = (ks, (part_a[0], part_b[0]), part_a, part_b)
    return report
