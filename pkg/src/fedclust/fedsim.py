"""Round-synchronous federated simulation with soft clustering and adaptive K.

One round: sample clients, each computes prototypes under the current
extractor and runs ``local_update`` (weights refreshed once, then gradient
passes with the weights frozen); the server averages the extractor and every
head, recomputes per-cluster distance matrices, makes at most one split and
drops clusters nobody votes for.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adaptive
from .adaptive import ClusterState, Metric, PrototypeSet
from .clusterweights import TIER2_MODES, WeightState, e_step, hard_assign_fesem, hard_assign_ifca, hard_state
from .clusterweights import objective_a1, test_time_mixture
from .formulations import FORMULATIONS, make_formulation
from .models import (
    ClusterModel,
    NonFiniteLossError,
    average_models,
    cluster_log_proba,
    init_extractor,
    init_head,
    likelihood_and_grads,
    sgd_step,
)
from .seeding import derive_rng

SERVER_MODES = ("param_avg", "grad_agg")
THREADS_ENV = "FEDCLUST_THREADS"


class DivergenceError(RuntimeError):
    def __init__(self, round_index: int, reason: str = "non-finite objective"):
        super().__init__(f"diverged at round {round_index}: {reason}")
        self.round_index = round_index
        self.metrics = []


@dataclass
class RunConfig:
    rounds: int = 50
    clients_per_round: int | None = None  # None: every client, every round
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int | None = None  # None: full batch
    server_mode: str = "param_avg"
    server_lr: float = 1.0
    initial_clusters: int = 1
    formulation: str = "conditional"
    weight_mode: str = "soft"
    metric: str = "cscp"
    ablations: tuple = ()
    rho: float = float("inf")
    mu_tilde: float = 1.0
    # rounds before the first split and between consecutive splits
    split_warmup: int = 0
    split_cooldown: int = 0
    extractor: str = "linear"
    embed_dim: int = 8
    hidden: int = 32
    seed: int = 0

    def validate(self, num_clients: int | None = None) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.clients_per_round is not None:
            if self.clients_per_round < 1:
                raise ValueError("clients_per_round must be >= 1")
            if num_clients is not None and self.clients_per_round > num_clients:
                raise ValueError(f"clients_per_round={self.clients_per_round} exceeds {num_clients} clients")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.server_mode not in SERVER_MODES:
            raise ValueError(f"server_mode must be one of {SERVER_MODES}")
        if not self.server_lr > 0:
            raise ValueError("server_lr must be positive")
        if self.initial_clusters < 1:
            raise ValueError("initial_clusters must be >= 1")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {sorted(FORMULATIONS)}")
        if self.weight_mode not in TIER2_MODES:
            raise ValueError(f"weight_mode must be one of {TIER2_MODES}")
        Metric(self.metric, frozenset(self.ablations))
        if np.isnan(self.rho) or self.rho < 0:
            raise ValueError("rho must be >= 0")
        if not 0.0 <= self.mu_tilde <= 1.0:
            raise ValueError("mu_tilde must lie in [0, 1]")
        if self.split_warmup < 0 or self.split_cooldown < 0:
            raise ValueError("split_warmup and split_cooldown must be >= 0")
        if self.embed_dim < 1 or self.hidden < 1:
            raise ValueError("embed_dim and hidden must be >= 1")

    @property
    def metric_kind(self) -> Metric:
        return Metric(self.metric, frozenset(self.ablations))


@dataclass
class RoundMetrics:
    round: int
    k: int
    val_acc: float
    test_acc: float
    objective: float
    max_dist: float
    mean_dist: float
    splits: list = field(default_factory=list)
    removals: list = field(default_factory=list)
    wall_clock: float = 0.0

    def record(self) -> dict:
        """Deterministic part only (no timing), for metrics.jsonl."""
        out = asdict(self)
        out.pop("wall_clock")
        return out


@dataclass
class LocalResult:
    model: ClusterModel
    weights: WeightState
    f_mass: np.ndarray  # (K, C)
    n: int


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    state: ClusterState
    reports: list = field(default_factory=list)


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def init_model(config: RunConfig, in_dim: int, num_classes: int) -> ClusterModel:
    phi = init_extractor(config.extractor, in_dim, config.embed_dim, derive_rng(config.seed, "init-phi"),
                         hidden=config.hidden)
    heads = [init_head(config.embed_dim, num_classes, derive_rng(config.seed, "init-head", k))
             for k in range(config.initial_clusters)]
    return ClusterModel(phi, heads)


def _label_mass(gamma: np.ndarray, y: np.ndarray, num_classes: int) -> np.ndarray:
    return gamma.T @ np.eye(num_classes)[y]


def refresh_weights(client, model: ClusterModel, weights: WeightState, config: RunConfig,
                    formulation=None, fesem_params=None) -> tuple[WeightState, object]:
    """One weight update on the full local training set."""
    formulation = formulation or make_formulation(config.formulation)
    log_p = cluster_log_proba(model.phi, model.heads, client.x_train)
    formulation = formulation.update(np.exp(log_p))
    scores = formulation.scores(log_p, client.y_train)
    if config.weight_mode == "soft":
        return e_step(weights, scores), formulation
    if config.weight_mode == "fesem" and fesem_params is not None:
        one_hot = hard_assign_fesem(fesem_params, [h.flat() for h in model.heads])
    else:
        one_hot = hard_assign_ifca(-scores.mean(axis=0))
    return hard_state(weights, one_hot), formulation


def local_update(client, model: ClusterModel, weights: WeightState, config: RunConfig,
                 rng: np.random.Generator | None = None, fesem_params=None) -> LocalResult:
    """Weight refresh, then ``local_epochs`` passes of minibatch steps.

    Each step moves the heads first and then the extractor, with the
    extractor gradient taken at the freshly moved heads.
    """
    if weights.num_clusters != model.num_clusters:
        raise ValueError(f"weights have {weights.num_clusters} clusters, model has {model.num_clusters}")
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, formulation = refresh_weights(client, model, weights, config, fesem_params=fesem_params)
    x, y, gamma = client.x_train, client.y_train, weights.gamma
    n = len(y)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    local = model.copy()
    for _ in range(config.local_epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            coeffs = gamma[idx] / len(idx)
            _, grads = likelihood_and_grads(local.phi, local.heads, x[idx], y[idx], coeffs, formulation,
                                            parts=("heads",))
            local = sgd_step(local, grads, config.lr, parts=("heads",))
            _, grads = likelihood_and_grads(local.phi, local.heads, x[idx], y[idx], coeffs, formulation,
                                            parts=("phi",))
            local = sgd_step(local, grads, config.lr, parts=("phi",))
    f_mass = _label_mass(gamma, y, model.num_classes)
    return LocalResult(local, weights, f_mass, n)


def _server_aggregate(model: ClusterModel, results: list[LocalResult], config: RunConfig) -> ClusterModel:
    sizes = [r.n for r in results]
    avg = average_models([r.model for r in results], sizes)
    if config.server_mode == "param_avg":
        return avg
    # g_i = (N_i / sum N) (theta^t - theta_i); a unit server step reproduces averaging
    eta = config.server_lr
    out = model.copy()
    for key in out.phi.params:
        out.phi.params[key] = model.phi.params[key] - eta * (model.phi.params[key] - avg.phi.params[key])
    for k, head in enumerate(out.heads):
        head.weight = model.heads[k].weight - eta * (model.heads[k].weight - avg.heads[k].weight)
        head.bias = model.heads[k].bias - eta * (model.heads[k].bias - avg.heads[k].bias)
    return out


def _update_vectors(local: ClusterModel, base: ClusterModel) -> list[np.ndarray]:
    """Per-cluster flattened local update (extractor part + head k part)."""
    phi = np.concatenate([(local.phi.params[k] - base.phi.params[k]).ravel() for k in sorted(base.phi.params)])
    return [np.concatenate([phi, local.heads[k].flat() - base.heads[k].flat()]) for k in range(base.num_clusters)]


def evaluate(model: ClusterModel, weights: list[WeightState], clients, global_test) -> tuple[float, float]:
    """Mean val accuracy and mean global-test accuracy over clients."""
    test_proba = np.exp(cluster_log_proba(model.phi, model.heads, global_test.x)) if global_test is not None else None
    val, test = [], []
    for client, w in zip(clients, weights):
        if len(client.y_val):
            p = np.exp(cluster_log_proba(model.phi, model.heads, client.x_val))
            pred = test_time_mixture(w.omega_tilde, p).argmax(axis=1)
            val.append(float(np.mean(pred == client.y_val)))
        if test_proba is not None:
            pred = test_time_mixture(w.omega_tilde, test_proba).argmax(axis=1)
            test.append(float(np.mean(pred == global_test.labels_for(client.planted_concept))))
    return (float(np.mean(val)) if val else float("nan"),
            float(np.mean(test)) if test else float("nan"))


def global_objective(model: ClusterModel, weights: list[WeightState], clients, config: RunConfig) -> float:
    """Mean over all training samples of ``log sum_k omega L_k``."""
    total, count = 0.0, 0
    for client, w in zip(clients, weights):
        log_p = cluster_log_proba(model.phi, model.heads, client.x_train)
        form = make_formulation(config.formulation).update(np.exp(log_p))
        total += objective_a1(w.omega, form.scores(log_p, client.y_train))
        count += client.n_train
    return total / max(count, 1)


def _sample_clients(config: RunConfig, num_clients: int, t: int) -> list[int]:
    S = config.clients_per_round or num_clients
    if S >= num_clients:
        return list(range(num_clients))
    picked = derive_rng(config.seed, "sample", t).choice(num_clients, size=S, replace=False)
    return sorted(int(i) for i in picked)


def run(config: RunConfig, clients, global_test=None, model: ClusterModel | None = None,
        keep_reports: bool = False, on_round=None) -> RunResult:
    """Simulate ``config.rounds`` rounds. ``on_round(t, state)`` is called after each one."""
    config.validate(len(clients))
    if not clients:
        raise ValueError("no clients")
    C = int(max(int(np.max(c.y_train)) for c in clients if c.n_train) + 1)
    if global_test is not None:
        C = max(C, int(global_test.base_labels.max()) + 1)
    model = model.copy() if model is not None else init_model(config, clients[0].x_train.shape[1], C)
    K0 = model.num_clusters
    state = ClusterState(
        model,
        [WeightState.uniform(c.n_train, K0, config.mu_tilde) for c in clients],
        [np.zeros((K0, model.num_classes)) for _ in clients],
    )
    metric = config.metric_kind
    prototypes: dict[int, PrototypeSet] = {}
    fesem_cache: dict[int, np.ndarray] = {}  # last trained head of each client
    metrics: list[RoundMetrics] = []
    reports = []
    last_split = None
    threads = thread_count()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def client_job(args):
        t, i, base = args
        protos = adaptive.compute_prototypes(clients[i], base.phi, base.num_classes)
        res = local_update(clients[i], base, state.weights[i], config,
                           derive_rng(config.seed, "batch", t, i), fesem_cache.get(i))
        return protos, res

    try:
        for t in range(config.rounds):
            tic = time.perf_counter()
            sampled = _sample_clients(config, len(clients), t)
            base = state.model
            jobs = [(t, i, base) for i in sampled]
            try:
                outs = list(pool.map(client_job, jobs)) if pool else [client_job(j) for j in jobs]
            except NonFiniteLossError as exc:
                raise DivergenceError(t, str(exc)) from exc
            results = []
            for i, (protos, res) in zip(sampled, outs):
                if "gradcos" in metric.ablations:
                    protos.update = _update_vectors(res.model, base)
                prototypes[i] = protos
                state.weights[i] = res.weights
                state.f_latest[i] = res.f_mass
                results.append(res)
                if config.weight_mode == "fesem":
                    k_i = int(np.argmax(res.weights.omega_tilde))
                    fesem_cache[i] = res.model.heads[k_i].flat()
            new_model = _server_aggregate(base, results, config)
            state = ClusterState(new_model, state.weights, state.f_latest)

            # removal set is fixed from the votes before any split
            removals = adaptive.empty_clusters(state) if state.num_clusters > 1 else []
            report = adaptive.plan_split(prototypes,
                                         [w.omega_tilde for w in state.weights], state.num_clusters,
                                         metric, config.rho, eligible=set(prototypes))
            splits = []
            allowed = t >= config.split_warmup and (last_split is None or t - last_split > config.split_cooldown)
            if report.split is not None and not allowed:
                report.split = None
            if report.split is not None:
                last_split = t
                ks, _, part_a, part_b = report.split
                local_heads = {i: r.model.heads for i, r in zip(sampled, results)}
                sizes = {i: r.n for i, r in zip(sampled, results)}
                state = adaptive.apply_split(state, ks, part_a, part_b, local_heads, sizes)
                _split_caches(prototypes, ks)
                splits.append(ks)
            if removals and len(removals) < state.num_clusters:
                state = adaptive.remove_clusters(state, removals)
                _remove_caches(prototypes, removals)
            else:
                removals = []
            report.removals = list(removals)

            objective = global_objective(state.model, state.weights, clients, config)
            if not np.isfinite(objective):
                raise DivergenceError(t)
            val_acc, test_acc = evaluate(state.model, state.weights, clients, global_test)
            metrics.append(RoundMetrics(
                round=t, k=state.num_clusters, val_acc=val_acc, test_acc=test_acc, objective=objective,
                max_dist=report.max_dist, mean_dist=report.mean_dist, splits=splits,
                removals=list(removals), wall_clock=time.perf_counter() - tic,
            ))
            if keep_reports:
                reports.append(report)
            if on_round is not None:
                on_round(t, state)
    except DivergenceError as exc:
        exc.metrics = metrics  # rounds completed before the failure
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(metrics, state, reports)


def _split_caches(prototypes, k: int) -> None:
    for p in prototypes.values():
        if isinstance(p.update, list) and k < len(p.update):
            p.update.append(p.update[k])


def _remove_caches(prototypes, ks) -> None:
    drop = set(ks)
    for p in prototypes.values():
        if isinstance(p.update, list):
            p.update = [u for k, u in enumerate(p.update) if k not in drop]
