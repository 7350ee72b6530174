"""Synthetic multi-client scenarios with planted label, feature and concept shifts.

Base data are class-conditional isotropic Gaussians. Each client gets

* Dirichlet(alpha) label proportions (label distribution shift),
* one affine "augmentation" applied to all of its inputs (feature shift),
* one concept, i.e. a cyclic relabelling of the first ``m`` classes
  (concept shift),
* optional pair-flip / symmetric-flip noise on its training labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

NOISE_KINDS = ("none", "pairflip", "symflip")

# distance between any two class means
CLASS_SEPARATION = 6.0
TRAIN_FRACTION = 0.70
VAL_FRACTION = 0.15
MAX_PROPORTION_RETRIES = 20

# augmentation strength
ROTATION_RANGE = (np.pi / 10, np.pi / 5)
SCALE_RANGE = (0.8, 1.25)
BIAS_NORM = 3.0

CONFIG_KEYS = (
    "m_clients",
    "n_classes",
    "samples_per_client",
    "feature_dim",
    "lda_alpha",
    "concepts",
    "beta",
    "feature_shift_kinds",
    "noise_kind",
    "noise_rate",
    "seed",
)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    num_clients: int
    num_classes: int
    samples_per_client: int
    feature_dim: int
    lda_alpha: float = 1.0
    concept_count: int = 3
    beta: float = 0.0
    feature_shift_kinds: int = 1
    noise_kind: str = "none"
    noise_rate: float = 0.0
    master_seed: int = 0

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ScenarioError("num_clients must be >= 1")
        if self.num_classes < 2:
            raise ScenarioError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ScenarioError("feature_dim must be >= 1")
        if not self.lda_alpha > 0:
            raise ScenarioError("lda_alpha must be positive")
        if self.concept_count < 1:
            raise ScenarioError("concept_count must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ScenarioError("beta must lie in [0, 1]")
        if self.feature_shift_kinds < 1:
            raise ScenarioError("feature_shift_kinds must be >= 1 (kind 0 is the identity)")
        if self.noise_kind not in NOISE_KINDS:
            raise ScenarioError(f"noise_kind must be one of {NOISE_KINDS}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ScenarioError("noise_rate must lie in [0, 1)")
        n_train, n_val, n_test = partition_sizes(self.samples_per_client)
        if min(n_train, n_val, n_test) < 1:
            raise ScenarioError(
                f"samples_per_client={self.samples_per_client} leaves an empty train/val/test partition"
            )

    def to_config(self) -> dict:
        return {
            "m_clients": self.num_clients,
            "n_classes": self.num_classes,
            "samples_per_client": self.samples_per_client,
            "feature_dim": self.feature_dim,
            "lda_alpha": self.lda_alpha,
            "concepts": self.concept_count,
            "beta": self.beta,
            "feature_shift_kinds": self.feature_shift_kinds,
            "noise_kind": self.noise_kind,
            "noise_rate": self.noise_rate,
            "seed": self.master_seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ScenarioSpec":
        unknown = set(cfg) - set(CONFIG_KEYS)
        if unknown:
            raise ScenarioError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
        required = ("m_clients", "n_classes", "samples_per_client", "feature_dim")
        missing = [k for k in required if k not in cfg]
        if missing:
            raise ScenarioError(f"missing scenario key(s): {', '.join(missing)}")
        spec = cls(
            num_clients=int(cfg["m_clients"]),
            num_classes=int(cfg["n_classes"]),
            samples_per_client=int(cfg["samples_per_client"]),
            feature_dim=int(cfg["feature_dim"]),
            lda_alpha=float(cfg.get("lda_alpha", 1.0)),
            concept_count=int(cfg.get("concepts", 3)),
            beta=float(cfg.get("beta", 0.0)),
            feature_shift_kinds=int(cfg.get("feature_shift_kinds", 1)),
            noise_kind=str(cfg.get("noise_kind", "none")),
            noise_rate=float(cfg.get("noise_rate", 0.0)),
            master_seed=int(cfg.get("seed", 0)),
        )
        spec.validate()
        return spec


@dataclass
class ClientDataset:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    planted_concept: int
    planted_augmentation: int
    label_proportions: np.ndarray
    # sample indices into the client's pre-split pool, kept for disjointness checks
    train_idx: np.ndarray = field(repr=False, default=None)
    val_idx: np.ndarray = field(repr=False, default=None)
    test_idx: np.ndarray = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return len(self.y_train)


@dataclass
class GlobalTestSet:
    """Shared test inputs; labels are stored once per concept."""

    x: np.ndarray
    base_labels: np.ndarray
    augmentation: np.ndarray
    labels_by_concept: dict[int, np.ndarray]

    def labels_for(self, concept: int) -> np.ndarray:
        return self.labels_by_concept[concept]

    @property
    def concepts(self) -> list[int]:
        return sorted(self.labels_by_concept)


def partition_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(TRAIN_FRACTION * n))
    n_val = int(round(VAL_FRACTION * n))
    return n_train, n_val, n - n_train - n_val


def permuted_label_count(num_classes: int, beta: float) -> int:
    """Number of leading labels that take part in the concept permutation."""
    if beta <= 0:
        return 0
    m = int(np.floor(num_classes * beta + 0.5))
    return min(num_classes, max(2, m))


def apply_concept_shift(labels, concept_id: int, num_classes: int, beta: float) -> np.ndarray:
    """Relabel ``y < m`` as ``(y + concept_id) mod m``; other labels pass through.

    >>> apply_concept_shift([0, 1, 9], 1, 10, 0.1).tolist()
    [1, 0, 9]
    """
    labels = np.asarray(labels, dtype=np.int64)
    m = permuted_label_count(num_classes, beta)
    if m == 0 or concept_id % m == 0:
        return labels.copy()
    out = labels.copy()
    mask = labels < m
    out[mask] = (labels[mask] + concept_id) % m
    return out


def apply_label_noise(labels, kind: str, rate: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if kind not in NOISE_KINDS:
        raise ScenarioError(f"unknown noise kind {kind!r}")
    if not 0.0 <= rate < 1.0 + 1e-12:
        raise ScenarioError("noise rate must lie in [0, 1]")
    if kind == "none" or rate == 0.0:
        return labels.copy()
    flip = rng.random(labels.shape) < rate
    out = labels.copy()
    if kind == "pairflip":
        out[flip] = (labels[flip] + 1) % num_classes
    else:
        offsets = rng.integers(1, num_classes, size=labels.shape)
        out[flip] = (labels[flip] + offsets[flip]) % num_classes
    return out


def class_means(spec: ScenarioSpec) -> np.ndarray:
    rng = derive_rng(spec.master_seed, "class-means")
    d, C = spec.feature_dim, spec.num_classes
    if C <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, C)))
        directions = q.T
    else:
        g = rng.standard_normal((C, d))
        directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    # orthonormal directions scaled this way sit CLASS_SEPARATION apart
    return directions * (CLASS_SEPARATION / np.sqrt(2.0))


def augmentation_transform(seed: int, aug_id: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(A, b) such that the augmented input is ``A @ x + b``. Id 0 is the identity."""
    if aug_id == 0:
        return np.eye(dim), np.zeros(dim)
    rng = derive_rng(seed, "augmentation", aug_id)
    scale = rng.uniform(*SCALE_RANGE, size=dim)
    A = np.diag(scale)
    if dim >= 2:
        plane, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
        angle = rng.uniform(*ROTATION_RANGE) * rng.choice([-1.0, 1.0])
        u, v = plane[:, 0], plane[:, 1]
        # rotation by `angle` inside span(u, v), identity on the complement
        R = (
            np.eye(dim)
            + (np.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + np.sin(angle) * (np.outer(v, u) - np.outer(u, v))
        )
        A = R @ A
    b = rng.standard_normal(dim)
    b *= BIAS_NORM / np.linalg.norm(b)
    return A, b


def _augment(x: np.ndarray, transform: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    A, b = transform
    return x @ A.T + b


def _draw_proportions(rng: np.random.Generator, alpha: float, num_classes: int, client_id: int) -> np.ndarray:
    for _ in range(MAX_PROPORTION_RETRIES):
        with np.errstate(all="ignore"):
            p = rng.dirichlet(np.full(num_classes, alpha))
        if np.all(np.isfinite(p)) and p.sum() > 0:
            return p / p.sum()
    raise ScenarioError(
        f"client {client_id}: Dirichlet proportions degenerate after {MAX_PROPORTION_RETRIES} draws"
    )


def generate_client(spec: ScenarioSpec, client_id: int, means: np.ndarray) -> ClientDataset:
    rng = derive_rng(spec.master_seed, "client", client_id)
    C, d, n = spec.num_classes, spec.feature_dim, spec.samples_per_client
    concept = client_id % spec.concept_count
    aug_id = int(rng.integers(spec.feature_shift_kinds))
    n_train, n_val, _ = partition_sizes(n)

    proportions = _draw_proportions(rng, spec.lda_alpha, C, client_id)
    counts = rng.multinomial(n, proportions)
    base = np.repeat(np.arange(C), counts)
    perm = rng.permutation(n)
    base = base[perm]
    x = means[base] + rng.standard_normal((n, d))
    x = _augment(x, augmentation_transform(spec.master_seed, aug_id, d))
    y = apply_concept_shift(base, concept, C, spec.beta)

    idx = np.arange(n)
    tr, va, te = idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]
    y_train = apply_label_noise(y[tr], spec.noise_kind, spec.noise_rate, C, rng)
    return ClientDataset(
        client_id=client_id,
        x_train=x[tr], y_train=y_train,
        x_val=x[va], y_val=y[va].copy(),
        x_test=x[te], y_test=y[te].copy(),
        planted_concept=concept,
        planted_augmentation=aug_id,
        label_proportions=proportions,
        train_idx=tr, val_idx=va, test_idx=te,
    )


def generate_global_test(spec: ScenarioSpec, means: np.ndarray, size: int) -> GlobalTestSet:
    rng = derive_rng(spec.master_seed, "global-test")
    C, d = spec.num_classes, spec.feature_dim
    base = np.arange(size) % C
    aug = rng.integers(spec.feature_shift_kinds, size=size)
    x = means[base] + rng.standard_normal((size, d))
    for a in np.unique(aug):
        sel = aug == a
        x[sel] = _augment(x[sel], augmentation_transform(spec.master_seed, int(a), d))
    labels = {c: apply_concept_shift(base, c, C, spec.beta) for c in range(spec.concept_count)}
    return GlobalTestSet(x=x, base_labels=base, augmentation=aug, labels_by_concept=labels)


def generate_scenario(spec: ScenarioSpec, global_test_size: int | None = None
                      ) -> tuple[list[ClientDataset], GlobalTestSet]:
    spec.validate()
    means = class_means(spec)
    clients = [generate_client(spec, i, means) for i in range(spec.num_clients)]
    size = global_test_size or 40 * spec.num_classes
    return clients, generate_global_test(spec, means, size)
