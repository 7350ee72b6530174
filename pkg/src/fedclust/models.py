"""Shared feature extractor + per-cluster softmax heads, with analytic gradients.

Everything is plain numpy. The extractor maps ``x -> z`` (linear, or a one
hidden layer tanh MLP) and each cluster head is a softmax-linear classifier on
``z``. ``likelihood_and_grads`` returns per-sample, per-cluster log-scores and
the gradient of the weighted negative log-score

    J = - sum_j sum_k coeff[j, k] * log L_k(x_j, y_j)

so descending along the returned bundle ascends the weighted likelihood.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .formulations import Conditional

EXTRACTOR_KINDS = ("linear", "mlp1")
CHECKPOINT_FORMAT = "fedclust-checkpoint/1"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite loss at sample {index}")
        self.index = index


@dataclass
class FeatureExtractor:
    kind: str
    params: dict[str, np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.params["W" if self.kind == "linear" else "W1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["W" if self.kind == "linear" else "W2"].shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != extractor dim {self.in_dim}")
        if self.kind == "linear":
            return x @ self.params["W"], (x,)
        h = np.tanh(x @ self.params["W1"] + self.params["b1"])
        return h @ self.params["W2"] + self.params["b2"], (x, h)

    def backward(self, cache: tuple, dz: np.ndarray) -> dict[str, np.ndarray]:
        if self.kind == "linear":
            (x,) = cache
            return {"W": x.T @ dz}
        x, h = cache
        dh = (dz @ self.params["W2"].T) * (1.0 - h * h)
        return {
            "W1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "W2": h.T @ dz,
            "b2": dz.sum(axis=0),
        }

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(self.kind, {k: v.copy() for k, v in self.params.items()})


@dataclass
class ClusterHead:
    weight: np.ndarray  # (c, C)
    bias: np.ndarray  # (C,)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight + self.bias

    def copy(self) -> "ClusterHead":
        return ClusterHead(self.weight.copy(), self.bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])


@dataclass
class ClusterModel:
    phi: FeatureExtractor
    heads: list[ClusterHead]

    @property
    def num_clusters(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.heads[0].bias.shape[0]

    def copy(self) -> "ClusterModel":
        return ClusterModel(self.phi.copy(), [h.copy() for h in self.heads])

    def flat(self) -> np.ndarray:
        parts = [self.phi.params[k].ravel() for k in sorted(self.phi.params)]
        parts += [h.flat() for h in self.heads]
        return np.concatenate(parts)


@dataclass
class GradientBundle:
    phi: dict[str, np.ndarray]
    heads: list[tuple[np.ndarray, np.ndarray]]
    count: int = 0

    @classmethod
    def zeros_like(cls, model: ClusterModel) -> "GradientBundle":
        return cls(
            phi={k: np.zeros_like(v) for k, v in model.phi.params.items()},
            heads=[(np.zeros_like(h.weight), np.zeros_like(h.bias)) for h in model.heads],
        )

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            phi={k: self.phi[k] + other.phi[k] for k in self.phi},
            heads=[(a[0] + b[0], a[1] + b[1]) for a, b in zip(self.heads, other.heads)],
            count=self.count + other.count,
        )

    def flat(self) -> np.ndarray:
        parts = [self.phi[k].ravel() for k in sorted(self.phi)]
        parts += [np.concatenate([w.ravel(), b]) for w, b in self.heads]
        return np.concatenate(parts)


def _scaled(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def init_extractor(kind: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                   hidden: int = 32) -> FeatureExtractor:
    if kind not in EXTRACTOR_KINDS:
        raise ValueError(f"unknown extractor kind {kind!r}")
    if kind == "linear":
        return FeatureExtractor(kind, {"W": _scaled((in_dim, out_dim), in_dim, rng)})
    return FeatureExtractor(kind, {
        "W1": _scaled((in_dim, hidden), in_dim, rng),
        "b1": np.zeros(hidden),
        "W2": _scaled((hidden, out_dim), hidden, rng),
        "b2": np.zeros(out_dim),
    })


def init_head(feat_dim: int, num_classes: int, rng: np.random.Generator) -> ClusterHead:
    return ClusterHead(_scaled((feat_dim, num_classes), feat_dim, rng), np.zeros(num_classes))


def cluster_log_proba(phi: FeatureExtractor, heads: list[ClusterHead], x: np.ndarray) -> np.ndarray:
    """Log class probabilities under every head, shape (N, K, C)."""
    z, _ = phi.forward(x)
    return np.stack([_log_softmax(h.logits(z)) for h in heads], axis=1)


def predict_proba(phi: FeatureExtractor, head: ClusterHead, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities of one head; 1-D input gives a 1-D result."""
    single = np.ndim(x) == 1
    z, _ = phi.forward(x)
    if z.shape[1] != head.weight.shape[0]:
        raise ValueError(f"feature dim {z.shape[1]} != head dim {head.weight.shape[0]}")
    p = np.exp(_log_softmax(head.logits(z)))
    return p[0] if single else p


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def likelihood_and_grads(phi: FeatureExtractor, heads: list[ClusterHead], x: np.ndarray, y: np.ndarray,
                         coeffs: np.ndarray, formulation=None,
                         parts: tuple[str, ...] = ("phi", "heads")) -> tuple[np.ndarray, GradientBundle]:
    """Log-scores (N, K) and the gradient of ``-sum coeffs * log L``.

    ``coeffs`` are the per-sample, per-cluster prefactors (e.g. gamma / batch
    size). The label marginal of the correlation-ratio formulation is a
    constant here, so both formulations share the log-softmax gradient.
    Gradients for parts not listed in ``parts`` come back as zeros.
    """
    formulation = formulation or Conditional()
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=np.int64)
    coeffs = np.asarray(coeffs, dtype=float)
    n, K = len(y), len(heads)
    if coeffs.shape != (n, K):
        raise ValueError(f"coeffs shape {coeffs.shape} != {(n, K)}")
    if np.any(coeffs < 0) or not np.isfinite(coeffs).all():
        raise ValueError("coefficients must be finite and non-negative")

    z, cache = phi.forward(x)
    W = np.stack([h.weight for h in heads])  # (K, c, C)
    b = np.stack([h.bias for h in heads])  # (K, C)
    logits = np.einsum("nd,kdc->nkc", z, W) + b[None]
    if not np.isfinite(logits).all():
        bad = ~np.isfinite(logits).all(axis=(1, 2))
        raise NonFiniteLossError(int(np.flatnonzero(bad)[0]))
    log_p = _log_softmax(logits)
    scores = formulation.scores(log_p, y)
    if not np.isfinite(scores).all():
        bad = np.flatnonzero(~np.isfinite(scores).all(axis=1))
        raise NonFiniteLossError(int(bad[0]))

    # d(-log p_y)/dlogits = p - onehot(y), scaled per sample and cluster
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), :, y] -= 1.0
    dlogits *= coeffs[:, :, None]
    if "heads" in parts:
        gW = np.einsum("nd,nkc->kdc", z, dlogits)
        gb = dlogits.sum(axis=0)
        head_grads = [(gW[k], gb[k]) for k in range(K)]
    else:
        head_grads = [(np.zeros_like(h.weight), np.zeros_like(h.bias)) for h in heads]
    if "phi" in parts:
        phi_grads = phi.backward(cache, np.einsum("nkc,kdc->nd", dlogits, W))
    else:
        phi_grads = {k: np.zeros_like(v) for k, v in phi.params.items()}
    return scores, GradientBundle(phi=phi_grads, heads=head_grads, count=n)


def weighted_objective(phi: FeatureExtractor, heads: list[ClusterHead], x, y, coeffs, formulation=None) -> float:
    """The scalar ``J`` whose gradient ``likelihood_and_grads`` returns."""
    formulation = formulation or Conditional()
    log_p = cluster_log_proba(phi, heads, x)
    return float(-(np.asarray(coeffs) * formulation.scores(log_p, np.asarray(y))).sum())


def sgd_step(model: ClusterModel, grads: GradientBundle, lr: float,
             parts: tuple[str, ...] = ("phi", "heads")) -> ClusterModel:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    out = model.copy()
    if "phi" in parts:
        for k, g in grads.phi.items():
            out.phi.params[k] -= lr * g
    if "heads" in parts:
        for head, (gw, gb) in zip(out.heads, grads.heads):
            head.weight -= lr * gw
            head.bias -= lr * gb
    return out


def average_models(models: list[ClusterModel], weights) -> ClusterModel:
    """Weighted parameter average, summed in list order."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    out = models[0].copy()
    for key in out.phi.params:
        acc = np.zeros_like(out.phi.params[key])
        for wi, m in zip(w, models):
            acc += wi * m.phi.params[key]
        out.phi.params[key] = acc
    for k, head in enumerate(out.heads):
        head.weight = sum((wi * m.heads[k].weight for wi, m in zip(w, models)), np.zeros_like(head.weight))
        head.bias = sum((wi * m.heads[k].bias for wi, m in zip(w, models)), np.zeros_like(head.bias))
    return out


def average_heads(heads: list[ClusterHead], weights) -> ClusterHead:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    weight = np.zeros_like(heads[0].weight)
    bias = np.zeros_like(heads[0].bias)
    for wi, h in zip(w, heads):
        weight += wi * h.weight
        bias += wi * h.bias
    return ClusterHead(weight, bias)


# -- checkpoints -------------------------------------------------------------

def _tensors(model: ClusterModel):
    for key in sorted(model.phi.params):
        yield f"phi.{key}", model.phi.params[key]
    for k, h in enumerate(model.heads):
        yield f"head{k}.weight", h.weight
        yield f"head{k}.bias", h.bias


def checkpoint_dict(model: ClusterModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "extractor": model.phi.kind,
        "num_clusters": model.num_clusters,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "values": arr.ravel(order="C").tolist()}
            for name, arr in _tensors(model)
        ],
    }


def model_from_checkpoint(data: dict) -> ClusterModel:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {data.get('format')!r}")
    arrays = {
        t["name"]: np.asarray(t["values"], dtype=float).reshape(t["shape"]) for t in data["tensors"]
    }
    phi = FeatureExtractor(
        data["extractor"], {k[4:]: v for k, v in arrays.items() if k.startswith("phi.")}
    )
    heads = [
        ClusterHead(arrays[f"head{k}.weight"], arrays[f"head{k}.bias"])
        for k in range(int(data["num_clusters"]))
    ]
    return ClusterModel(phi, heads)


def save_checkpoint(model: ClusterModel, path) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(checkpoint_dict(model), fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> ClusterModel:
    with open(path) as fh:
        return model_from_checkpoint(json.load(fh))
