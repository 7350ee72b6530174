"""Plain FedAvg for a linear embedding followed by a softmax layer.

Written against raw arrays only, as an independent check of the
single-cluster path of the simulator.
"""
import numpy as np


def softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def local_sgd(W, V, b, x, y, lr, epochs, sequential=True):
    """Full-batch steps. ``sequential`` moves the softmax layer first and
    takes the embedding gradient at the moved layer; otherwise one joint step."""
    n = len(y)
    onehot = np.eye(V.shape[1])[y]
    for _ in range(epochs):
        z = x @ W
        d = (softmax(z @ V + b) - onehot) / n
        V_new, b_new = V - lr * (z.T @ d), b - lr * d.sum(axis=0)
        if sequential:
            d = (softmax(z @ V_new + b_new) - onehot) / n
            W = W - lr * (x.T @ (d @ V_new.T))
        else:
            W = W - lr * (x.T @ (d @ V.T))
        V, b = V_new, b_new
    return W, V, b


def fedavg(clients, W, V, b, rounds, lr, epochs, sequential=True):
    sizes = np.array([len(c.y_train) for c in clients], dtype=float)
    frac = sizes / sizes.sum()
    for _ in range(rounds):
        updates = [local_sgd(W, V, b, c.x_train, c.y_train, lr, epochs, sequential) for c in clients]
        W = sum(f * u[0] for f, u in zip(frac, updates))
        V = sum(f * u[1] for f, u in zip(frac, updates))
        b = sum(f * u[2] for f, u in zip(frac, updates))
    return W, V, b


def mean_val_accuracy(clients, W, V, b):
    accs = [np.mean(np.argmax(c.x_val @ W @ V + b, axis=1) == c.y_val) for c in clients]
    return float(np.mean(accs))
