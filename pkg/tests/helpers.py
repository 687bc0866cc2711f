"""Shared oracles for the unit and acceptance tests."""

import itertools
from collections import deque

import numpy as np

from spapnet.graph import build_graph
from spapnet.layers import PCSF, LocallyConnected, channel_squeeze, pool_matrix
from spapnet.model import ModelConfig, SPAPNet
from spapnet.train import focal_loss

EPS = 1e-5


def rel_error(a, b, floor=1e-6):
    """Elementwise relative error with an absolute floor for near-zero gradients."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    for idx in itertools.product(*map(range, x.shape)):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


# -- gradient suite (micro clips: 2 frames, 7 nodes, C <= 8, float64) ---------


def check_lcn(seed=0):
    rng = np.random.default_rng(seed)
    g = build_graph()
    layer = LocallyConnected(g, 5, 8, rng=rng)
    layer.params["bias"][:] = rng.normal(size=layer.params["bias"].shape)
    x = rng.normal(size=(7, 4, 5))
    r = rng.normal(size=(7, 4, 8))

    def f():
        return float((layer.forward(x) * r).sum())

    f()
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    worst = rel_error(numeric_grad(f, x), dx).max()
    for k, p in layer.params.items():
        worst = max(worst, rel_error(numeric_grad(f, p), grads[k]).max())
    return worst


def check_squeeze(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c_in, c_out in [(8, 3), (8, 7), (7, 2), (8, 8), (5, 1)]:
        x = rng.normal(size=(2, 7, c_in))
        r = rng.normal(size=(2, 7, c_out))

        def f():
            return float((channel_squeeze(x, c_out) * r).sum())

        analytic = r @ pool_matrix(c_in, c_out).T
        worst = max(worst, rel_error(numeric_grad(f, x), analytic).max())
    return worst


def check_pcsf(seed=0):
    rng = np.random.default_rng(seed)
    layer = PCSF(build_graph(), 8, 6, b=0.75, d=0.5, rng=rng)
    h = rng.normal(size=(7, 4, 8))
    r = rng.normal(size=(7, 4, 6))

    def f():
        return float((layer.forward(h) * r).sum())

    f()
    dh = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    worst = rel_error(numeric_grad(f, h), dh).max()
    for k, p in layer.params.items():
        worst = max(worst, rel_error(numeric_grad(f, p), grads[k]).max())
    return worst


def check_focal(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, gamma in [(2, 2.0), (5, 2.0), (3, 0.0), (3, 0.5)]:
        z = rng.normal(scale=2.0, size=(6, k))
        y = rng.integers(0, k, size=6)
        alpha = rng.uniform(0.2, 2.0, size=k)
        _, grad = focal_loss(z, y, gamma, alpha, return_grad=True)

        def f():
            return focal_loss(z, y, gamma, alpha)

        worst = max(worst, rel_error(numeric_grad(f, z), grad).max())
    return worst


def check_model(seed=0):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(block_channels=[4, 8], pcsf_out_channels=5, clip_len=2,
                      num_classes=3, b=0.9, d=0.5)
    net = SPAPNet(cfg, rng=rng)
    for p in net.parameters().values():
        p += rng.normal(scale=0.05, size=p.shape)
    x = rng.normal(size=(2, 2, 7, 3))
    r = rng.normal(size=(2, 3))

    def f():
        # same dropout mask on every call
        return float((net.forward(x, train=True, rng=np.random.default_rng(9)) * r).sum())

    f()
    grads = {k: v.copy() for k, v in net.backward(r).items()}
    worst = 0.0
    for k, p in net.parameters().items():
        worst = max(worst, rel_error(numeric_grad(f, p), grads[k]).max())
    return worst


GRADIENT_CHECKS = {
    "lcn": check_lcn,
    "channel_squeeze": check_squeeze,
    "pcsf": check_pcsf,
    "focal_loss": check_focal,
    "model": check_model,
}


# -- schedule oracle -----------------------------------------------------------


def bfs_schedule_oracle(c_in=128, b=0.9, d=0.125):
    """Squeeze table from scratch: BFS on the arm chain, then the distance rule."""
    adj = {i: set() for i in range(7)}
    for i in range(6):
        adj[i].add(i + 1)
        adj[i + 1].add(i)
    table = np.zeros((7, 7), dtype=int)
    raw = np.zeros((7, 7))
    for m in range(7):
        dist = {m: 0}
        q = deque([m])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        for k in range(7):
            if dist[k] == 0:
                val = float(c_in)
            elif dist[k] <= 2:
                val = b * c_in
            else:
                val = d ** dist[k] * c_in
            raw[m, k] = val
            table[m, k] = max(1, int(np.floor(val + 1e-9)))
    return table, raw


# -- metrics oracle ------------------------------------------------------------


def brute_force_binary(pred, truth):
    tp = fn = tn = fp = 0
    for p, t in zip(pred, truth):
        if t == 1 and p == 1:
            tp += 1
        elif t == 1:
            fn += 1
        elif p == 1:
            fp += 1
        else:
            tn += 1
    se = tp / (tp + fn) if tp + fn else float("nan")
    sp = tn / (tn + fp) if tn + fp else float("nan")
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else float("nan")
    return se, sp, (se + sp) / 2, f1


# -- voting oracle -------------------------------------------------------------


def vote_oracle(labels, probs):
    """Majority; ties to the highest mean probability, then the lowest class index."""
    counts = {c: labels.count(c) for c in set(labels)}
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    mean = np.mean(probs, axis=0)
    best = max(mean[c] for c in tied)
    return min(c for c in tied if mean[c] == best)


def voting_cases(max_size=5, n_classes=2, seed=0):
    """Every clip-label multiset up to ``max_size`` with three probability regimes each.

    The regimes are random confident probabilities, probabilities that make
    the mean favour the minority class, and exactly symmetric probabilities
    that force the final lowest-index rule.
    """
    rng = np.random.default_rng(seed)
    for size in range(1, max_size + 1):
        for multiset in itertools.combinations_with_replacement(range(n_classes), size):
            labels = list(multiset)
            for regime in ("random", "skewed", "symmetric"):
                probs = []
                for c in labels:
                    if regime == "symmetric":
                        top = 0.75
                    elif regime == "skewed":
                        top = 0.95 if c == labels[-1] else 0.51
                    else:
                        top = rng.uniform(0.5 + 1e-3, 1.0)
                    p = np.full(n_classes, (1 - top) / (n_classes - 1))
                    p[c] = top
                    probs.append(p)
                yield labels, np.array(probs)
