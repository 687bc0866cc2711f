"""Differentiable building blocks with explicit forward/backward passes.

Every layer works on node-major features of shape ``(7, N, C)`` where ``N``
is batch size times clip length; node-major keeps each per-node matmul on
contiguous memory. ``forward`` caches what
``backward`` needs; ``backward`` takes the upstream gradient, fills
``self.grads`` (same keys as ``self.params``) and returns the gradient with
respect to the layer input.
"""

from __future__ import annotations

import numpy as np

from .graph import SkeletalGraph, squeeze_table


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _fan_in_uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LocallyConnected(Layer):
    """Graph layer with one weight matrix per ordered neighbor pair.

    ``h_i = act(sum_{j in N(i)} a_ij * x_j @ W[i, j] + bias_i)``. Weights are
    keyed ``W.i.j`` with 1-based node ids; nothing is shared across target
    nodes.
    """

    def __init__(self, graph: SkeletalGraph, c_in, c_out, rng=None,
                 dtype=np.float64, name="lcn"):
        super().__init__()
        self.graph = graph
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.name = name
        self.pairs = [
            (i, j) for i in range(graph.node_count) for j in graph.neighbors(i)
        ]
        rng = np.random.default_rng(0) if rng is None else rng
        for i, j in self.pairs:
            fan_in = self.c_in * len(graph.neighbors(i))
            self.params[f"W.{i + 1}.{j + 1}"] = _fan_in_uniform(
                rng, fan_in, (self.c_in, self.c_out), dtype
            )
        self.params["bias"] = np.zeros((graph.node_count, self.c_out), dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        n_nodes = self.graph.node_count
        if x.ndim != 3 or x.shape[0] != n_nodes or x.shape[2] != self.c_in:
            raise ValueError(
                f"{self.name}: expected input ({n_nodes}, N, {self.c_in}), "
                f"got {x.shape}"
            )
        a = self.graph.adjacency.tolist()  # python floats keep float32 inputs float32
        out = np.empty((n_nodes, x.shape[1], self.c_out), dtype=x.dtype)
        out[:] = self.params["bias"][:, None, :]
        for i, j in self.pairs:
            out[i] += (x[j] * a[i][j]) @ self.params[f"W.{i + 1}.{j + 1}"]
        self._x = x
        return out

    def backward(self, grad):
        a = self.graph.adjacency.tolist()
        x = self._x
        dx = np.zeros_like(x)
        for i, j in self.pairs:
            key = f"W.{i + 1}.{j + 1}"
            g = grad[i] * a[i][j]
            self.grads[key] = x[j].T @ g
            dx[j] += g @ self.params[key].T
        self.grads["bias"] = grad.sum(axis=1)
        return dx


class BatchNorm(Layer):
    """Batch normalization over the frame axis, one statistic per (node, channel)."""

    def __init__(self, n_nodes, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones((n_nodes, channels), dtype=dtype)
        self.params["beta"] = np.zeros((n_nodes, channels), dtype=dtype)
        self.buffers["running_mean"] = np.zeros((n_nodes, channels), dtype=dtype)
        self.buffers["running_var"] = np.ones((n_nodes, channels), dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=1)
            var = x.var(axis=1)
            n = x.shape[1]
            m = self.momentum
            unbiased = var * n / max(n - 1, 1)
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps))[:, None, :]
        x_hat = (x - mean[:, None, :]) * inv_std
        self._cache = (x_hat, inv_std, train)
        return self.params["gamma"][:, None, :] * x_hat + self.params["beta"][:, None, :]

    def backward(self, grad):
        x_hat, inv_std, train = self._cache
        gamma = self.params["gamma"][:, None, :]
        self.grads["gamma"] = (grad * x_hat).sum(axis=1)
        self.grads["beta"] = grad.sum(axis=1)
        g_hat = grad * gamma
        if not train:
            return g_hat * inv_std
        return inv_std * (
            g_hat
            - g_hat.mean(axis=1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=1, keepdims=True)
        )


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        if not 0.0 <= self.slope <= 1.0:
            raise ValueError(f"slope must be in [0, 1], got {self.slope}")
        # elementwise derivative, kept for backward; cheaper than np.where on large arrays
        scale = (x > 0).astype(x.dtype)
        scale *= x.dtype.type(1.0 - self.slope)
        scale += x.dtype.type(self.slope)
        self._scale = scale
        return np.maximum(x, x * x.dtype.type(self.slope))

    def backward(self, grad):
        return grad * self._scale


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate=0.2):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an explicit rng")
        keep = 1.0 - self.rate
        draw = rng.random(x.shape, dtype=np.float32)
        self._mask = (draw < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def pool_matrix(c_in: int, c_out: int, dtype=np.float64) -> np.ndarray:
    """``(c_in, c_out)`` matrix averaging contiguous channel groups.

    Group ``g`` covers channels ``floor(g*c_in/c_out)`` up to but excluding
    ``floor((g+1)*c_in/c_out)``.
    """
    if not 1 <= c_out <= c_in:
        raise ValueError(f"cannot squeeze {c_in} channels to {c_out}")
    p = np.zeros((c_in, c_out), dtype=dtype)
    for g in range(c_out):
        lo, hi = (g * c_in) // c_out, ((g + 1) * c_in) // c_out
        p[lo:hi, g] = 1.0 / (hi - lo)
    return p


def channel_squeeze(h, c_out: int) -> np.ndarray:
    """Parameter-free group mean-pooling of the last axis down to ``c_out``."""
    h = np.asarray(h)
    return h @ pool_matrix(h.shape[-1], c_out, dtype=np.result_type(h, np.float32))


class PCSF(Layer):
    """Pyramidal channel squeezing followed by two-stage concatenation fusion.

    For target node ``m`` every node is squeezed to its scheduled width, the
    long-range pieces are concatenated (first fusion), then self, short-range
    and the long-range block are concatenated (second fusion) and projected
    by the per-node matrix ``Wm.m``. Squeezing and fusion carry no weights.
    """

    def __init__(self, graph: SkeletalGraph, c_in, c_out, b=0.9, d=0.125,
                 rng=None, dtype=np.float64):
        super().__init__()
        self.graph = graph
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.schedule = squeeze_table(graph, self.c_in, b, d)
        n = graph.node_count
        self.order = []
        for m in range(n):
            dist = graph.dist[m]
            short = [k for k in range(n) if 1 <= dist[k] <= 2]
            long_ = [k for k in range(n) if dist[k] > 2]
            self.order.append([m] + short + long_)
        self.widths = sorted({int(w) for w in self.schedule.ravel()})
        self.pools = {w: pool_matrix(self.c_in, w, dtype) for w in self.widths}
        rng = np.random.default_rng(0) if rng is None else rng
        for m in range(n):
            fused = self.fused_length(m + 1)
            self.params[f"Wm.{m + 1}"] = _fan_in_uniform(
                rng, fused, (fused, self.c_out), dtype
            )
        self.zero_grad()

    def fused_length(self, m: int) -> int:
        """Length of the fused vector for 1-based target ``m``."""
        return int(self.schedule[m - 1].sum())

    def _squeezed(self, h):
        # one pooled copy per distinct width, shared across targets
        return {
            w: (h if w == self.c_in else h @ self.pools[w]) for w in self.widths
        }

    def fuse(self, h, m: int):
        """Fused vectors ``(N, S_m)`` for 1-based target ``m`` from ``(7, N, C)`` features."""
        sq = self._squeezed(h)
        return self._fuse(sq, m - 1)

    def _fuse(self, sq, m):
        widths = self.schedule[m]
        return np.concatenate([sq[int(widths[k])][k] for k in self.order[m]], axis=1)

    def forward(self, h, train=False):
        n = self.graph.node_count
        if h.ndim != 3 or h.shape[0] != n or h.shape[2] != self.c_in:
            raise ValueError(f"pcsf: expected input ({n}, N, {self.c_in}), got {h.shape}")
        sq = self._squeezed(h)
        out = np.empty((n, h.shape[1], self.c_out), dtype=h.dtype)
        fused_all = []
        for m in range(n):
            fused = self._fuse(sq, m)
            w = self.params[f"Wm.{m + 1}"]
            if fused.shape[1] != w.shape[0]:
                raise ValueError(
                    f"pcsf: fused length {fused.shape[1]} for node {m + 1} "
                    f"does not match projection input {w.shape[0]}"
                )
            out[m] = fused @ w
            fused_all.append(fused)
        self._fused = fused_all
        self._shape = h.shape
        return out

    def backward(self, grad):
        n = self.graph.node_count
        dsq = {w: np.zeros((n, self._shape[1], w), dtype=grad.dtype) for w in self.widths}
        for m in range(n):
            key = f"Wm.{m + 1}"
            g = grad[m]
            self.grads[key] = self._fused[m].T @ g
            dfused = g @ self.params[key].T
            widths = self.schedule[m]
            pos = 0
            for k in self.order[m]:
                w = int(widths[k])
                dsq[w][k] += dfused[:, pos:pos + w]
                pos += w
        dh = dsq[self.c_in] if self.c_in in dsq else np.zeros(self._shape, grad.dtype)
        for w in self.widths:
            if w != self.c_in:
                dh = dh + dsq[w] @ self.pools[w].T
        return dh
