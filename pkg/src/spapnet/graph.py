"""Upper-body skeletal graph and the per-node channel-squeezing schedule."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

NODE_COUNT = 7
NODE_NAMES = (
    "RWrist",
    "RElbow",
    "RShoulder",
    "Neck",
    "LShoulder",
    "LElbow",
    "LWrist",
)
# 1-based node ids, chained through the neck
EDGES = ((1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7))
# left-right relabeling as a 0-based permutation
MIRROR = np.array([6, 5, 4, 3, 2, 1, 0])
# absorbs round-off such as 0.29 * 100 = 28.999999999999996
_EPS = 1e-9


@dataclass(frozen=True)
class SkeletalGraph:
    """Fixed 7-node chain RWrist ... Neck ... LWrist.

    ``adjacency`` is the normalized matrix used by the locally connected
    layers, ``dist`` the all-pairs hop count. Nodes are 0-based in arrays and
    1-based in ``edges``. ``inter_frame_edges`` is carried for completeness;
    the network is spatial-only and never reads it.
    """

    edges: tuple
    adjacency: np.ndarray
    dist: np.ndarray
    inter_frame_edges: bool = True
    node_names: tuple = field(default=NODE_NAMES)

    @property
    def node_count(self) -> int:
        return len(self.node_names)

    def neighbors(self, i: int) -> list[int]:
        """0-based neighborhood of node ``i`` (self plus one-hop), ascending."""
        return [j for j in range(self.node_count) if self.dist[i, j] <= 1]


def _bfs_distances(n: int, edges) -> np.ndarray:
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a - 1].append(b - 1)
        adj[b - 1].append(a - 1)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


def normalized_adjacency(n: int, edges) -> np.ndarray:
    a = np.eye(n)
    for i, j in edges:
        a[i - 1, j - 1] = a[j - 1, i - 1] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    a_hat = d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]
    return a_hat / a_hat.sum(axis=1, keepdims=True)


def build_graph() -> SkeletalGraph:
    adjacency = normalized_adjacency(NODE_COUNT, EDGES)
    dist = _bfs_distances(NODE_COUNT, EDGES)
    adjacency.setflags(write=False)
    dist.setflags(write=False)
    return SkeletalGraph(edges=EDGES, adjacency=adjacency, dist=dist)


def _check_ratio(name: str, value: float) -> None:
    if not (0.0 < value <= 1.0):
        raise ValueError(f"squeeze ratio {name}={value!r} must lie in (0, 1]")


def squeeze_schedule(
    g: SkeletalGraph, m: int, c_in: int, b: float = 0.9, d: float = 0.125
) -> np.ndarray:
    """Output channel count of every node ``k`` when fused into target ``m``.

    ``m`` is 1-based. The target keeps all ``c_in`` channels, nodes one or two
    hops away keep ``floor(b * c_in)`` and farther nodes keep
    ``floor(d ** dist * c_in)``; every count is clamped to at least one
    channel so no node drops out of the fusion.
    """
    _check_ratio("b", b)
    _check_ratio("d", d)
    if int(c_in) != c_in or c_in < 1:
        raise ValueError(f"c_in must be a positive integer, got {c_in!r}")
    if not 1 <= m <= g.node_count:
        raise ValueError(f"target node {m} outside 1..{g.node_count}")
    c_in = int(c_in)
    out = np.empty(g.node_count, dtype=np.int64)
    for k in range(g.node_count):
        dist = int(g.dist[m - 1, k])
        if dist == 0:
            out[k] = c_in
        elif dist <= 2:
            out[k] = max(1, int(np.floor(b * c_in + _EPS)))
        else:
            out[k] = max(1, int(np.floor(d**dist * c_in + _EPS)))
    return out


def squeeze_table(
    g: SkeletalGraph, c_in: int, b: float = 0.9, d: float = 0.125
) -> np.ndarray:
    """Full schedule, row ``m-1`` holding :func:`squeeze_schedule` for ``m``."""
    return np.stack(
        [squeeze_schedule(g, m, c_in, b, d) for m in range(1, g.node_count + 1)]
    )
