"""The SPAPNet network: two locally connected GNN blocks, PCSF, pooling, head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import SkeletalGraph, build_graph
from .layers import PCSF, BatchNorm, Dropout, LeakyReLU, LocallyConnected

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_channels: int = 3
    block_channels: list = field(default_factory=lambda: [64, 128])
    leaky_slope: float = 0.2
    dropout_rate: float = 0.2
    pcsf_out_channels: int = 128
    num_classes: int = 2
    b: float = 0.9
    d: float = 0.125
    clip_len: int = 100
    dtype: str = "float64"

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        for name in ("leaky_slope", "dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        counts = [self.input_channels, self.pcsf_out_channels, self.num_classes,
                  self.clip_len, *self.block_channels]
        if min(counts) < 1:
            raise ValueError("channel counts, class count and clip_len must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")


class GNNBlock:
    """Locally connected layer -> batch norm -> LeakyReLU -> dropout."""

    def __init__(self, graph, c_in, c_out, config: ModelConfig, rng, name):
        dtype = np.dtype(config.dtype)
        self.name = name
        self.lcn = LocallyConnected(graph, c_in, c_out, rng=rng, dtype=dtype,
                                    name=f"{name}.lcn")
        self.bn = BatchNorm(graph.node_count, c_out, dtype=dtype)
        self.act = LeakyReLU(config.leaky_slope)
        self.drop = Dropout(config.dropout_rate)

    def layers(self):
        return {"lcn": self.lcn, "bn": self.bn}

    def forward(self, x, train=False, rng=None):
        h = self.lcn.forward(x, train)
        h = self.bn.forward(h, train)
        h = self.act.forward(h, train)
        return self.drop.forward(h, train, rng)

    def backward(self, grad):
        grad = self.drop.backward(grad)
        grad = self.act.backward(grad)
        grad = self.bn.backward(grad)
        return self.lcn.backward(grad)


class SPAPNet:
    """Network with exact backward pass.

    ``forward`` maps clips ``(B, L, 7, C_in)`` to logits ``(B, K)`` and keeps
    the per-frame L2 norms of the post-PCSF node features, shape
    ``(B, L, 7)``, as ``self.activations``.
    """

    def __init__(self, config: ModelConfig | None = None, graph: SkeletalGraph | None = None,
                 rng=None):
        self.config = config = config or ModelConfig()
        self.graph = graph = graph or build_graph()
        rng = np.random.default_rng(0) if rng is None else rng
        dtype = np.dtype(config.dtype)
        chans = [config.input_channels, *config.block_channels]
        self.blocks = [
            GNNBlock(graph, chans[i], chans[i + 1], config, rng, f"block{i + 1}")
            for i in range(len(config.block_channels))
        ]
        self.pcsf = PCSF(graph, chans[-1], config.pcsf_out_channels, config.b,
                         config.d, rng=rng, dtype=dtype)
        bound = 1.0 / np.sqrt(config.pcsf_out_channels)
        self.head = {
            "W": rng.uniform(-bound, bound, (config.pcsf_out_channels,
                                             config.num_classes)).astype(dtype),
            "b": np.zeros(config.num_classes, dtype=dtype),
        }
        self.head_grads = {k: np.zeros_like(v) for k, v in self.head.items()}

    # -- parameter bookkeeping -------------------------------------------

    def _named_layers(self):
        for block in self.blocks:
            for lname, layer in block.layers().items():
                yield f"{block.name}.{lname}", layer
        yield "pcsf", self.pcsf

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors by canonical name (views, not copies)."""
        out = {}
        for prefix, layer in self._named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        for k, v in self.head.items():
            out[f"head.{k}"] = v
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._named_layers():
            for k, v in layer.grads.items():
                out[f"{prefix}.{k}"] = v
        for k, v in self.head_grads.items():
            out[f"head.{k}"] = v
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._named_layers():
            for k, v in layer.buffers.items():
                out[f"{prefix}.{k}"] = v
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name.startswith("head."):
            target = self.head
            key = name[len("head."):]
        else:
            # W.i.j keys contain dots of their own, so match on the layer prefix
            for lp, layer in self._named_layers():
                if name.startswith(lp + "."):
                    key = name[len(lp) + 1:]
                    target = layer.buffers if key in layer.buffers else layer.params
                    break
            else:
                raise KeyError(name)
        if key not in target:
            raise KeyError(name)
        if target[key].shape != value.shape:
            raise ValueError(f"{name}: shape {value.shape} != {target[key].shape}")
        target[key] = np.asarray(value, dtype=target[key].dtype).copy()

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    # -- forward / backward ----------------------------------------------

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=self.config.dtype)
        n_nodes = self.graph.node_count
        expected = (self.config.clip_len, n_nodes, self.config.input_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"model: expected clips (B, {', '.join(map(str, expected))}), "
                             f"got {x.shape}")
        if train and rng is None:
            raise ValueError("training-mode forward needs an explicit rng")
        bsz, length = x.shape[:2]
        h = np.ascontiguousarray(x.reshape(bsz * length, n_nodes, -1).transpose(1, 0, 2))
        for block in self.blocks:
            h = block.forward(h, train, rng)
        h = self.pcsf.forward(h, train)
        h = h.reshape(n_nodes, bsz, length, -1)
        self.activations = np.sqrt((h * h).sum(axis=-1)).transpose(1, 2, 0)
        pooled = h.mean(axis=(0, 2))
        self._pool_cache = (bsz, length, h.shape[-1], pooled)
        return pooled @ self.head["W"] + self.head["b"]

    def backward(self, dlogits):
        """Gradients for every trainable tensor given ``dL/dlogits``."""
        bsz, length, chans, pooled = self._pool_cache
        dlogits = np.array(dlogits, dtype=self.config.dtype)
        # flush gradients whose square underflows; subnormal operands slow every
        # matmul below by an order of magnitude once the classifier saturates
        dlogits[np.abs(dlogits) < np.sqrt(np.finfo(dlogits.dtype).tiny)] = 0.0
        self.head_grads["W"] = pooled.T @ dlogits
        self.head_grads["b"] = dlogits.sum(axis=0)
        dpool = dlogits @ self.head["W"].T
        n_nodes = self.graph.node_count
        dh = np.broadcast_to(
            (dpool / (length * n_nodes))[None, :, None, :],
            (n_nodes, bsz, length, chans),
        ).reshape(n_nodes, bsz * length, chans)
        dh = self.pcsf.backward(np.ascontiguousarray(dh))
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        return self.gradients()

    def recalibrate_batchnorm(self, x, chunk=32) -> None:
        """Replace running batch-norm statistics with exact population values.

        Blocks are visited in order so each layer's statistics are computed
        on inputs normalized with the already-updated earlier layers.
        """
        x = np.asarray(x, dtype=self.config.dtype)
        n_nodes = self.graph.node_count
        for depth, block in enumerate(self.blocks):
            total = sq_total = None
            count = 0
            for s in range(0, len(x), chunk):
                xb = x[s:s + chunk]
                h = np.ascontiguousarray(
                    xb.reshape(-1, n_nodes, xb.shape[-1]).transpose(1, 0, 2))
                for prev in self.blocks[:depth]:
                    h = prev.forward(h, train=False)
                z = block.lcn.forward(h).astype(np.float64)
                part, part_sq = z.sum(axis=1), (z * z).sum(axis=1)
                total = part if total is None else total + part
                sq_total = part_sq if sq_total is None else sq_total + part_sq
                count += z.shape[1]
            mean = total / count
            var = np.maximum(sq_total / count - mean * mean, 0.0)
            dtype = block.bn.buffers["running_mean"].dtype
            block.bn.buffers["running_mean"] = mean.astype(dtype)
            block.bn.buffers["running_var"] = (var * count / max(count - 1, 1)).astype(dtype)

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.parameters()) | set(self.buffers())
        missing = expected - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name in expected:
            self.set_tensor(name, np.asarray(state[name]))


def expected_parameter_count(config: ModelConfig, graph: SkeletalGraph | None = None) -> int:
    """Closed-form trainable parameter count, independent of the layer code."""
    graph = graph or build_graph()
    n = graph.node_count
    pair_count = int((graph.dist <= 1).sum())
    chans = [config.input_channels, *config.block_channels]
    total = 0
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        total += pair_count * c_in * c_out + n * c_out  # weights + per-node bias
        total += 2 * n * c_out  # batch-norm affine
    from .graph import squeeze_table

    fused = int(squeeze_table(graph, chans[-1], config.b, config.d).sum())
    total += fused * config.pcsf_out_channels
    total += config.pcsf_out_channels * config.num_classes + config.num_classes
    return total


def attention_weights(activations):
    """Per-frame and clip-level joint weights from ``(L, 7)`` activation norms.

    Each frame is normalized to sum to one (a frame of zeros becomes uniform);
    the clip vector is the frame mean, renormalized.
    """
    act = np.asarray(activations, dtype=np.float64)
    if np.any(act < 0):
        raise ValueError("activation norms must be non-negative")
    totals = act.sum(axis=-1, keepdims=True)
    n = act.shape[-1]
    frame = np.where(totals > 0, act / np.where(totals > 0, totals, 1.0), 1.0 / n)
    clip = frame.mean(axis=-2)
    clip = clip / clip.sum(axis=-1, keepdims=True)
    return frame, clip


def save_checkpoint(path, model: SPAPNet, seed=None, extra: dict | None = None) -> None:
    """Write config, tensors and seed to one ``.npz`` archive."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": seed,
        "extra": extra or {},
    }
    arrays = {f"tensor/{k}": v for k, v in model.state_dict().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[SPAPNet, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k[len("tensor/"):]: archive[k] for k in archive.files if k.startswith("tensor/")}
    model = SPAPNet(ModelConfig(**meta["config"]))
    model.load_state_dict(state)
    return model, meta
