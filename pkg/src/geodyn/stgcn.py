"""Spatio-temporal graph convolution over landmark sequences.

Each unit applies the masked, degree-normalized face adjacency and a channel
projection per time step, then a 1-D convolution along time, followed by
optional batch normalization, residual addition and rectification. Global
pooling over nodes and time gives the geometric feature; a linear head scores
normal vs. abnormal movement.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import Parameter, Tensor, as_tensor, bce_with_logits, sgd_step, sigmoid, temporal_conv1d
from .graph import FaceGraph, normalized_adjacency
from .landmarks import (AugmentConfig, LandmarkSequence, MovementClassMap, augment,
                        movement_label, normalize_frames, select_inference_window,
                        subsample_random)
from .metrics import binary_auc

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class StgcnConfig:
    channels: list = field(default_factory=lambda: [64, 64, 128, 128, 256, 256])
    strides: list = field(default_factory=lambda: [1, 1, 2, 1, 2, 1])
    kernel_size: int = 9
    in_channels: int = 2
    seq_len: int = 64
    batch_norm: bool = True
    residual: bool = True
    activation: bool = True
    pooling: str = "mean"
    degree_grad: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.strides = [int(s) for s in self.strides]
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        if self.kernel_size % 2 == 0:
            raise ValueError("temporal kernel size must be odd")
        if self.pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "StgcnConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def output_length(self, seq_len: int | None = None) -> int:
        s = self.seq_len if seq_len is None else seq_len
        for stride in self.strides:
            s = -(-s // stride)
        return s


class StgcnUnit:
    def __init__(self, prefix: str, num_nodes: int, c_in: int, c_out: int, stride: int,
                 config: StgcnConfig, rng: np.random.Generator):
        dt = np.dtype(config.dtype)
        k = config.kernel_size
        self.stride = stride
        self.config = config
        self.mask = Parameter(np.ones((num_nodes, num_nodes)), f"{prefix}.mask", dt)
        self.weight = Parameter(rng.normal(0, math.sqrt(2.0 / c_in), (c_in, c_out)),
                                f"{prefix}.weight", dt)
        self.tkernel = Parameter(rng.normal(0, math.sqrt(2.0 / (k * c_out)), (k, c_out, c_out)),
                                 f"{prefix}.tkernel", dt)
        self.tbias = Parameter(np.zeros(c_out), f"{prefix}.tbias", dt)
        self.params = [self.mask, self.weight, self.tkernel, self.tbias]
        self.bn_gamma = self.bn_beta = None
        if config.batch_norm:
            self.bn_gamma = Parameter(np.ones(c_out), f"{prefix}.bn_gamma", dt)
            self.bn_beta = Parameter(np.zeros(c_out), f"{prefix}.bn_beta", dt)
            self.params += [self.bn_gamma, self.bn_beta]
        self.running_mean = np.zeros(c_out, dtype=dt)
        self.running_var = np.ones(c_out, dtype=dt)
        self.res_kernel = self.res_bias = None
        self.identity_residual = c_in == c_out and stride == 1
        if config.residual and not self.identity_residual:
            self.res_kernel = Parameter(rng.normal(0, math.sqrt(2.0 / c_in), (1, c_in, c_out)),
                                        f"{prefix}.res_kernel", dt)
            self.res_bias = Parameter(np.zeros(c_out), f"{prefix}.res_bias", dt)
            self.params += [self.res_kernel, self.res_bias]
        self.prefix = prefix

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.config.batch_norm:
            return {}
        return {f"{self.prefix}.running_mean": self.running_mean,
                f"{self.prefix}.running_var": self.running_var}

    def _batch_norm(self, h: Tensor, training: bool) -> Tensor:
        axes = tuple(range(h.ndim - 1))
        if training:
            mean = h.mean(axis=axes, keepdims=True)
            centred = h - mean
            var = (centred * centred).mean(axis=axes, keepdims=True)
            xhat = centred * (var + BN_EPS) ** -0.5
            n = h.data.size // h.shape[-1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            m = BN_MOMENTUM
            self.running_mean = ((1 - m) * self.running_mean + m * mean.data.reshape(-1)).astype(h.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(h.dtype)
        else:
            scale = (1.0 / np.sqrt(self.running_var + BN_EPS)).astype(h.dtype)
            xhat = (h - self.running_mean) * scale
        return xhat * self.bn_gamma + self.bn_beta

    def forward(self, x: Tensor, adjacency: np.ndarray, training: bool = False) -> Tensor:
        """x: (B, N, S, C_in) -> (B, N, ceil(S/stride), C_out)."""
        b, n, s, c_in = x.shape
        if c_in != self.weight.shape[0] or n != self.mask.shape[0]:
            raise ValueError(f"unit {self.prefix} expects (B, {self.mask.shape[0]}, S, "
                             f"{self.weight.shape[0]}), got {x.shape}")
        a = normalized_adjacency(adjacency, self.mask, degree_grad=self.config.degree_grad)
        xw = x @ self.weight
        c = xw.shape[-1]
        g = (a @ xw.reshape(b, n, s * c)).reshape(b, n, s, c)
        h = temporal_conv1d(g, self.tkernel, self.tbias, self.stride)
        if self.config.batch_norm:
            h = self._batch_norm(h, training)
        if self.config.residual:
            if self.identity_residual:
                h = h + x
            else:
                h = h + temporal_conv1d(x, self.res_kernel, self.res_bias, self.stride)
        if self.config.activation:
            h = h.relu()
        return h


class StgcnModel:
    def __init__(self, graph: FaceGraph, config: StgcnConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or StgcnConfig()
        self.graph = graph
        self.adjacency = graph.adjacency()
        self.best_epoch = 0
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(self.config.dtype)
        self.units = []
        c_in = self.config.in_channels
        for i, (c_out, stride) in enumerate(zip(self.config.channels, self.config.strides)):
            self.units.append(StgcnUnit(f"units.{i}", graph.num_nodes, c_in, c_out, stride,
                                        self.config, rng))
            c_in = c_out
        self.head_weight = Parameter(rng.normal(0, math.sqrt(1.0 / c_in), (c_in, 1)),
                                     "head.weight", dt)
        self.head_bias = Parameter(np.zeros(1), "head.bias", dt)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[Parameter]:
        out = []
        for unit in self.units:
            out.extend(unit.params)
        return out + [self.head_weight, self.head_bias]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for unit in self.units:
            out.update(unit.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}: {state[p.name].shape} vs {p.shape}")
            p.data = np.ascontiguousarray(state[p.name], dtype=self.dtype)
            p.grad = np.zeros_like(p.data)
            p.momentum_buffer = np.zeros_like(p.data)
        for unit in self.units:
            if self.config.batch_norm:
                unit.running_mean = np.asarray(state[f"{unit.prefix}.running_mean"], dtype=self.dtype)
                unit.running_var = np.asarray(state[f"{unit.prefix}.running_var"], dtype=self.dtype)

    def feature_map(self, x, training: bool = False) -> Tensor:
        """Final unit output for a (B, N, S, C_in) batch."""
        x = as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype))
        if x.ndim != 4:
            raise ValueError(f"expected a (B, N, S, C) batch, got shape {x.shape}")
        if x.shape[1] != self.graph.num_nodes:
            raise ValueError(f"expected {self.graph.num_nodes} nodes, got {x.shape[1]}")
        if x.shape[3] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[3]}")
        h = x
        for unit in self.units:
            h = unit.forward(h, self.adjacency, training)
        return h

    def pool(self, fmap: Tensor) -> Tensor:
        if self.config.pooling == "max":
            return fmap.max(axis=(1, 2))
        return fmap.mean(axis=(1, 2))

    def head(self, f_g: Tensor) -> Tensor:
        return (f_g @ self.head_weight + self.head_bias).reshape(f_g.shape[0])

    def forward(self, x, training: bool = False, check_length: bool = True) -> tuple[Tensor, Tensor]:
        """(B, N, S, 2) normalized landmarks -> (f_g (B, d_g), logit (B,))."""
        shape = np.shape(x.data if isinstance(x, Tensor) else x)
        if check_length and len(shape) == 4 and shape[2] != self.config.seq_len:
            raise ValueError(f"expected sequence length {self.config.seq_len}, got {shape[2]}")
        f_g = self.pool(self.feature_map(x, training))
        return f_g, self.head(f_g)

    __call__ = forward

    # -- persistence ---------------------------------------------------------
    def metadata(self, **extra) -> dict:
        meta = {"kind": "stgcn", "config": asdict(self.config), "graph": self.graph.to_dict(),
                "graph_hash": self.graph.digest(),
                "config_hash": checkpoint.config_digest(asdict(self.config))}
        meta.update(extra)
        return meta

    def save(self, path, **extra) -> Path:
        return checkpoint.save(path, self.state_dict(), self.metadata(**extra))


def load_model(path, graph: FaceGraph | None = None) -> tuple[StgcnModel, dict]:
    """Load a geometric checkpoint; ``graph`` (if given) must match the stored hash."""
    from .graph import graph_from_dict

    state, meta = checkpoint.load(path)
    if meta.get("kind") != "stgcn":
        raise ValueError(f"{path} is not a geometric-branch checkpoint")
    stored = graph_from_dict(meta["graph"])
    if graph is not None and graph.digest() != meta["graph_hash"]:
        raise ValueError("graph does not match the checkpoint's graph hash")
    model = StgcnModel(graph or stored, StgcnConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta


def stgcn_unit_forward(f_in, graph_or_adj, unit: StgcnUnit, training: bool = False) -> Tensor:
    """Single-sequence convenience wrapper: (N, S, C_in) -> (N, S', C_out)."""
    adj = graph_or_adj.adjacency() if isinstance(graph_or_adj, FaceGraph) else np.asarray(graph_or_adj)
    x = as_tensor(f_in)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    out = unit.forward(x, adj, training)
    return out.reshape(out.shape[1:]) if squeeze else out


def geometric_loss(logits, targets) -> Tensor:
    """Batch-mean binary cross-entropy on the movement head."""
    return bce_with_logits(logits, targets).mean()


# -- data plumbing -------------------------------------------------------------

def stack_frames(seqs, dtype) -> np.ndarray:
    """(B, N, S, 2) batch from equal-length normalized sequences."""
    return np.stack([s.frames.transpose(1, 0, 2) for s in seqs]).astype(dtype)


def inference_batch(seqs, seq_len: int, dtype) -> np.ndarray:
    return stack_frames([s.with_frames(normalize_frames(select_inference_window(s, seq_len).frames))
                         for s in seqs], dtype)


def predict(model: StgcnModel, seqs, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(f_g, logit) for every sequence using the max-variance inference window."""
    feats, logits = [], []
    for i in range(0, len(seqs), batch_size):
        batch = inference_batch(seqs[i:i + batch_size], model.config.seq_len, model.dtype)
        f_g, logit = model.forward(batch, training=False)
        feats.append(f_g.data)
        logits.append(logit.data)
    if not feats:
        return np.zeros((0, model.config.feature_dim)), np.zeros(0)
    return np.concatenate(feats), np.concatenate(logits)


def temporal_tokens(model: StgcnModel, seqs, batch_size: int = 64) -> np.ndarray:
    """Per-time geometric tokens (B, S_last, d_g): final map averaged over nodes."""
    out = []
    for i in range(0, len(seqs), batch_size):
        batch = inference_batch(seqs[i:i + batch_size], model.config.seq_len, model.dtype)
        out.append(model.feature_map(batch).data.mean(axis=1))
    return np.concatenate(out) if out else np.zeros((0, model.config.output_length(), model.config.feature_dim))


def node_activations(model: StgcnModel, seq: LandmarkSequence) -> np.ndarray:
    """(N, S_last) channel-wise L2 norm of the final rectified feature map."""
    batch = inference_batch([seq], model.config.seq_len, model.dtype)
    fmap = model.feature_map(batch).data[0]
    return np.sqrt((fmap.astype(np.float64) ** 2).sum(axis=-1))


def write_activations(acts: np.ndarray, path) -> None:
    lines = ["node,time,activation"]
    for node in range(acts.shape[0]):
        for t in range(acts.shape[1]):
            lines.append(f"{node},{t},{float(acts[node, t])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- training ------------------------------------------------------------------

@dataclass
class GcnTrainConfig:
    epochs: int = 65
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: list = field(default_factory=lambda: [50])
    lr_decay_factor: float = 0.1
    augment: dict = field(default_factory=lambda: asdict(AugmentConfig()))
    model: dict = field(default_factory=lambda: asdict(StgcnConfig()))
    class_map: dict = field(default_factory=lambda: MovementClassMap().to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "GcnTrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        # validate nested sections and fill their defaults
        cfg.augment = asdict(AugmentConfig.from_dict(cfg.augment))
        cfg.model = asdict(StgcnConfig.from_dict(cfg.model))
        cfg.class_map = MovementClassMap.from_dict(cfg.class_map).to_dict()
        return cfg

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed after each listed epoch."""
        n = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.lr * self.lr_decay_factor ** n


def train_gcn(train: list[LandmarkSequence], dev: list[LandmarkSequence], graph: FaceGraph,
              config: GcnTrainConfig, rng: np.random.Generator,
              on_epoch=None) -> tuple[StgcnModel, list[dict]]:
    """Train the movement classifier; return the best-dev-AUC model and per-epoch history."""
    if not train:
        raise ValueError("training set is empty")
    class_map = MovementClassMap.from_dict(config.class_map)
    targets = {s.id: movement_label(s.label, class_map)[0] for s in train + dev}
    train_targets = np.array([targets[s.id] for s in train])
    if train_targets.min() == train_targets.max():
        raise ValueError("training set contains a single movement class; AUC is undefined")
    dev_targets = np.array([targets[s.id] for s in dev])
    if len(dev) and dev_targets.min() == dev_targets.max():
        raise ValueError("dev set contains a single movement class; AUC is undefined")

    mcfg = StgcnConfig.from_dict(config.model)
    aug = AugmentConfig.from_dict(config.augment)
    model = StgcnModel(graph, mcfg, rng)
    params = model.parameters()
    history = []
    best_auc, best_state, best_epoch = -math.inf, None, 0
    dev_batch = inference_batch(dev, mcfg.seq_len, model.dtype) if dev else None

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            frames = []
            for i in idx:
                seq = augment(train[i], rng, aug, graph.flip_permutation)
                seq = subsample_random(seq, mcfg.seq_len, rng)
                frames.append(normalize_frames(seq.frames).transpose(1, 0, 2))
            batch = np.stack(frames).astype(model.dtype)
            _, logit = model.forward(batch, training=True)
            loss = geometric_loss(logit, train_targets[idx])
            loss.backward()
            sgd_step(params, lr, config.momentum, config.weight_decay)
            losses.append(float(loss.data) * len(idx))
        record = {"epoch": epoch, "lr": lr, "loss": sum(losses) / len(train)}
        if dev:
            logits = []
            for i in range(0, len(dev), 64):
                logits.append(model.forward(dev_batch[i:i + 64])[1].data)
            scores = sigmoid(np.concatenate(logits).astype(np.float64))
            auc = binary_auc(scores[dev_targets == 1], scores[dev_targets == 0])
            record["dev_auc"] = auc
            if auc > best_auc:
                best_auc, best_epoch = auc, epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        log.info("epoch %d lr %.4g loss %.5f dev_auc %s", epoch, lr, record["loss"],
                 record.get("dev_auc"))
        if on_epoch is not None:
            on_epoch(record)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.best_epoch = best_epoch or config.epochs
    return model, history


def miniature_grad_check(seed: int, num_nodes: int = 4, seq_len: int = 6, batch: int = 3,
                         eps: float = 1e-5) -> float:
    """Finite-difference check of a 2-unit float64 network on a small ring graph.

    The step is smaller than the generic default so that a +-eps probe rarely
    straddles a ReLU kink, where the one-sided derivatives disagree.
    """
    from .core import grad_check
    from .graph import FaceGraph

    rng = np.random.default_rng(seed)
    edges = [(i, (i + 1) % num_nodes) for i in range(num_nodes)]
    graph = FaceGraph(num_nodes, edges, list(range(num_nodes)))
    cfg = StgcnConfig(channels=[3, 4], strides=[1, 2], kernel_size=3, seq_len=seq_len,
                      dtype="float64")
    model = StgcnModel(graph, cfg, rng)
    for unit in model.units:
        unit.mask.data[...] = rng.uniform(0.5, 1.5, unit.mask.shape)
    x = rng.normal(size=(batch, num_nodes, seq_len, 2))
    y = np.arange(batch) % 2

    def loss():
        return geometric_loss(model.forward(x, training=True)[1], y)

    return grad_check(loss, model.parameters(), eps=eps)
