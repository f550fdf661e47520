"""Cross-attention interaction between geometric and photometric features.

Queries from one modality attend over keys/values of the other. With one
token per modality the softmax runs over a single key, its weight is exactly
1, and each interaction feature is simply the other modality's value
projection; token mode (per-frame photometric features and per-time
geometric features) gives the attention something to weigh.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import Parameter, Tensor, as_tensor, concat, cross_entropy, sgd_step, softmax
from .landmarks import MovementClassMap, movement_label
from .stgcn import StgcnModel, predict, temporal_tokens

log = logging.getLogger(__name__)


@dataclass
class PhotometricFeature:
    id: str
    vector: np.ndarray
    frames: np.ndarray | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or not np.isfinite(self.vector).all():
            raise ValueError(f"feature {self.id!r} must be a finite vector")
        if self.frames is not None:
            self.frames = np.asarray(self.frames, dtype=np.float64)
            if self.frames.ndim != 2 or self.frames.shape[1] != self.vector.size:
                raise ValueError(f"feature {self.id!r}: frame rows must match the vector length")
            if not np.isfinite(self.frames).all():
                raise ValueError(f"feature {self.id!r}: non-finite frame value")
            if np.abs(self.frames.mean(axis=0) - self.vector).max() > 1e-4:
                raise ValueError(f"feature {self.id!r}: vector differs from the frame mean")

    def to_record(self, decimals: int | None = None) -> dict:
        rnd = (lambda a: a) if decimals is None else (lambda a: np.round(a, decimals))
        rec = {"id": self.id, "feature": rnd(self.vector).tolist()}
        if self.frames is not None:
            rec["frames"] = rnd(self.frames).tolist()
        return rec


def load_photometric_features(path) -> dict[str, PhotometricFeature]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                fid = str(obj["id"])
                vec = obj["feature"]
                frames = obj.get("frames")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"feature line {lineno}: malformed record ({exc})") from exc
            if fid in out:
                raise ValueError(f"feature line {lineno}: duplicate id {fid!r}")
            if frames is not None and len({len(row) for row in frames}) > 1:
                raise ValueError(f"feature line {lineno}: ragged frame rows for {fid!r}")
            try:
                out[fid] = PhotometricFeature(fid, vec, frames)
            except ValueError as exc:
                raise ValueError(f"feature line {lineno}: {exc}") from exc
    return out


def write_photometric_features(features, path, decimals: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for feat in features:
            # decimals=None keeps full float repr so frame means stay exact
            fh.write(json.dumps(feat.to_record(decimals), separators=(",", ":")) + "\n")


def cross_attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


@dataclass
class FusionConfig:
    attn_dim: int = 256
    tokens: str = "single"
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    patience: int = 20
    standardize: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.tokens not in ("single", "frames"):
            raise ValueError(f"unknown token mode {self.tokens!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "FusionConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**obj)


class FusionModel:
    def __init__(self, geo_dim: int, photo_dim: int, config: FusionConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or FusionConfig()
        self.geo_dim, self.photo_dim = geo_dim, photo_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(self.config.dtype)
        da = self.config.attn_dim

        def proj(name, d_in, d_out):
            return Parameter(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_out)), name, dt)

        self.wq_g = proj("wq_g", geo_dim, da)
        self.wk_g = proj("wk_g", geo_dim, da)
        self.wv_g = proj("wv_g", geo_dim, da)
        self.wq_p = proj("wq_p", photo_dim, da)
        self.wk_p = proj("wk_p", photo_dim, da)
        self.wv_p = proj("wv_p", photo_dim, da)
        self.cls_w = proj("cls_w", 2 * da, 3)
        self.cls_b = Parameter(np.zeros(3), "cls_b", dt)
        # per-dimension input statistics, fitted on the training split
        self.geo_mean, self.geo_scale = np.zeros(geo_dim), np.ones(geo_dim)
        self.photo_mean, self.photo_scale = np.zeros(photo_dim), np.ones(photo_dim)

    def fit_input_stats(self, geo, photo) -> None:
        """z-score statistics over all training tokens of each modality."""
        g = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1, self.geo_dim) for x in geo])
        p = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1, self.photo_dim) for x in photo])
        self.geo_mean, self.geo_scale = g.mean(axis=0), g.std(axis=0) + 1e-6
        self.photo_mean, self.photo_scale = p.mean(axis=0), p.std(axis=0) + 1e-6

    def standardize(self, f_g, f_p):
        if not self.config.standardize:
            return f_g, f_p
        f_g = f_g.data if isinstance(f_g, Tensor) else f_g
        f_p = f_p.data if isinstance(f_p, Tensor) else f_p
        g = (np.asarray(f_g, dtype=np.float64) - self.geo_mean) / self.geo_scale
        p = (np.asarray(f_p, dtype=np.float64) - self.photo_mean) / self.photo_scale
        return g, p

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[Parameter]:
        return [self.wq_g, self.wk_g, self.wv_g, self.wq_p, self.wk_p, self.wv_p,
                self.cls_w, self.cls_b]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        state.update({"input.geo_mean": self.geo_mean.copy(), "input.geo_scale": self.geo_scale.copy(),
                      "input.photo_mean": self.photo_mean.copy(),
                      "input.photo_scale": self.photo_scale.copy()})
        return state

    def load_state_dict(self, state) -> None:
        for key in ("geo_mean", "geo_scale", "photo_mean", "photo_scale"):
            setattr(self, key, np.asarray(state[f"input.{key}"], dtype=np.float64).copy())
        for p in self.parameters():
            if p.name not in state or state[p.name].shape != p.shape:
                raise ValueError(f"missing or mis-shaped fusion parameter {p.name}")
            p.data = np.ascontiguousarray(state[p.name], dtype=self.dtype)
            p.grad = np.zeros_like(p.data)
            p.momentum_buffer = np.zeros_like(p.data)

    def _tokens(self, f, dim: int, name: str) -> Tensor:
        f = as_tensor(np.asarray(f.data if isinstance(f, Tensor) else f, dtype=self.dtype))
        if f.shape[-1] != dim:
            raise ValueError(f"{name} feature has dimension {f.shape[-1]}, expected {dim}")
        if f.ndim == 1:
            f = f.reshape(1, 1, dim)
        elif f.ndim == 2:
            f = f.reshape(f.shape[0], 1, dim)  # batch of single tokens
        return f

    def interact(self, f_g, f_p) -> tuple[Tensor, Tensor]:
        """(f_gp, f_pg), each (B, d_a); multi-token outputs are averaged over queries.

        Inputs are (d,) / (B, d) single tokens or (B, m, d) token sets.
        """
        g = self._tokens(f_g, self.geo_dim, "geometric")
        p = self._tokens(f_p, self.photo_dim, "photometric")
        if g.shape[0] != p.shape[0]:
            raise ValueError("geometric and photometric batches differ in size")
        f_gp = cross_attention(g @ self.wq_g, p @ self.wk_p, p @ self.wv_p)
        f_pg = cross_attention(p @ self.wq_p, g @ self.wk_g, g @ self.wv_g)
        return f_gp.mean(axis=1), f_pg.mean(axis=1)

    def forward(self, f_g, f_p) -> tuple[Tensor, np.ndarray]:
        """(logits (B, 3), live-class probability (B,)) from raw features."""
        f_gp, f_pg = self.interact(*self.standardize(f_g, f_p))
        logits = concat([f_gp, f_pg], axis=-1) @ self.cls_w + self.cls_b
        score = softmax(logits.data.astype(np.float64), axis=-1)[:, 0]
        return logits, score

    __call__ = forward

    def metadata(self, **extra) -> dict:
        meta = {"kind": "fusion", "config": asdict(self.config), "geo_dim": self.geo_dim,
                "photo_dim": self.photo_dim,
                "config_hash": checkpoint.config_digest(asdict(self.config))}
        meta.update(extra)
        return meta

    def save(self, path, **extra) -> Path:
        return checkpoint.save(path, self.state_dict(), self.metadata(**extra))


def load_fusion(path) -> tuple[FusionModel, dict]:
    state, meta = checkpoint.load(path)
    if meta.get("kind") != "fusion":
        raise ValueError(f"{path} is not a fusion checkpoint")
    model = FusionModel(meta["geo_dim"], meta["photo_dim"], FusionConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta


def fusion_forward(f_g, f_p, model: FusionModel) -> tuple[np.ndarray, np.ndarray]:
    logits, score = model.forward(f_g, f_p)
    return logits.data, score


def _batched_scores(model: FusionModel, geo, photo, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    logits, scores = [], []
    if model.config.tokens == "single":
        for i in range(0, len(geo), batch_size):
            lg, sc = model.forward(geo[i:i + batch_size], photo[i:i + batch_size])
            logits.append(lg.data)
            scores.append(sc)
    else:
        for g, p in zip(geo, photo):
            lg, sc = model.forward(g[None], p[None])
            logits.append(lg.data)
            scores.append(sc)
    return np.concatenate(logits), np.concatenate(scores)


def photometric_inputs(ids, features: dict[str, PhotometricFeature], tokens: str) -> list | np.ndarray:
    missing = [i for i in ids if i not in features]
    if missing:
        raise KeyError(f"no photometric feature for id {missing[0]!r}")
    if tokens == "single":
        return np.stack([features[i].vector for i in ids])
    out = []
    for i in ids:
        if features[i].frames is None:
            raise ValueError(f"token mode 'frames' needs per-frame photometric data for {i!r}")
        out.append(features[i].frames)
    return out


def fit_fusion(geo_train, photo_train, y_train, geo_dev, photo_dev, y_dev,
                 config: FusionConfig, rng: np.random.Generator,
                 on_epoch=None) -> tuple[FusionModel, list[dict]]:
    """Fit the interaction module on frozen features with 3-class cross-entropy.

    ``geo_*``/``photo_*`` are arrays (single-token mode) or lists of token
    matrices; ``y_*`` hold fusion classes 0/1/2. Stops when dev accuracy has
    not improved for ``config.patience`` epochs and restores the best epoch.
    """
    y_train = np.asarray(y_train)
    absent = sorted(set(range(3)) - set(y_train.tolist()))
    if absent:
        raise ValueError(f"fusion class(es) {absent} absent from the training split")
    geo_dim = np.shape(geo_train[0])[-1]
    photo_dim = np.shape(photo_train[0])[-1]
    model = FusionModel(geo_dim, photo_dim, config, rng)
    model.fit_input_stats(geo_train, photo_train)
    params = model.parameters()
    single = config.tokens == "single"
    if single:
        geo_train = np.asarray(geo_train, dtype=model.dtype)
        photo_train = np.asarray(photo_train, dtype=model.dtype)
    history = []
    best_acc, best_state, stale = -1.0, None, 0
    n = len(y_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if single:
                logits, _ = model.forward(geo_train[idx], photo_train[idx])
                loss = cross_entropy(logits, y_train[idx]).mean()
            else:
                losses = []
                for i in idx:
                    lg, _ = model.forward(np.asarray(geo_train[i])[None], np.asarray(photo_train[i])[None])
                    losses.append(cross_entropy(lg, y_train[i:i + 1]))
                loss = concat(losses, axis=0).mean()
            loss.backward()
            sgd_step(params, config.lr, config.momentum, config.weight_decay)
            total += float(loss.data) * len(idx)
        record = {"epoch": epoch, "loss": total / n}
        if len(y_dev):
            logits, _ = _batched_scores(model, geo_dev, photo_dev)
            acc = float(np.mean(logits.argmax(axis=1) == np.asarray(y_dev)))
            record["dev_acc"] = acc
            if acc > best_acc:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if len(y_dev) and stale >= config.patience:
            log.info("early stop at epoch %d (best dev acc %.4f)", epoch, best_acc)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def score_fusion(model: FusionModel, geo, photo) -> np.ndarray:
    return _batched_scores(model, geo, photo)[1]


def geometric_inputs(gcn: StgcnModel, seqs, tokens: str):
    """Frozen geometric features: pooled vectors, or per-time token matrices."""
    if tokens == "single":
        return predict(gcn, seqs)[0]
    return list(temporal_tokens(gcn, seqs))


def train_fusion(gcn: StgcnModel, features: dict[str, PhotometricFeature], train, dev,
                 config: FusionConfig, rng: np.random.Generator,
                 class_map: MovementClassMap | None = None,
                 on_epoch=None) -> tuple[FusionModel, list[dict]]:
    """Extract frozen f_g once per sequence and fit the fusion module."""
    class_map = class_map or MovementClassMap()
    for seq in list(train) + list(dev):
        if seq.id not in features:
            raise KeyError(f"no photometric feature for id {seq.id!r}")
    y_train = np.array([movement_label(s.label, class_map)[1] for s in train])
    y_dev = np.array([movement_label(s.label, class_map)[1] for s in dev])
    geo_train = geometric_inputs(gcn, train, config.tokens)
    geo_dev = geometric_inputs(gcn, dev, config.tokens)
    photo_train = photometric_inputs([s.id for s in train], features, config.tokens)
    photo_dev = photometric_inputs([s.id for s in dev], features, config.tokens)
    return fit_fusion(geo_train, photo_train, y_train, geo_dev, photo_dev, y_dev,
                      config, rng, on_epoch)
