"""Scoring sequences with trained models and evaluating them under a threshold policy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import sigmoid
from .fusion import FusionModel, geometric_inputs, photometric_inputs, score_fusion
from .landmarks import select_split
from .metrics import LIVE_LABELS, EvalReport, ScoreRecord, auc, classification_rates, eer_threshold
from .stgcn import StgcnModel, predict

POLICIES = ("fixed", "eer-dev", "eer-test")


@dataclass
class ProtocolConfig:
    score_source: str = "geometric"
    threshold_policy: str = "eer-dev"
    threshold: float = 0.5
    dev_split: str = "dev"
    test_split: str = "test"
    live_labels: list = field(default_factory=lambda: sorted(LIVE_LABELS))

    def __post_init__(self):
        if self.score_source not in ("geometric", "fusion"):
            raise ValueError(f"unknown score source {self.score_source!r}")
        if self.threshold_policy not in POLICIES:
            raise ValueError(f"threshold policy must be one of {POLICIES}")

    @classmethod
    def from_dict(cls, obj: dict) -> "ProtocolConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class ModelBundle:
    gcn: StgcnModel
    fusion: FusionModel | None = None
    gcn_meta: dict = field(default_factory=dict)
    fusion_meta: dict = field(default_factory=dict)


def score_sequences(bundle: ModelBundle, seqs, source: str = "geometric",
                    features=None) -> list[ScoreRecord]:
    """Liveness score per sequence (max-variance inference window)."""
    if not seqs:
        return []
    if source == "geometric":
        _, logits = predict(bundle.gcn, seqs)
        scores = sigmoid(logits.astype(np.float64))
    else:
        if bundle.fusion is None:
            raise ValueError("fusion scoring needs a fusion checkpoint")
        if features is None:
            raise ValueError("fusion scoring needs photometric features")
        tokens = bundle.fusion.config.tokens
        photo = photometric_inputs([s.id for s in seqs], features, tokens)
        geo = geometric_inputs(bundle.gcn, seqs, tokens)
        scores = score_fusion(bundle.fusion, geo, photo)
    return [ScoreRecord(s.id, s.label, float(np.clip(v, 0.0, 1.0))) for s, v in zip(seqs, scores)]


def run_protocol(bundle: ModelBundle, sequences, splits: dict[str, str], config: ProtocolConfig,
                 features=None) -> tuple[EvalReport, list[ScoreRecord]]:
    live = frozenset(config.live_labels)
    test = select_split(sequences, splits, config.test_split)
    if not test:
        raise ValueError(f"split {config.test_split!r} is empty or missing")
    records = score_sequences(bundle, test, config.score_source, features)
    if config.threshold_policy == "fixed":
        threshold, origin = config.threshold, None
    elif config.threshold_policy == "eer-test":
        threshold, origin = eer_threshold(records, live)[0], config.test_split
    else:
        dev = select_split(sequences, splits, config.dev_split)
        if not dev:
            raise ValueError(f"split {config.dev_split!r} is empty or missing")
        threshold = eer_threshold(score_sequences(bundle, dev, config.score_source, features), live)[0]
        origin = config.dev_split
    report = classification_rates(records, threshold, live, config.threshold_policy, origin)
    report.auc = auc(records, live)
    report.extra = {
        "protocol": asdict(config),
        "gcn_config_hash": bundle.gcn_meta.get("config_hash"),
        "graph_hash": bundle.gcn_meta.get("graph_hash"),
        "fusion_config_hash": bundle.fusion_meta.get("config_hash") if bundle.fusion else None,
    }
    return report, records


def write_scores(records, path) -> None:
    lines = ["id,label,score"] + [f"{r.id},{r.label},{r.score!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def linear_probe(train_x, train_positive, test_x, ridge: float = 1e-3) -> np.ndarray:
    """Fisher discriminant scores: w = (S_w + ridge I)^-1 (mu_pos - mu_neg)."""
    x = np.asarray(train_x, dtype=np.float64)
    pos = np.asarray(train_positive, dtype=bool)
    if pos.all() or not pos.any():
        raise ValueError("linear probe needs both classes in training")
    mu1, mu0 = x[pos].mean(axis=0), x[~pos].mean(axis=0)
    centred = np.concatenate([x[pos] - mu1, x[~pos] - mu0])
    within = centred.T @ centred / max(len(x) - 2, 1) + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(within, mu1 - mu0)
    return np.asarray(test_x, dtype=np.float64) @ w
