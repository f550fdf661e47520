"""Anti-spoofing metrics: AUC, EER threshold, APCER/BPCER/ACER/HTER."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

LIVE_LABELS = frozenset({"live"})


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    label: str
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score for {self.id!r} must be finite and in [0, 1], got {self.score}")


@dataclass
class EvalReport:
    threshold: float
    threshold_policy: str
    threshold_split: str | None
    apcer: float
    apcer_per_type: dict
    bpcer: float
    acer: float
    far: float
    frr: float
    hter: float
    auc: float | None = None
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _split(records, live_labels=LIVE_LABELS) -> tuple[np.ndarray, np.ndarray]:
    live = np.array([r.score for r in records if r.label in live_labels], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label not in live_labels], dtype=np.float64)
    return live, spoof


def binary_auc(positive, negative) -> float:
    """P(random positive outscores random negative), ties counting one half."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one live and one spoof score")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc(records, live_labels=LIVE_LABELS) -> float:
    live, spoof = _split(records, live_labels)
    return binary_auc(live, spoof)


def _rates(live: np.ndarray, spoof: np.ndarray, threshold: float) -> tuple[float, float]:
    far = float(np.mean(spoof >= threshold)) if spoof.size else 0.0
    frr = float(np.mean(live < threshold)) if live.size else 0.0
    return far, frr


def eer_threshold(records, live_labels=LIVE_LABELS) -> tuple[float, float]:
    """Threshold minimizing |FAR - FRR| over midpoints of consecutive distinct scores.

    Returns (threshold, (FAR + FRR) / 2 at that threshold). Ties go to the lower
    threshold; a single distinct score is used as the threshold itself.
    """
    live, spoof = _split(records, live_labels)
    if live.size == 0 or spoof.size == 0:
        raise ValueError("EER needs at least one live and one spoof score")
    distinct = np.unique(np.concatenate([live, spoof]))
    candidates = (distinct[:-1] + distinct[1:]) / 2 if distinct.size > 1 else distinct
    best = None
    for thr in candidates:
        far, frr = _rates(live, spoof, thr)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, float(thr), (far + frr) / 2)
    return best[1], best[2]


def classification_rates(records, threshold: float, live_labels=LIVE_LABELS,
                         policy: str = "fixed", split: str | None = None) -> EvalReport:
    """Error rates at ``threshold``; a score equal to the threshold counts as live."""
    records = list(records)
    if not records:
        raise ValueError("no score records")
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    live, spoof = _split(records, live_labels)
    per_type, counts = {}, {}
    for label in sorted({r.label for r in records}):
        scores = np.array([r.score for r in records if r.label == label])
        counts[label] = int(scores.size)
        if label not in live_labels:
            per_type[label] = float(np.mean(scores >= threshold))
    apcer = max(per_type.values()) if per_type else 0.0
    bpcer = float(np.mean(live < threshold)) if live.size else 0.0
    far, frr = _rates(live, spoof, threshold)
    return EvalReport(
        threshold=float(threshold), threshold_policy=policy, threshold_split=split,
        apcer=apcer, apcer_per_type=per_type, bpcer=bpcer, acer=(apcer + bpcer) / 2,
        far=far, frr=frr, hter=(far + frr) / 2, counts=counts)
