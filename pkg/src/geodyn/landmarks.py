"""Landmark sequences: file ingestion, alignment, temporal sampling, augmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class DataError(ValueError):
    pass


@dataclass
class LandmarkSequence:
    id: str
    label: str
    fps: float
    frames: np.ndarray  # (T, N, 2)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 2:
            raise DataError(f"sequence {self.id!r}: frames must have shape (T, N, 2), "
                            f"got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError(f"sequence {self.id!r}: needs at least one frame")
        if not np.isfinite(self.frames).all():
            raise DataError(f"sequence {self.id!r}: non-finite coordinate")
        if not self.fps > 0:
            raise DataError(f"sequence {self.id!r}: fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "LandmarkSequence":
        return replace(self, frames=frames)

    def to_record(self, decimals: int | None = None) -> dict:
        frames = self.frames if decimals is None else np.round(self.frames, decimals)
        return {"id": self.id, "label": self.label, "fps": self.fps, "frames": frames.tolist()}


@dataclass(frozen=True)
class MovementClassMap:
    normal_labels: frozenset = frozenset({"live", "replay"})
    abnormal_labels: frozenset = frozenset({"print", "print_rigid", "print_bent",
                                            "mask", "mask_rigid", "mask_bent"})
    live_labels: frozenset = frozenset({"live"})

    def __post_init__(self):
        for name in ("normal_labels", "abnormal_labels", "live_labels"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.normal_labels & self.abnormal_labels:
            raise ValueError("a label cannot be both normal and abnormal movement: "
                             f"{sorted(self.normal_labels & self.abnormal_labels)}")
        if not self.live_labels <= self.normal_labels:
            raise ValueError("live labels must be a subset of the normal-movement labels")

    @property
    def vocabulary(self) -> frozenset:
        return self.normal_labels | self.abnormal_labels

    def to_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("normal_labels", "abnormal_labels", "live_labels")}

    @classmethod
    def from_dict(cls, obj: dict) -> "MovementClassMap":
        unknown = set(obj) - {"normal_labels", "abnormal_labels", "live_labels"}
        if unknown:
            raise ValueError(f"unknown class-map keys: {sorted(unknown)}")
        return cls(**{k: frozenset(v) for k, v in obj.items()})


def movement_label(label: str, class_map: MovementClassMap) -> tuple[int, int]:
    """(geometric target, fusion class) for an attack-type label.

    Geometric target is 1 for normal movement. Fusion classes: 0 live,
    1 spoof with normal movement, 2 spoof with abnormal movement.
    """
    if label in class_map.live_labels:
        return 1, 0
    if label in class_map.normal_labels:
        return 1, 1
    if label in class_map.abnormal_labels:
        return 0, 2
    raise DataError(f"label {label!r} is not in the movement class map")


# -- files --------------------------------------------------------------------

def _parse_record(obj, lineno: int, expected_n: int) -> LandmarkSequence:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: record must be an object")
    missing = {"id", "label", "fps", "frames"} - set(obj)
    if missing:
        raise DataError(f"line {lineno}: missing fields {sorted(missing)}")
    rid = obj["id"]
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise DataError(f"line {lineno}: record {rid!r} needs a non-empty frame list")
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != expected_n:
            got = len(frame) if isinstance(frame, list) else "?"
            raise DataError(f"line {lineno}: record {rid!r} frame {t} has {got} landmarks, "
                            f"expected {expected_n}")
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: record {rid!r} has malformed coordinates") from exc
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DataError(f"line {lineno}: record {rid!r} landmarks must be [x, y] pairs")
    if not np.isfinite(arr).all():
        raise DataError(f"line {lineno}: record {rid!r} has a non-finite coordinate")
    try:
        return LandmarkSequence(str(rid), str(obj["label"]), float(obj["fps"]), arr)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from exc


def load_sequences(path, expected_n: int) -> list[LandmarkSequence]:
    """Read a line-delimited landmark file, validating every record."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                # non-finite literals (NaN, Infinity) are rejected below
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record ({exc.msg})") from exc
            out.append(_parse_record(obj, lineno, expected_n))
    return out


def write_sequences(seqs, path, decimals: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(json.dumps(seq.to_record(decimals), separators=(",", ":")) + "\n")


def load_manifest(path) -> dict[str, str]:
    """Read ``<id> <split>`` lines into an id -> split map."""
    splits = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise DataError(f"manifest line {lineno}: expected '<id> <train|dev|test>'")
            if parts[0] in splits:
                raise DataError(f"manifest line {lineno}: duplicate id {parts[0]!r}")
            splits[parts[0]] = parts[1]
    return splits


def write_manifest(splits: dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{k} {v}\n" for k, v in splits.items()), encoding="utf-8")


def select_split(seqs, splits: dict[str, str], split: str) -> list[LandmarkSequence]:
    return [s for s in seqs if splits.get(s.id) == split]


# -- alignment & temporal sampling -------------------------------------------

def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Per-frame, per-axis min-max scaling to [0, 1]; constant axes map to 0.5."""
    lo = frames.min(axis=1, keepdims=True)
    hi = frames.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (frames - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def normalize_sequence(seq: LandmarkSequence) -> LandmarkSequence:
    return seq.with_frames(normalize_frames(seq.frames))


def mirror_pad(seq: LandmarkSequence, length: int) -> LandmarkSequence:
    """Extend to ``length`` frames by bouncing between the ends: f1 f2 f3 f2 f1 f2 ..."""
    t = seq.num_frames
    if length < 1:
        raise ValueError("target length must be >= 1")
    if t > length:
        raise ValueError(f"sequence {seq.id!r} has {t} frames, more than the target {length}")
    if t == 1:
        idx = np.zeros(length, dtype=int)
    else:
        period = 2 * (t - 1)
        pos = np.arange(length) % period
        idx = np.where(pos < t, pos, period - pos)
    return seq.with_frames(seq.frames[idx])


def subsample_random(seq: LandmarkSequence, length: int, rng: np.random.Generator) -> LandmarkSequence:
    if length < 1:
        raise ValueError("sub-sampling length must be >= 1")
    t = seq.num_frames
    if t < length:
        return mirror_pad(seq, length)
    idx = np.sort(rng.choice(t, size=length, replace=False))
    return seq.with_frames(seq.frames[idx])


def window_scores(frames: np.ndarray, length: int) -> np.ndarray:
    """Sum over landmarks and axes of the positional variance inside every window."""
    windows = np.lib.stride_tricks.sliding_window_view(frames, length, axis=0)
    return windows.var(axis=-1).sum(axis=(1, 2))


def select_inference_window(seq: LandmarkSequence, length: int) -> LandmarkSequence:
    """The contiguous window of ``length`` frames with the most positional variance.

    Ties resolve to the earliest window; short sequences are mirror padded.
    """
    if length < 1:
        raise ValueError("window length must be >= 1")
    if seq.num_frames <= length:
        return mirror_pad(seq, length)
    start = int(np.argmax(window_scores(seq.frames, length)))
    return seq.with_frames(seq.frames[start:start + length])


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotation_prob: float = 0.5
    max_rotation_deg: float = 10.0
    flip_prob: float = 0.5

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**obj)


def rotate(frames: np.ndarray, angle: float, centre: np.ndarray | None = None) -> np.ndarray:
    if centre is None:
        centre = frames.reshape(-1, 2).mean(axis=0)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (frames - centre) @ rot.T + centre


def flip(frames: np.ndarray, permutation=None, centre_x: float | None = None) -> np.ndarray:
    """Mirror x about the sequence centroid, then relabel nodes left<->right."""
    if centre_x is None:
        centre_x = float(frames[..., 0].mean())
    out = frames.copy()
    out[..., 0] = 2 * centre_x - out[..., 0]
    if permutation is not None:
        perm = np.asarray(permutation)
        if perm.shape != (frames.shape[1],):
            raise DataError(f"flip permutation has length {perm.size}, sequence has "
                            f"{frames.shape[1]} landmarks")
        out = out[:, perm]
    return out


_warned = False


def _warn_no_permutation() -> None:
    global _warned
    if not _warned:
        log.warning("horizontal flip without a node permutation; left/right labels are not swapped")
        _warned = True


def augment(seq: LandmarkSequence, rng: np.random.Generator, config: AugmentConfig,
            flip_permutation=None) -> LandmarkSequence:
    """Random whole-sequence rotation and horizontal flip; run before normalization."""
    frames = seq.frames
    if flip_permutation is not None and len(flip_permutation) != seq.num_nodes:
        raise DataError(f"flip permutation has length {len(flip_permutation)}, sequence has "
                        f"{seq.num_nodes} landmarks")
    # draw all randoms up front so the stream does not depend on the outcome
    u_rot, u_angle, u_flip = rng.random(3)
    if u_rot < config.rotation_prob:
        theta = math.radians(config.max_rotation_deg) * (2 * u_angle - 1)
        frames = rotate(frames, theta)
    if u_flip < config.flip_prob:
        if flip_permutation is None:
            _warn_no_permutation()
        frames = flip(frames, flip_permutation)
    return seq.with_frames(frames)
