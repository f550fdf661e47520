"""Synthetic landmark sequences with known movement classes, plus paired
Gaussian photometric features.

Live and replay sequences carry articulated motion (blinks and mouth
movement) on top of small rigid jitter; print and mask kinds move only as
rigid bodies, and the bent print adds a smooth global quadratic warp. Replay
shares the live motion model but draws its photometric feature from the spoof
distribution, so neither modality alone separates live from everything else.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import config_digest
from .fusion import PhotometricFeature, write_photometric_features
from .graph import FaceTemplate, TemplateConfig, make_template, save_graph
from .landmarks import LandmarkSequence, write_manifest, write_sequences

KINDS = ("live", "replay", "print_rigid", "print_bent", "mask_rigid")
ARTICULATED = ("live", "replay")


@dataclass
class MotionParams:
    fps: float = 30.0
    blink_rate: float = 0.5          # extra blinks per second after the first
    blink_amplitude: float = 0.85    # fraction of eye half-height closed at peak
    blink_width: float = 2.5         # Gaussian width of a blink, frames
    mouth_amplitude: float = 4.0     # lower-lip displacement at peak, pixels
    jitter_sigma: float = 0.3        # live per-frame translation jitter, pixels
    jitter_rotation_deg: float = 0.3
    translation_amplitude: float = 6.0
    rotation_amplitude_deg: float = 4.0
    bend_curvature: list = field(default_factory=lambda: [3e-4, 8e-4])
    mask_shape_sigma: float = 1.0    # static shape offset of mask kinds, pixels
    noise_sigma: float = 0.2

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def still(cls) -> "MotionParams":
        """Every amplitude zero: all frames equal the template."""
        return cls(blink_amplitude=0.0, mouth_amplitude=0.0, jitter_sigma=0.0,
                   jitter_rotation_deg=0.0, translation_amplitude=0.0,
                   rotation_amplitude_deg=0.0, bend_curvature=[0.0, 0.0],
                   mask_shape_sigma=0.0, noise_sigma=0.0)


@dataclass
class PhotometricParams:
    dim: int = 32
    separation: float = 3.0
    sigma: float = 1.0
    overlap: float = 0.6
    frames: int = 0                  # per-frame tokens per sequence; 0 = vector only
    frame_sigma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")


@dataclass
class SynthConfig:
    template: dict = field(default_factory=lambda: asdict(TemplateConfig()))
    counts: dict = field(default_factory=lambda: {k: 100 for k in KINDS})
    frames: int = 48
    motion: dict = field(default_factory=lambda: asdict(MotionParams()))
    photometric: dict = field(default_factory=lambda: asdict(PhotometricParams()))
    splits: dict = field(default_factory=lambda: {"train": 0.6, "dev": 0.2, "test": 0.2})
    decimals: int = 4
    seed: int = 0

    def __post_init__(self):
        if any(int(c) < 0 for c in self.counts.values()):
            raise ValueError("class counts must be >= 0")
        unknown = set(self.counts) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown sequence kinds {sorted(unknown)}")
        if set(self.splits) - {"train", "dev", "test"} or abs(sum(self.splits.values()) - 1) > 1e-9:
            raise ValueError("splits must be fractions over train/dev/test summing to 1")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        self.template = asdict(TemplateConfig.from_dict(self.template))
        self.motion = asdict(_strict(MotionParams, self.motion))
        self.photometric = asdict(_strict(PhotometricParams, self.photometric))

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        return _strict(cls, obj)


def _strict(cls, obj: dict):
    unknown = set(obj) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**obj)


def sequence_seed(master_seed: int, seq_id: str) -> np.random.SeedSequence:
    digest = int.from_bytes(hashlib.sha256(seq_id.encode()).digest()[:8], "little")
    return np.random.SeedSequence([int(master_seed), digest])


def _rigid(points: np.ndarray, angle: float, shift, centre: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (points - centre) @ rot.T + centre + np.asarray(shift)


def _smooth_trajectory(rng, n: int, fps: float, amplitude: float) -> np.ndarray:
    t = np.arange(n) / fps
    freq = rng.uniform(0.3, 1.0)
    phase = rng.uniform(0, 2 * math.pi)
    return amplitude * rng.uniform(0.5, 1.0) * np.sin(2 * math.pi * freq * t + phase)


def _blink_envelope(rng, n: int, p: MotionParams) -> np.ndarray:
    times = [rng.uniform(0.15 * n, 0.85 * n)]
    extra = rng.poisson(p.blink_rate * n / p.fps)
    times += list(rng.uniform(0, n, size=extra))
    frames = np.arange(n)[:, None]
    pulses = np.exp(-0.5 * ((frames - np.array(times)[None]) / p.blink_width) ** 2)
    return pulses.max(axis=1)


def generate_sequence(kind: str, template: FaceTemplate, params: MotionParams, rng: np.random.Generator,
                      num_frames: int = 48, seq_id: str | None = None) -> LandmarkSequence:
    if kind not in KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}")
    p = params
    base = template.positions
    n = num_frames
    centre = base.mean(axis=0)
    frames = np.repeat(base[None], n, axis=0)

    if kind in ARTICULATED:
        blink = _blink_envelope(rng, n, p)
        for eye in ("left_eye", "right_eye"):
            idx = template.regions[eye]
            cy = base[idx, 1].mean()
            frames[:, idx, 1] = cy + (base[idx, 1] - cy)[None] * (1 - p.blink_amplitude * blink[:, None])
        mouth = template.regions["mouth"]
        my = base[mouth, 1].mean()
        half = base[mouth, 1].max() - my
        lower = np.clip((base[mouth, 1] - my) / half, 0, None)
        t = np.arange(n) / p.fps
        env = 0.5 * (1 - np.cos(2 * math.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * math.pi)))
        frames[:, mouth, 1] += p.mouth_amplitude * env[:, None] * lower[None]
        shifts = rng.normal(0, p.jitter_sigma, (n, 2))
        angles = rng.normal(0, math.radians(p.jitter_rotation_deg), n)
    else:
        if kind == "mask_rigid":
            frames = frames + rng.normal(0, p.mask_shape_sigma, base.shape)[None]
        if kind == "print_bent":
            lo, hi = p.bend_curvature
            curv = rng.uniform(lo, hi) * np.sin(
                2 * math.pi * rng.uniform(0.3, 1.0) * np.arange(n) / p.fps + rng.uniform(0, 2 * math.pi))
            frames[:, :, 1] += curv[:, None] * (base[None, :, 0] - centre[0]) ** 2
        shifts = np.stack([_smooth_trajectory(rng, n, p.fps, p.translation_amplitude),
                           _smooth_trajectory(rng, n, p.fps, p.translation_amplitude)], 1)
        angles = _smooth_trajectory(rng, n, p.fps, math.radians(p.rotation_amplitude_deg))

    for i in range(n):
        frames[i] = _rigid(frames[i], angles[i], shifts[i], centre)
    if p.noise_sigma > 0:
        frames = frames + rng.normal(0, p.noise_sigma, frames.shape)
    label = kind
    return LandmarkSequence(seq_id or kind, label, p.fps, frames)


# -- Procrustes statistics -----------------------------------------------------

def rigid_residual(source: np.ndarray, target: np.ndarray) -> float:
    """RMS distance left after the best rotation+translation of ``source`` onto ``target``."""
    a = source - source.mean(axis=0)
    b = target - target.mean(axis=0)
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, d]) @ vt
    return float(np.sqrt(((a @ rot - b) ** 2).sum(axis=1).mean()))


def procrustes_residuals(frames: np.ndarray) -> np.ndarray:
    """Per-frame rigid residual against frame 0."""
    return np.array([rigid_residual(f, frames[0]) for f in frames])


def movement_statistic(seq: LandmarkSequence) -> float:
    """Largest per-frame deformation after rigid alignment to the first frame."""
    return float(procrustes_residuals(seq.frames).max())


# -- datasets ------------------------------------------------------------------

@dataclass
class SynthDataset:
    sequences: list
    features: list
    splits: dict
    manifest: list
    graph: object
    template: FaceTemplate


def _assign_splits(ids: list[str], fractions: dict, rng) -> dict[str, str]:
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions.get("train", 0) * n))
    n_dev = int(round(fractions.get("dev", 0) * n))
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return out


def synthesize(config: SynthConfig) -> SynthDataset:
    """Generate everything in memory; deterministic given ``config.seed``."""
    graph, template = make_template(TemplateConfig.from_dict(config.template))
    motion = MotionParams(**config.motion)
    photo = PhotometricParams(**config.photometric)
    master = np.random.default_rng(np.random.SeedSequence([int(config.seed), 7]))
    direction = master.normal(size=photo.dim)
    direction /= np.linalg.norm(direction)
    live_mean = np.zeros(photo.dim)
    spoof_mean = live_mean + (1 - photo.overlap) * photo.separation * direction
    params_hash = config_digest(asdict(config))

    seqs, feats, splits, manifest = [], [], {}, []
    for kind in KINDS:
        count = int(config.counts.get(kind, 0))
        ids = [f"{kind}_{i:04d}" for i in range(count)]
        kind_splits = _assign_splits(ids, config.splits, master)
        for seq_id in ids:
            rng = np.random.default_rng(sequence_seed(config.seed, seq_id))
            seq = generate_sequence(kind, template, motion, rng, config.frames, seq_id)
            mean = live_mean if kind == "live" else spoof_mean
            vec = mean + photo.sigma * rng.normal(size=photo.dim)
            frames = None
            if photo.frames > 0:
                raw = vec + photo.frame_sigma * rng.normal(size=(photo.frames, photo.dim))
                frames = raw - raw.mean(axis=0) + vec
                vec = frames.mean(axis=0)
            seqs.append(seq)
            feats.append(PhotometricFeature(seq_id, vec, frames))
            splits[seq_id] = kind_splits[seq_id]
            manifest.append({"id": seq_id, "label": kind, "split": kind_splits[seq_id],
                             "params_hash": params_hash})
    return SynthDataset(seqs, feats, splits, manifest, graph, template)


LANDMARK_FILE = "landmarks.jsonl"
FEATURE_FILE = "features.jsonl"
MANIFEST_FILE = "manifest.txt"
MANIFEST_DETAIL_FILE = "manifest.json"
GRAPH_FILE = "graph.json"


def write_dataset(data: SynthDataset, out_dir, decimals: int | None = 4) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"landmarks": out / LANDMARK_FILE, "features": out / FEATURE_FILE,
             "manifest": out / MANIFEST_FILE, "manifest_detail": out / MANIFEST_DETAIL_FILE,
             "graph": out / GRAPH_FILE}
    write_sequences(data.sequences, paths["landmarks"], decimals)
    write_photometric_features(data.features, paths["features"])
    write_manifest(data.splits, paths["manifest"])
    paths["manifest_detail"].write_text(json.dumps(data.manifest, indent=1) + "\n", encoding="utf-8")
    save_graph(data.graph, paths["graph"])
    return paths


def generate_dataset(config: SynthConfig, out_dir) -> dict[str, Path]:
    """Write landmark, feature, manifest and graph files under ``out_dir``."""
    return write_dataset(synthesize(config), out_dir, config.decimals)
