"""Face graph topology, template layouts and masked adjacency normalization."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Tensor, as_tensor

DEGREE_FLOOR = 1e-6


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class FaceGraph:
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    flip_permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise GraphError(f"num_nodes must be positive, got {n}")
        canon = []
        seen = set()
        for edge in self.edges:
            if len(edge) != 2:
                raise GraphError(f"edge {edge!r} must have two endpoints")
            i, j = (int(v) for v in edge)
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) has an index outside [0, {n})")
            if i == j:
                raise GraphError(f"self-loop at node {i}; self connections come from +I")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "edges", tuple(canon))
        if self.flip_permutation is not None:
            perm = tuple(int(v) for v in self.flip_permutation)
            if len(perm) != n or sorted(perm) != list(range(n)):
                raise GraphError("flip_permutation must be a permutation of all node indices")
            if any(perm[perm[i]] != i for i in range(n)):
                raise GraphError("flip_permutation must be an involution")
            object.__setattr__(self, "flip_permutation", perm)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def to_dict(self) -> dict:
        out = {"num_nodes": self.num_nodes, "edges": [list(e) for e in self.edges]}
        if self.flip_permutation is not None:
            out["flip_permutation"] = list(self.flip_permutation)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def permuted(self, perm) -> "FaceGraph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = [int(p) for p in perm]
        inv = np.argsort(perm)
        edges = [(int(inv[i]), int(inv[j])) for i, j in self.edges]
        flip = None
        if self.flip_permutation is not None:
            flip = [int(inv[self.flip_permutation[perm[k]]]) for k in range(self.num_nodes)]
        return FaceGraph(self.num_nodes, tuple(edges), None if flip is None else tuple(flip))

    def is_connected(self) -> bool:
        nbrs = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in nbrs[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return len(seen) == self.num_nodes


def graph_from_dict(obj: dict) -> FaceGraph:
    unknown = set(obj) - {"num_nodes", "edges", "flip_permutation"}
    if unknown:
        raise GraphError(f"unknown graph fields: {sorted(unknown)}")
    try:
        n = int(obj["num_nodes"])
        edges = tuple(tuple(e) for e in obj["edges"])
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph object: {exc}") from exc
    flip = obj.get("flip_permutation")
    return FaceGraph(n, edges, None if flip is None else tuple(flip))


def load_graph(path) -> FaceGraph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))


def save_graph(graph: FaceGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def normalized_adjacency(graph_or_adj, mask, degree_grad: bool = True,
                         eps: float = DEGREE_FLOOR) -> Tensor:
    """Return L^{-1/2} ((A + I) * M) L^{-1/2} with L_ii = max(sum_j B_ij, eps).

    ``mask`` may be a Parameter; gradients flow through both the masked
    adjacency and the degree normalization unless ``degree_grad`` is False.
    """
    mask = as_tensor(mask)
    if isinstance(graph_or_adj, FaceGraph):
        adj = graph_or_adj.adjacency()
    else:
        adj = np.asarray(graph_or_adj, dtype=np.float64)
    n = adj.shape[0]
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} nodes")
    a_hat = (adj + np.eye(n)).astype(mask.dtype)
    b = mask * a_hat
    deg = b.sum(axis=1).clamp_min(eps)
    if not degree_grad:
        deg = deg.detach()
    inv_sqrt = deg ** -0.5
    return inv_sqrt.reshape(n, 1) * b * inv_sqrt.reshape(1, n)


# -- template layouts -------------------------------------------------------

REGION_ORDER = ("left_eye", "right_eye", "left_brow", "right_brow", "mouth")


@dataclass
class TemplateConfig:
    """Region sizes and bridge edges for the generated face template.

    Bridges are ``[region_a, index_a, region_b, index_b]`` entries; a negative
    index counts from the end of the region.
    """

    eye_nodes: int = 12
    brow_nodes: int = 6
    mouth_nodes: int = 12
    num_nodes: int = 48
    bridges: list = field(default_factory=lambda: [
        ["left_brow", "mid", "left_eye", "top"],
        ["right_brow", "mid", "right_eye", "top"],
        ["left_eye", "inner", "right_eye", "inner"],
        ["left_eye", "bottom", "mouth", "left"],
        ["right_eye", "bottom", "mouth", "right"],
    ])

    @classmethod
    def full(cls) -> "TemplateConfig":
        return cls(eye_nodes=73, brow_nodes=20, mouth_nodes=60, num_nodes=246)

    @classmethod
    def from_dict(cls, obj: dict) -> "TemplateConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown template config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class FaceTemplate:
    positions: np.ndarray
    regions: dict

    def region_centre(self, name: str) -> np.ndarray:
        return self.positions[self.regions[name]].mean(axis=0)


# face layout in pixel units; y grows downwards
_FACE_CENTRE_X = 128.0
_EYE_CENTRE = (98.0, 110.0)
_EYE_RADII = (15.0, 7.0)
_BROW_Y = 92.0
_BROW_SPAN = (80.0, 116.0)
_MOUTH_CENTRE = (128.0, 168.0)
_MOUTH_RADII = (24.0, 9.0)


def _ring(n: int, centre, radii) -> np.ndarray:
    # starts at the bottom (angle pi/2 with y down) so that node j mirrors node -j
    theta = math.pi / 2 + 2 * math.pi * np.arange(n) / n
    return np.stack([centre[0] + radii[0] * np.cos(theta), centre[1] + radii[1] * np.sin(theta)], 1)


def _mirror(points: np.ndarray) -> np.ndarray:
    out = points.copy()
    out[:, 0] = 2 * _FACE_CENTRE_X - out[:, 0]
    return out


def _named_index(region: str, key, size: int, positions: np.ndarray) -> int:
    if isinstance(key, int):
        return key % size
    pts = positions
    if key == "mid":
        return size // 2
    if key == "top":
        return int(np.argmin(pts[:, 1]))
    if key == "bottom":
        return int(np.argmax(pts[:, 1]))
    if key == "inner":
        # closest to the face midline
        return int(np.argmin(np.abs(pts[:, 0] - _FACE_CENTRE_X)))
    if key == "left":
        return int(np.argmin(pts[:, 0]))
    if key == "right":
        return int(np.argmax(pts[:, 0]))
    raise ValueError(f"unknown node selector {key!r} for region {region}")


def make_template(config: TemplateConfig | None = None) -> tuple[FaceGraph, FaceTemplate]:
    """Build the ring template: graph, node positions and region index ranges."""
    cfg = config or TemplateConfig()
    sizes = {"left_eye": cfg.eye_nodes, "right_eye": cfg.eye_nodes,
             "left_brow": cfg.brow_nodes, "right_brow": cfg.brow_nodes,
             "mouth": cfg.mouth_nodes}
    if sum(sizes.values()) != cfg.num_nodes:
        raise ValueError(f"region sizes sum to {sum(sizes.values())}, expected {cfg.num_nodes}")
    if min(sizes.values()) < 2:
        raise ValueError("every region needs at least two nodes")

    left_eye = _ring(cfg.eye_nodes, _EYE_CENTRE, _EYE_RADII)
    bx = np.linspace(_BROW_SPAN[0], _BROW_SPAN[1], cfg.brow_nodes)
    left_brow = np.stack([bx, _BROW_Y - 5.0 * np.sin(np.linspace(0, math.pi, cfg.brow_nodes))], 1)
    coords = {"left_eye": left_eye, "right_eye": _mirror(left_eye),
              "left_brow": left_brow, "right_brow": _mirror(left_brow),
              "mouth": _ring(cfg.mouth_nodes, _MOUTH_CENTRE, _MOUTH_RADII)}

    regions, chunks, start = {}, [], 0
    for name in REGION_ORDER:
        regions[name] = np.arange(start, start + sizes[name])
        chunks.append(coords[name])
        start += sizes[name]
    positions = np.concatenate(chunks)

    edges = []
    for name in REGION_ORDER:
        idx = regions[name]
        closed = not name.endswith("brow")
        for a in range(len(idx) - (0 if closed else 1)):
            b = (a + 1) % len(idx)
            if len(idx) == 2 and closed and a == 1:
                break
            edges.append((int(idx[a]), int(idx[b])))
    for ra, ka, rb, kb in cfg.bridges:
        ia = regions[ra][_named_index(ra, ka, sizes[ra], coords[ra])]
        ib = regions[rb][_named_index(rb, kb, sizes[rb], coords[rb])]
        key = (min(ia, ib), max(ia, ib))
        if key not in {(min(e), max(e)) for e in edges}:
            edges.append((int(ia), int(ib)))

    flip = np.empty(cfg.num_nodes, dtype=int)
    for left, right in (("left_eye", "right_eye"), ("left_brow", "right_brow")):
        flip[regions[left]] = regions[right]
        flip[regions[right]] = regions[left]
    m = regions["mouth"]
    flip[m] = m[(-np.arange(len(m))) % len(m)]
    graph = FaceGraph(cfg.num_nodes, tuple(edges), tuple(int(v) for v in flip))
    return graph, FaceTemplate(positions, regions)


def build_template_graph(config: TemplateConfig | None = None) -> tuple[FaceGraph, np.ndarray]:
    graph, template = make_template(config)
    return graph, template.positions
