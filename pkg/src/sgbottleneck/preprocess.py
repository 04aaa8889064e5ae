"""Turn scenes into network-ready samples and collate them into batches."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import FrozenShapeCodec, canonicalize
from .config import ModelConfig
from .scene import (TWO_PI, Scene, extract_instance_points, extract_pair_points,
                    farthest_point_indices, normalize_centers)


def angle_bin(yaw: float, bins: int = 24) -> int:
    """Bin k covers [k, k+1) * 2pi / bins."""
    return int(math.floor((yaw % TWO_PI) / (TWO_PI / bins))) % bins


def bin_center(k: int, bins: int = 24) -> float:
    return (k + 0.5) * TWO_PI / bins


@dataclass
class SceneSample:
    scene_id: str
    instances: list[int]
    obj_points: list[np.ndarray]  # centered, each [k_i, 3]
    pair_points: list[np.ndarray]  # centered xyz + mask, each [m, 4]
    boxes: np.ndarray  # [n, 7]
    edges: np.ndarray  # [E, 2] local node indices
    box_targets: np.ndarray  # [n, 6] extents then center
    angle_bins: np.ndarray  # [n]
    shape_codes: np.ndarray  # [n, code_dim]
    node_classes: np.ndarray | None = None
    edge_targets: np.ndarray | None = None  # [E, C_pred] multi-hot

    @property
    def has_labels(self) -> bool:
        return self.node_classes is not None

    def without_labels(self) -> "SceneSample":
        return SceneSample(self.scene_id, self.instances, self.obj_points, self.pair_points,
                           self.boxes, self.edges, self.box_targets, self.angle_bins,
                           self.shape_codes)


def all_ordered_pairs(n: int) -> np.ndarray:
    return np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)


def preprocess_scene(scene: Scene, cfg: ModelConfig, codec: FrozenShapeCodec,
                     with_labels: bool = True) -> SceneSample:
    inst = scene.instances
    n = len(inst)
    obj_points, codes = [], []
    for i in inst:
        pts = extract_instance_points(scene, i)
        canon = canonicalize(pts[farthest_point_indices(pts, cfg.codec_points)], scene.boxes[i])
        codes.append(codec.encode(canon))
        sel = pts[farthest_point_indices(pts, cfg.points_per_object)]
        obj_points.append(normalize_centers(sel))
    edges = all_ordered_pairs(n)
    pair_points = []
    for a, b in edges:
        pair = extract_pair_points(scene, inst[a], inst[b])
        idx = farthest_point_indices(pair.points, cfg.points_per_pair)
        xyz = normalize_centers(pair.points[idx])
        pair_points.append(np.column_stack([xyz, pair.pair_mask[idx]]))
    boxes = np.stack([scene.boxes[i].params() for i in inst])
    sample = SceneSample(
        scene.scene_id, inst, obj_points, pair_points, boxes, edges,
        box_targets=boxes[:, :6].copy(),
        angle_bins=np.array([angle_bin(b[6], cfg.angle_bins) for b in boxes], dtype=np.int64),
        shape_codes=np.stack(codes),
    )
    if with_labels and scene.labels is not None:
        g = scene.labels
        sample.node_classes = np.array([g.node_classes[i] for i in inst], dtype=np.int64)
        if sample.node_classes.max() >= cfg.num_classes:
            raise ValueError(f"scene {scene.scene_id}: class index exceeds vocabulary")
        tgt = np.zeros((len(edges), cfg.num_predicates))
        for e, (a, b) in enumerate(edges):
            for p in g.edge_predicates.get((inst[a], inst[b]), ()):
                if p >= cfg.num_predicates:
                    raise ValueError(f"scene {scene.scene_id}: predicate index exceeds vocabulary")
                tgt[e, p] = 1.0
        sample.edge_targets = tgt
    return sample


def _pad_sets(sets: list[np.ndarray], width: int) -> np.ndarray:
    """Stack variable-size point sets by cyclic repetition; max pooling ignores duplicates."""
    if not sets:
        return np.zeros((0, 1, width))
    size = max(len(s) for s in sets)
    out = np.empty((len(sets), size, sets[0].shape[1]))
    for k, s in enumerate(sets):
        out[k] = s[np.arange(size) % len(s)]
    return out


@dataclass
class Batch:
    obj_points: np.ndarray  # [N, P, 3]
    pair_points: np.ndarray  # [E, M, 4]
    boxes: np.ndarray  # [N, 7]
    edges: np.ndarray  # [E, 2] global node indices
    node_offsets: np.ndarray  # [S + 1]
    edge_offsets: np.ndarray  # [S + 1]
    box_targets: np.ndarray
    angle_bins: np.ndarray
    shape_codes: np.ndarray
    scene_ids: list[str]
    node_classes: np.ndarray | None = None
    edge_targets: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.boxes)


def collate(samples: list[SceneSample]) -> Batch:
    node_off = np.cumsum([0] + [len(s.instances) for s in samples])
    edge_off = np.cumsum([0] + [len(s.edges) for s in samples])
    edges = np.concatenate([s.edges + node_off[k] for k, s in enumerate(samples)])
    labeled = all(s.has_labels for s in samples)
    return Batch(
        obj_points=_pad_sets([p for s in samples for p in s.obj_points], 3),
        pair_points=_pad_sets([p for s in samples for p in s.pair_points], 4),
        boxes=np.concatenate([s.boxes for s in samples]),
        edges=edges.reshape(-1, 2),
        node_offsets=node_off,
        edge_offsets=edge_off,
        box_targets=np.concatenate([s.box_targets for s in samples]),
        angle_bins=np.concatenate([s.angle_bins for s in samples]),
        shape_codes=np.concatenate([s.shape_codes for s in samples]),
        scene_ids=[s.scene_id for s in samples],
        node_classes=np.concatenate([s.node_classes for s in samples]) if labeled else None,
        edge_targets=np.concatenate([s.edge_targets for s in samples]) if labeled else None,
    )
