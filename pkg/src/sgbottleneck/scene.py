"""Scene records, point-set preprocessing and geometric relation rules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
INSIDE_EPS = 1e-6

PREDICATES = (
    "left", "right", "front", "behind", "bigger", "smaller",
    "higher", "lower", "close_by", "same_as", "standing_on",
)
# pairs (p, q) with p(a, b) <=> q(b, a)
INVERSE_PREDICATES = (("left", "right"), ("front", "behind"),
                      ("bigger", "smaller"), ("higher", "lower"))
SYMMETRIC_PREDICATES = ("close_by", "same_as")


class SceneError(ValueError):
    pass


def quantize(x):
    """Round to 9 significant digits so text serialization is lossless."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(f"{float(arr):.9g}")
    flat = np.array([float(f"{v:.9g}") for v in arr.reshape(-1)])
    return flat.reshape(arr.shape)


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]  # (w, l, h): local x, local y, z
    yaw: float = 0.0

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extents)
        if len(ext) != 3 or min(ext) <= 0 or not all(map(math.isfinite, ext)):
            raise SceneError(f"box extents must be three positive numbers, got {self.extents}")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        yaw = float(self.yaw) % TWO_PI
        if yaw >= TWO_PI:
            yaw = 0.0
        object.__setattr__(self, "yaw", yaw)

    @classmethod
    def from_params(cls, params) -> "OrientedBox":
        w, l, h, cx, cy, cz, yaw = (float(v) for v in params)
        return cls((cx, cy, cz), (w, l, h), yaw)

    def params(self) -> np.ndarray:
        """The 7 raw parameters (w, l, h, c_x, c_y, c_z, yaw)."""
        return np.array([*self.extents, *self.center, self.yaw])

    @property
    def volume(self) -> float:
        w, l, h = self.extents
        return w * l * h

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * (np.array(self.extents) / 2.0)
        return local @ self.rotation().T + np.array(self.center)

    def aabb_half_extents(self) -> np.ndarray:
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        w, l, h = self.extents
        return np.array([(c * w + s * l) / 2.0, (s * w + c * l) / 2.0, h / 2.0])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.array(self.center)) @ self.rotation()

    def contains(self, points: np.ndarray, eps: float = INSIDE_EPS) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= np.array(self.extents) / 2.0 + eps, axis=1)


@dataclass
class GroundTruthGraph:
    node_classes: dict[int, int]
    edge_predicates: dict[tuple[int, int], frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        for (i, j) in self.edge_predicates:
            if i == j:
                raise SceneError(f"self-edge on instance {i}")
        self.edge_predicates = {k: frozenset(v) for k, v in self.edge_predicates.items()}

    def triplets(self) -> list[tuple[int, int, int]]:
        return [(i, p, j) for (i, j), ps in sorted(self.edge_predicates.items()) for p in sorted(ps)]


@dataclass
class Scene:
    points: np.ndarray  # [P, 3]
    instance_ids: np.ndarray  # [P], 0 = unassigned
    boxes: dict[int, OrientedBox]
    scene_id: str = "scene"
    labels: GroundTruthGraph | None = None
    rgb: np.ndarray | None = None
    families: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64).reshape(-1)
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)

    @property
    def instances(self) -> list[int]:
        return sorted(self.boxes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        same_rgb = (self.rgb is None and other.rgb is None) or (
            self.rgb is not None and other.rgb is not None and np.array_equal(self.rgb, other.rgb))
        return (self.scene_id == other.scene_id
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.instance_ids, other.instance_ids)
                and self.boxes == other.boxes
                and self.families == other.families
                and self.labels == other.labels
                and same_rgb)

    def without_labels(self) -> "Scene":
        return Scene(self.points, self.instance_ids, dict(self.boxes), self.scene_id, None,
                     self.rgb, dict(self.families))

    def validate(self, count_range: tuple[int, int] | None = (4, 9), min_points: int = 10) -> None:
        if len(self.points) != len(self.instance_ids):
            raise SceneError("points and instance mask differ in length")
        if self.rgb is not None and len(self.rgb) != len(self.points):
            raise SceneError("rgb and points differ in length")
        if not np.all(np.isfinite(self.points)):
            raise SceneError("non-finite point coordinates")
        present = set(np.unique(self.instance_ids[self.instance_ids != 0]).tolist())
        if present != set(self.boxes):
            raise SceneError(f"instances with points {sorted(present)} do not match boxes {sorted(self.boxes)}")
        if count_range is not None:
            lo, hi = count_range
            if not lo <= len(self.boxes) <= hi:
                raise SceneError(f"scene {self.scene_id} has {len(self.boxes)} instances, "
                                 f"outside the allowed range [{lo}, {hi}]")
        for i, box in self.boxes.items():
            pts = self.points[self.instance_ids == i]
            if len(pts) < min_points:
                raise SceneError(f"instance {i} has {len(pts)} points, fewer than {min_points}")
            if not np.all(box.contains(pts)):
                raise SceneError(f"instance {i} has points outside its box")
        if self.labels is not None:
            if set(self.labels.node_classes) != set(self.boxes):
                raise SceneError("label nodes do not match scene instances")
            for (i, j) in self.labels.edge_predicates:
                if i not in self.boxes or j not in self.boxes:
                    raise SceneError(f"edge ({i}, {j}) references an unknown instance")


@dataclass
class PairPointSet:
    points: np.ndarray
    pair_mask: np.ndarray  # 1: subject, 2: object, 0: context


# ---------------------------------------------------------------------------
# point-set extraction


def extract_instance_points(scene: Scene, i: int) -> np.ndarray:
    if i not in scene.boxes:
        raise KeyError(f"instance {i} not in scene {scene.scene_id}")
    return scene.points[scene.instance_ids == i]


def union_box(a: OrientedBox, b: OrientedBox) -> OrientedBox:
    """Smallest axis-aligned box containing the corners of both boxes."""
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    return OrientedBox(tuple((lo + hi) / 2.0), tuple(hi - lo), 0.0)


def extract_pair_points(scene: Scene, i: int, j: int) -> PairPointSet:
    if i == j:
        raise SceneError("pair extraction needs two distinct instances")
    for k in (i, j):
        if k not in scene.boxes:
            raise KeyError(f"instance {k} not in scene {scene.scene_id}")
    region = union_box(scene.boxes[i], scene.boxes[j])
    lo = np.array(region.center) - np.array(region.extents) / 2.0 - INSIDE_EPS
    hi = np.array(region.center) + np.array(region.extents) / 2.0 + INSIDE_EPS
    inside = np.all((scene.points >= lo) & (scene.points <= hi), axis=1)
    ids = scene.instance_ids[inside]
    mask = np.where(ids == i, 1, np.where(ids == j, 2, 0))
    return PairPointSet(scene.points[inside], mask.astype(np.int64))


def normalize_centers(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise SceneError("cannot center an empty point set")
    return points - points.mean(axis=0)


def farthest_point_indices(points: np.ndarray, n: int, seed: int | None = None) -> np.ndarray:
    """Indices chosen by farthest-point sampling.

    Without a seed the first pick is the point nearest the centroid (lowest
    index on ties); with a seed it is drawn from ``default_rng(seed)``.
    """
    if n < 1:
        raise ValueError("target count must be at least 1")
    points = np.asarray(points, dtype=np.float64)
    p = len(points)
    if p <= n:
        return np.arange(p)
    if seed is None:
        first = int(np.argmin(((points - points.mean(axis=0)) ** 2).sum(axis=1)))
    else:
        first = int(np.random.default_rng(seed).integers(p))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    dist = ((points - points[first]) ** 2).sum(axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


def farthest_point_sample(points: np.ndarray, n: int, seed: int | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points[farthest_point_indices(points, n, seed)]


# ---------------------------------------------------------------------------
# relation rules


@dataclass(frozen=True)
class RuleConfig:
    axis_factor: float = 1.0  # separation of centers in units of mean half-extent
    height_factor: float = 1.0
    volume_ratio: float = 1.2
    close_factor: float = 1.5  # of the mean box diagonal
    same_tolerance: float = 0.1
    support_gap: float = 0.05
    support_overlap: float = 0.5


def _footprint_overlap(a: OrientedBox, b: OrientedBox) -> float:
    """Fraction of a's axis-aligned footprint covered by b's."""
    ha, hb = a.aabb_half_extents(), b.aabb_half_extents()
    ca, cb = np.array(a.center), np.array(b.center)
    ov = 1.0
    for ax in (0, 1):
        lo = max(ca[ax] - ha[ax], cb[ax] - hb[ax])
        hi = min(ca[ax] + ha[ax], cb[ax] + hb[ax])
        ov *= max(0.0, hi - lo)
    return ov / (4.0 * ha[0] * ha[1])


def relation_rules(a: OrientedBox, b: OrientedBox, family_a: str | None = None,
                   family_b: str | None = None, config: RuleConfig = RuleConfig()) -> set[str]:
    """Predicates that hold for subject ``a`` and object ``b``.

    Shape families only matter for ``same_as``; when either is missing the
    family check is skipped.
    """
    out: set[str] = set()
    ha, hb = a.aabb_half_extents(), b.aabb_half_extents()
    ca, cb = np.array(a.center), np.array(b.center)
    d = cb - ca
    sep = config.axis_factor * (ha + hb) / 2.0
    if d[0] > sep[0]:
        out.add("left")
    if -d[0] > sep[0]:
        out.add("right")
    if d[1] > sep[1]:
        out.add("front")
    if -d[1] > sep[1]:
        out.add("behind")
    zsep = config.height_factor * (ha[2] + hb[2]) / 2.0
    if -d[2] > zsep:
        out.add("higher")
    if d[2] > zsep:
        out.add("lower")
    va, vb = a.volume, b.volume
    if va > config.volume_ratio * vb:
        out.add("bigger")
    if vb > config.volume_ratio * va:
        out.add("smaller")
    if float(np.linalg.norm(d)) < config.close_factor * (a.diagonal + b.diagonal) / 2.0:
        out.add("close_by")
    ratios = [max(x, y) / min(x, y) for x, y in zip(a.extents, b.extents)]
    if max(ratios) <= 1.0 + config.same_tolerance and (
            family_a is None or family_b is None or family_a == family_b):
        out.add("same_as")
    bottom_a = ca[2] - ha[2]
    top_b = cb[2] + hb[2]
    if abs(bottom_a - top_b) < config.support_gap and _footprint_overlap(a, b) >= config.support_overlap:
        out.add("standing_on")
    return out
