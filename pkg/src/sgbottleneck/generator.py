"""Synthetic indoor scenes with geometric relation labels.

Objects are parametric primitives (cuboids, cylinders and composite
chair/table shapes) placed on a floor, optionally stacked on a supporting
object. Edge predicates come from :func:`relation_rules` on the placed boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import (PREDICATES, TWO_PI, GroundTruthGraph, OrientedBox, RuleConfig, Scene,
                    SceneError, quantize, relation_rules)

FAMILIES = ("cuboid", "cylinder", "table", "chair")


class GenerationError(SceneError):
    pass


@dataclass(frozen=True)
class ObjectClass:
    name: str
    family: str
    width: tuple[float, float]
    length: tuple[float, float]
    height: tuple[float, float]
    placement: str = "floor"  # floor | top | either
    supports: bool = False
    weight: float = 1.0


# Several size groups mix shape families (nightstand / trash_can / stool,
# chair / cabinet, sofa / table) so that box extents alone do not identify
# the class and the point geometry has to be used.
OBJECT_CLASSES = (
    ObjectClass("chair", "chair", (0.45, 0.6), (0.45, 0.6), (0.8, 1.0), weight=10.0),
    ObjectClass("table", "table", (1.0, 1.6), (0.7, 1.0), (0.7, 0.85), supports=True, weight=7.0),
    ObjectClass("cabinet", "cuboid", (0.45, 0.7), (0.4, 0.6), (0.8, 1.1), supports=True, weight=6.0),
    ObjectClass("box", "cuboid", (0.2, 0.4), (0.2, 0.4), (0.2, 0.4), placement="either", weight=6.0),
    ObjectClass("lamp", "cylinder", (0.15, 0.25), (0.15, 0.25), (0.35, 0.6), placement="top", weight=4.0),
    ObjectClass("bed", "cuboid", (1.4, 1.8), (1.9, 2.2), (0.4, 0.6), weight=3.0),
    ObjectClass("sofa", "chair", (1.2, 1.8), (0.7, 0.95), (0.7, 0.85), weight=3.0),
    ObjectClass("nightstand", "cuboid", (0.35, 0.5), (0.35, 0.5), (0.4, 0.6), supports=True, weight=2.5),
    ObjectClass("trash_can", "cylinder", (0.35, 0.5), (0.35, 0.5), (0.4, 0.6), weight=2.0),
    ObjectClass("coffee_table", "table", (0.8, 1.2), (0.5, 0.7), (0.35, 0.45), supports=True, weight=1.5),
    ObjectClass("pillar", "cylinder", (0.3, 0.5), (0.3, 0.5), (2.0, 2.6), weight=1.0),
    ObjectClass("stool", "table", (0.35, 0.5), (0.35, 0.5), (0.4, 0.6), weight=1.0),
)


@dataclass(frozen=True)
class GeneratorConfig:
    min_objects: int = 4
    max_objects: int = 9
    num_classes: int = 12
    predicates: tuple[str, ...] = PREDICATES
    room_half_size: float = 3.5
    point_density: float = 150.0  # surface points per square meter
    min_object_points: int = 40
    max_object_points: int = 600
    floor_points: int = 150
    stack_probability: float = 0.6
    duplicate_probability: float = 0.3
    max_retries: int = 200
    rules: RuleConfig = field(default_factory=RuleConfig)

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid object-count range")
        if not 1 <= self.num_classes <= len(OBJECT_CLASSES):
            raise ValueError(f"num_classes must lie in [1, {len(OBJECT_CLASSES)}]")
        unknown = set(self.predicates) - set(PREDICATES)
        if unknown:
            raise ValueError(f"unknown predicates {sorted(unknown)}")

    @property
    def classes(self) -> tuple[ObjectClass, ...]:
        return OBJECT_CLASSES[: self.num_classes]


# ---------------------------------------------------------------------------
# canonical shapes, as lists of parts inside the unit cube [-0.5, 0.5]^3


def _cuboid_parts():
    return [("box", (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))]


def _table_parts():
    leg = 0.1
    parts = [("box", (-0.5, -0.5, 0.4), (0.5, 0.5, 0.5))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            x0 = 0.5 - leg if sx > 0 else -0.5
            y0 = 0.5 - leg if sy > 0 else -0.5
            parts.append(("box", (x0, y0, -0.5), (x0 + leg, y0 + leg, 0.4)))
    return parts


def _chair_parts():
    leg = 0.1
    parts = [("box", (-0.5, -0.5, -0.05), (0.5, 0.5, 0.05)),
             ("box", (-0.5, 0.38, 0.05), (0.5, 0.5, 0.5))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            x0 = 0.5 - leg if sx > 0 else -0.5
            y0 = 0.5 - leg if sy > 0 else -0.5
            parts.append(("box", (x0, y0, -0.5), (x0 + leg, y0 + leg, -0.05)))
    return parts


SHAPE_PARTS = {
    "cuboid": _cuboid_parts(),
    "cylinder": [("cylinder", (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))],
    "table": _table_parts(),
    "chair": _chair_parts(),
}


def _box_faces(lo, hi):
    lo, hi = np.asarray(lo), np.asarray(hi)
    faces = []
    for ax in range(3):
        others = [a for a in range(3) if a != ax]
        area = (hi[others[0]] - lo[others[0]]) * (hi[others[1]] - lo[others[1]])
        for side in (lo[ax], hi[ax]):
            faces.append((ax, side, others, area))
    return faces


def sample_surface(family: str, extents, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the surface of a family shape scaled to ``extents`` (local frame)."""
    ext = np.asarray(extents, dtype=np.float64)
    pieces = []  # (area, sampler)
    for kind, lo, hi in SHAPE_PARTS[family]:
        lo_m, hi_m = np.asarray(lo) * ext, np.asarray(hi) * ext
        if kind == "box":
            for ax, side, others, area in _box_faces(lo_m, hi_m):
                pieces.append((area, ("face", ax, side, others, lo_m, hi_m)))
        else:
            rx, ry = (hi_m[0] - lo_m[0]) / 2, (hi_m[1] - lo_m[1]) / 2
            h = hi_m[2] - lo_m[2]
            perim = math.pi * (3 * (rx + ry) - math.sqrt((3 * rx + ry) * (rx + 3 * ry)))
            pieces.append((perim * h, ("side", rx, ry, lo_m, hi_m)))
            for z in (lo_m[2], hi_m[2]):
                pieces.append((math.pi * rx * ry, ("cap", rx, ry, z)))
    areas = np.array([a for a, _ in pieces])
    which = rng.choice(len(pieces), size=n, p=areas / areas.sum())
    out = np.empty((n, 3))
    for k, (_, spec) in enumerate(pieces):
        sel = np.flatnonzero(which == k)
        m = len(sel)
        if m == 0:
            continue
        if spec[0] == "face":
            _, ax, side, others, lo_m, hi_m = spec
            pts = np.empty((m, 3))
            pts[:, ax] = side
            for o in others:
                pts[:, o] = rng.uniform(lo_m[o], hi_m[o], m)
        elif spec[0] == "side":
            _, rx, ry, lo_m, hi_m = spec
            t = rng.uniform(0, TWO_PI, m)
            pts = np.column_stack([rx * np.cos(t), ry * np.sin(t), rng.uniform(lo_m[2], hi_m[2], m)])
        else:
            _, rx, ry, z = spec
            r = np.sqrt(rng.uniform(0, 1, m))
            t = rng.uniform(0, TWO_PI, m)
            pts = np.column_stack([rx * r * np.cos(t), ry * r * np.sin(t), np.full(m, z)])
        out[sel] = pts
    return out


def surface_area(family: str, extents) -> float:
    ext = np.asarray(extents, dtype=np.float64)
    total = 0.0
    for kind, lo, hi in SHAPE_PARTS[family]:
        lo_m, hi_m = np.asarray(lo) * ext, np.asarray(hi) * ext
        if kind == "box":
            total += sum(f[3] for f in _box_faces(lo_m, hi_m))
        else:
            rx, ry = (hi_m[0] - lo_m[0]) / 2, (hi_m[1] - lo_m[1]) / 2
            h = hi_m[2] - lo_m[2]
            perim = math.pi * (3 * (rx + ry) - math.sqrt((3 * rx + ry) * (rx + 3 * ry)))
            total += perim * h + 2 * math.pi * rx * ry
    return total


# ---------------------------------------------------------------------------
# placement


@dataclass
class PlacedObject:
    instance: int
    cls: int
    family: str
    box: OrientedBox
    support: int | None = None
    point_count: int = 0


def _footprints_overlap(a: OrientedBox, b: OrientedBox, margin: float) -> bool:
    ha, hb = a.aabb_half_extents(), b.aabb_half_extents()
    for ax in (0, 1):
        if abs(a.center[ax] - b.center[ax]) >= ha[ax] + hb[ax] + margin:
            return False
    return True


def _q_yaw(yaw: float) -> float:
    y = quantize(yaw % TWO_PI)
    return 0.0 if y >= TWO_PI else y


def _make_box(center, extents, yaw) -> OrientedBox:
    return OrientedBox(tuple(quantize(np.asarray(center))), tuple(quantize(np.asarray(extents))),
                       _q_yaw(yaw))


def _sample_extents(oc: ObjectClass, rng) -> np.ndarray:
    return np.array([rng.uniform(*oc.width), rng.uniform(*oc.length), rng.uniform(*oc.height)])


def _try_floor(oc_ext, placed, cfg, rng) -> OrientedBox | None:
    ext = oc_ext
    for _ in range(cfg.max_retries):
        yaw = rng.uniform(0, TWO_PI)
        probe = OrientedBox((0.0, 0.0, ext[2] / 2), tuple(ext), yaw)
        half = probe.aabb_half_extents()
        lim = cfg.room_half_size - half[:2]
        if np.any(lim <= 0):
            return None
        cx, cy = rng.uniform(-lim[0], lim[0]), rng.uniform(-lim[1], lim[1])
        box = _make_box((cx, cy, ext[2] / 2), ext, yaw)
        if all(p.support is not None or not _footprints_overlap(box, p.box, 0.05) for p in placed):
            return box
    return None


def _try_top(ext, supporter: PlacedObject, placed, cfg, rng) -> OrientedBox | None:
    s = supporter.box
    top = s.center[2] + s.extents[2] / 2
    for _ in range(cfg.max_retries // 4):
        yaw = rng.uniform(0, TWO_PI)
        r = 0.5 * math.hypot(ext[0], ext[1])
        room = np.array(s.extents[:2]) / 2 - r
        if np.any(room <= 0):
            return None
        off_local = np.array([rng.uniform(-room[0], room[0]), rng.uniform(-room[1], room[1]), 0.0])
        center = np.array(s.center) + s.rotation() @ off_local
        center[2] = top + ext[2] / 2
        box = _make_box(center, ext, yaw)
        # bottom must sit on the supporter's top after rounding
        clash = any(p.support == supporter.instance and _footprints_overlap(box, p.box, 0.02)
                    for p in placed)
        if not clash:
            return box
    return None


def generate_scene(seed: int, config: GeneratorConfig = GeneratorConfig(),
                   scene_id: str | None = None, return_record: bool = False):
    """Deterministic synthetic scene for ``seed``.

    With ``return_record`` the placement record (classes, supports, point
    counts) is returned alongside the scene.
    """
    rng = np.random.default_rng(seed)
    classes = config.classes
    weights = np.array([c.weight for c in classes])
    weights = weights / weights.sum()
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    placed: list[PlacedObject] = []
    attempts = 0
    while len(placed) < n_obj:
        attempts += 1
        if attempts > config.max_retries:
            raise GenerationError(f"could not place {n_obj} objects for seed {seed}")
        floor_objs = [p for p in placed if p.support is None]
        if floor_objs and rng.uniform() < config.duplicate_probability:
            src = floor_objs[int(rng.integers(len(floor_objs)))]
            ci, ext = src.cls, np.array(src.box.extents)
        else:
            ci = int(rng.choice(len(classes), p=weights))
            ext = _sample_extents(classes[ci], rng)
        oc = classes[ci]
        supporters = [p for p in placed if classes[p.cls].supports and p.support is None]
        box, support = None, None
        want_top = oc.placement == "top" or (oc.placement == "either" and rng.uniform() < config.stack_probability)
        if want_top and supporters:
            sup = supporters[int(rng.integers(len(supporters)))]
            box = _try_top(ext, sup, placed, config, rng)
            support = sup.instance if box is not None else None
        if box is None and oc.placement != "top":
            box = _try_floor(ext, placed, config, rng)
        if box is None:
            continue
        placed.append(PlacedObject(len(placed) + 1, ci, oc.family, box, support))

    all_pts, all_ids, all_rgb = [], [], []
    for obj in placed:
        ext = np.array(obj.box.extents)
        area = surface_area(obj.family, ext)
        n = int(np.clip(round(area * config.point_density),
                        config.min_object_points, config.max_object_points))
        local = sample_surface(obj.family, ext, n, rng)
        world = local @ obj.box.rotation().T + np.array(obj.box.center)
        obj.point_count = n
        all_pts.append(world)
        all_ids.append(np.full(n, obj.instance))
        base = np.array([(obj.cls * 0.37) % 1.0, (obj.cls * 0.61) % 1.0, (obj.cls * 0.83) % 1.0])
        all_rgb.append(np.clip(base + rng.normal(0, 0.03, size=(n, 3)), 0, 1))
    if config.floor_points:
        m = config.floor_points
        h = config.room_half_size
        all_pts.append(np.column_stack([rng.uniform(-h, h, m), rng.uniform(-h, h, m), np.zeros(m)]))
        all_ids.append(np.zeros(m, dtype=np.int64))
        all_rgb.append(np.clip(0.5 + rng.normal(0, 0.03, size=(m, 3)), 0, 1))
    points = quantize(np.vstack(all_pts))
    rgb = quantize(np.vstack(all_rgb))
    ids = np.concatenate(all_ids)

    boxes = {o.instance: o.box for o in placed}
    families = {o.instance: o.family for o in placed}
    # rounding can push surface points a hair outside; clamp into the box
    for o in placed:
        sel = ids == o.instance
        local = o.box.to_local(points[sel])
        half = np.array(o.box.extents) / 2
        if np.any(np.abs(local) > half + 1e-7):
            local = np.clip(local, -half, half)
            points[sel] = quantize(local @ o.box.rotation().T + np.array(o.box.center))

    pred_index = {p: k for k, p in enumerate(config.predicates)}
    edges = {}
    for a in placed:
        for b in placed:
            if a.instance == b.instance:
                continue
            rel = relation_rules(a.box, b.box, a.family, b.family, config.rules)
            edges[(a.instance, b.instance)] = frozenset(pred_index[r] for r in rel if r in pred_index)
    labels = GroundTruthGraph({o.instance: o.cls for o in placed}, edges)
    scene = Scene(points, ids, boxes, scene_id or f"synthetic_{seed:06d}", labels, rgb, families)
    if return_record:
        return scene, placed
    return scene


def predicate_names(config: GeneratorConfig = GeneratorConfig()) -> tuple[str, ...]:
    return tuple(config.predicates)


def class_names(config: GeneratorConfig = GeneratorConfig()) -> tuple[str, ...]:
    return tuple(c.name for c in config.classes)
