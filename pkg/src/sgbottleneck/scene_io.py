"""Text serialization of scenes (``SGSCENE v1``).

Layout::

    SGSCENE v1
    scene_id <id>
    num_points <P>
    has_rgb <0|1>
    [points]
    x y z [r g b]          # P lines
    [masks]
    instance_id            # P lines
    [boxes]
    instance w l h cx cy cz yaw [family]
    [labels]               # optional
    node <instance> <class>
    edge <i> <j> <p1,p2,...|->
    [end]

Numbers are written with 9 significant digits.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import GroundTruthGraph, OrientedBox, Scene, SceneError

MAGIC = "SGSCENE v1"
SECTIONS = ("points", "masks", "boxes", "labels")


class SceneParseError(SceneError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dumps(scene: Scene) -> str:
    lines = [MAGIC, f"scene_id {scene.scene_id}", f"num_points {len(scene.points)}",
             f"has_rgb {int(scene.rgb is not None)}", "[points]"]
    if scene.rgb is not None:
        for p, c in zip(scene.points, scene.rgb):
            lines.append(" ".join(_fmt(v) for v in (*p, *c)))
    else:
        for p in scene.points:
            lines.append(" ".join(_fmt(v) for v in p))
    lines.append("[masks]")
    lines.extend(str(int(i)) for i in scene.instance_ids)
    lines.append("[boxes]")
    for i in scene.instances:
        b = scene.boxes[i]
        row = [str(i)] + [_fmt(v) for v in b.params()]
        if i in scene.families:
            row.append(scene.families[i])
        lines.append(" ".join(row))
    if scene.labels is not None:
        lines.append("[labels]")
        for i in sorted(scene.labels.node_classes):
            lines.append(f"node {i} {scene.labels.node_classes[i]}")
        for (i, j), preds in sorted(scene.labels.edge_predicates.items()):
            body = ",".join(str(p) for p in sorted(preds)) or "-"
            lines.append(f"edge {i} {j} {body}")
    lines.append("[end]")
    return "\n".join(lines) + "\n"


def save_scene(scene: Scene, path) -> None:
    scene.validate(count_range=None)
    Path(path).write_text(dumps(scene))


def _num(tok: str, lineno: int, field: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise SceneParseError(f"line {lineno}: field {field!r}: cannot parse number {tok!r}") from None


def _int(tok: str, lineno: int, field: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SceneParseError(f"line {lineno}: field {field!r}: cannot parse integer {tok!r}") from None


def loads(text: str, count_range: tuple[int, int] | None = (4, 9), source: str = "<string>") -> Scene:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise SceneParseError(f"{source}: line 1: expected header {MAGIC!r}")
    header: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith("["):
        key, _, value = lines[pos].partition(" ")
        header[key] = value.strip()
        pos += 1
    for key in ("scene_id", "num_points", "has_rgb"):
        if key not in header:
            raise SceneParseError(f"{source}: header is missing field {key!r}")
    n = _int(header["num_points"], 3, "num_points")
    has_rgb = header["has_rgb"] == "1"

    sections: dict[str, tuple[int, list[str]]] = {}
    current = None
    for lineno in range(pos, len(lines)):
        raw = lines[lineno].strip()
        if raw.startswith("[") and raw.endswith("]"):
            current = raw[1:-1]
            if current == "end":
                break
            if current not in SECTIONS:
                raise SceneParseError(f"{source}: line {lineno + 1}: unknown section [{current}]")
            sections[current] = (lineno + 2, [])
            continue
        if current is None:
            raise SceneParseError(f"{source}: line {lineno + 1}: content outside any section")
        if raw:
            sections[current][1].append(raw)
    else:
        raise SceneParseError(f"{source}: missing [end] marker (truncated file?)")
    for name in ("points", "masks", "boxes"):
        if name not in sections:
            raise SceneParseError(f"{source}: missing section [{name}]")

    start, rows = sections["points"]
    if len(rows) != n:
        raise SceneParseError(f"{source}: section [points] has {len(rows)} rows, header says {n}")
    width = 6 if has_rgb else 3
    data = np.empty((n, width))
    for k, row in enumerate(rows):
        toks = row.split()
        if len(toks) != width:
            raise SceneParseError(f"{source}: line {start + k}: expected {width} fields, got {len(toks)}")
        data[k] = [_num(t, start + k, "point") for t in toks]

    start, rows = sections["masks"]
    if len(rows) != n:
        raise SceneParseError(f"{source}: section [masks] has {len(rows)} rows, header says {n}")
    ids = np.array([_int(r, start + k, "instance_id") for k, r in enumerate(rows)], dtype=np.int64)

    start, rows = sections["boxes"]
    boxes, families = {}, {}
    for k, row in enumerate(rows):
        toks = row.split()
        if len(toks) not in (8, 9):
            raise SceneParseError(f"{source}: line {start + k}: box needs 8 or 9 fields, got {len(toks)}")
        inst = _int(toks[0], start + k, "instance")
        params = [_num(t, start + k, "box") for t in toks[1:8]]
        try:
            boxes[inst] = OrientedBox.from_params(params)
        except SceneError as exc:
            raise SceneParseError(f"{source}: line {start + k}: {exc}") from None
        if len(toks) == 9:
            families[inst] = toks[8]

    labels = None
    if "labels" in sections:
        start, rows = sections["labels"]
        nodes, edges = {}, {}
        for k, row in enumerate(rows):
            toks = row.split()
            if toks[0] == "node" and len(toks) == 3:
                nodes[_int(toks[1], start + k, "node")] = _int(toks[2], start + k, "class")
            elif toks[0] == "edge" and len(toks) == 4:
                i, j = _int(toks[1], start + k, "edge"), _int(toks[2], start + k, "edge")
                preds = [] if toks[3] == "-" else [_int(t, start + k, "predicate") for t in toks[3].split(",")]
                edges[(i, j)] = frozenset(preds)
            else:
                raise SceneParseError(f"{source}: line {start + k}: malformed label row {row!r}")
        labels = GroundTruthGraph(nodes, edges)

    scene = Scene(data[:, :3], ids, boxes, header["scene_id"], labels,
                  data[:, 3:] if has_rgb else None, families)
    scene.validate(count_range=count_range)
    return scene


def load_scene(path, count_range: tuple[int, int] | None = (4, 9)) -> Scene:
    return loads(Path(path).read_text(), count_range, source=str(path))


def export_point_list(points: np.ndarray, instance_ids: np.ndarray, path) -> None:
    """Plain ``x y z instance`` rows for external viewers."""
    with open(path, "w") as fh:
        for p, i in zip(points, instance_ids):
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(i)}\n")
