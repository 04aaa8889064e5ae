import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgbottleneck.codec import FrozenShapeCodec  # noqa: E402
from sgbottleneck.config import ModelConfig  # noqa: E402
from sgbottleneck.generator import GeneratorConfig, generate_scene  # noqa: E402
from sgbottleneck.preprocess import preprocess_scene  # noqa: E402


def small_model_config(**kw) -> ModelConfig:
    base = dict(feature_dim=16, point_hidden=(8, 16), box_embed_dim=8, shape_code_dim=12,
                codec_hidden=(8, 16), points_per_object=24, points_per_pair=32, codec_points=64,
                codec_decode_points=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_cfg():
    return small_model_config()


@pytest.fixture(scope="session")
def small_codec(small_cfg):
    m = small_cfg
    return FrozenShapeCodec(m.shape_code_dim, m.codec_seed, m.codec_hidden, m.codec_decode_points)


@pytest.fixture(scope="session")
def small_scenes():
    cfg = GeneratorConfig(min_objects=4, max_objects=6)
    return [generate_scene(int(s), cfg, scene_id=f"s{s}") for s in range(10)]


@pytest.fixture(scope="session")
def small_samples(small_scenes, small_cfg, small_codec):
    return [preprocess_scene(s, small_cfg, small_codec) for s in small_scenes]


def permute_scene(scene, perm_ids):
    """Relabel instance ids with the mapping ``old -> perm_ids[old]``."""
    from sgbottleneck.scene import GroundTruthGraph, Scene
    ids = np.array([perm_ids.get(int(i), 0) for i in scene.instance_ids])
    boxes = {perm_ids[i]: b for i, b in scene.boxes.items()}
    fams = {perm_ids[i]: f for i, f in scene.families.items()}
    labels = None
    if scene.labels is not None:
        labels = GroundTruthGraph({perm_ids[i]: c for i, c in scene.labels.node_classes.items()},
                                  {(perm_ids[i], perm_ids[j]): p for (i, j), p in scene.labels.edge_predicates.items()})
    return Scene(scene.points, ids, boxes, scene.scene_id, labels, scene.rgb, fams)


# -- acceptance summary ------------------------------------------------------
# Tests named test_criterion_<n>_... report one line each at the end of the run.

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.outcome != "passed":
        outcome = "PASS" if report.passed else "FAIL"
        if number not in _criteria or _criteria[number][0] == "PASS":
            _criteria[number] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcome, detail = _criteria[number]
        line = f"criterion {number}: {outcome}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
