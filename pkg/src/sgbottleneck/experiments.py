"""Corpus assembly and the evaluation runs shared by the CLI and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import FrozenShapeCodec
from .config import DataConfig, ExperimentConfig, ModelConfig
from .generator import GeneratorConfig, generate_scene
from .metrics import (ClassSplit, MetricReport, PreservationReport, build_class_split, class_frequencies,
                      evaluate_predictions, FamilyBank, family_prototypes, nearest_family, preservation_accuracy)
from .preprocess import SceneSample, preprocess_scene
from .scene import PREDICATES, Scene
from .training import SceneModel, predict, reconstruct


def make_codec(m: ModelConfig) -> FrozenShapeCodec:
    return FrozenShapeCodec(m.shape_code_dim, m.codec_seed, m.codec_hidden, m.codec_decode_points)


def generator_config(d: DataConfig) -> GeneratorConfig:
    return GeneratorConfig(min_objects=d.min_objects, max_objects=d.max_objects,
                           num_classes=d.num_classes, predicates=PREDICATES[:d.num_predicates])


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, ratios, seed: int) -> dict[str, list[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_counts(n, ratios)
    return {"train": sorted(perm[:a].tolist()), "val": sorted(perm[a:a + b].tolist()),
            "test": sorted(perm[a + b:].tolist())}


def generate_corpus(d: DataConfig, seed: int, n: int | None = None) -> list[Scene]:
    gcfg = generator_config(d)
    # scene k is a pure function of (seed, k)
    return [generate_scene(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), gcfg,
                           scene_id=f"scene_{k:05d}") for k in range(d.num_scenes if n is None else n)]


def prepare(scenes: list[Scene], m: ModelConfig, codec: FrozenShapeCodec) -> list[SceneSample]:
    return [preprocess_scene(s, m, codec) for s in scenes]


@dataclass
class Splits:
    objects: ClassSplit
    predicates: ClassSplit


def class_splits(train: list[SceneSample], m: ModelConfig) -> Splits:
    obj, pred = class_frequencies(train, m.num_classes, m.num_predicates)
    return Splits(build_class_split(obj), build_class_split(pred))


def evaluate_model(model: SceneModel, samples: list[SceneSample], splits: Splits,
                   scope: str = "pair") -> MetricReport:
    return evaluate_predictions(predict(model, samples), samples, splits.objects, splits.predicates,
                                scope=scope)


def preservation(model: SceneModel, samples: list[SceneSample], scenes: list[Scene],
                 codec: FrozenShapeCodec, bank: FamilyBank | None = None) -> tuple[PreservationReport, list]:
    protos = bank or family_prototypes(codec)
    total = None
    recon = reconstruct(model, samples)
    for (boxes, codes), scene in zip(recon, scenes):
        fams = [nearest_family(c, protos) for c in codes]
        rep = preservation_accuracy(scene, boxes, fams)
        total = rep if total is None else total.merge(rep)
    return total, recon


def acceptance_config(seed: int = 0) -> ExperimentConfig:
    """Desk-profile run on 352 scenes split 256 / 32 / 64."""
    from .config import desk_profile
    cfg = desk_profile(ExperimentConfig(seed=seed))
    cfg.data.num_scenes = 352
    cfg.data.split = (256 / 352, 32 / 352, 64 / 352)
    cfg.train.pretrain_epochs = 30
    cfg.train.finetune_epochs = 20
    cfg.train.reinit_heads = True
    cfg.train.select_best = True
    return cfg.validate()
