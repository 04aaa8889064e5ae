"""Acceptance suite: one test per criterion.

The training criteria share one corpus and one pre-training run per seed,
built lazily by session fixtures. Every test records its measured numbers
as a ``detail`` property that the terminal summary prints.
"""
import json
import time

import numpy as np
import pytest

import gradcheck_cases as gc
import test_metrics
import test_scene
from sgbottleneck import autograd as ag
from sgbottleneck.autograd import Tensor
from sgbottleneck.checkpoint import dumps_state, loads_state
from sgbottleneck.cli import main
from sgbottleneck.decoder import SceneDecoder
from sgbottleneck.encoder import PointNet, SceneGraphEncoder, pointnet_object
from sgbottleneck.experiments import (acceptance_config, class_splits, evaluate_model, generate_corpus,
                                      make_codec, prepare, preservation, split_indices)
from sgbottleneck.generator import GeneratorConfig, generate_scene
from sgbottleneck.metrics import family_bank
from sgbottleneck.preprocess import collate, preprocess_scene
from sgbottleneck.training import evaluate_loss, finetune, new_state, pretrain, to_finetune

from conftest import permute_scene, small_model_config

SEEDS = (0, 1, 2)
FRACTIONS = (0.05, 0.1, 0.3, 1.0)


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# -- shared experiment state -------------------------------------------------


class Corpus:
    def __init__(self):
        t = time.perf_counter()
        self.cfg = acceptance_config(0)
        scenes = generate_corpus(self.cfg.data, 0)
        idx = split_indices(len(scenes), self.cfg.data.split, 0)
        self.codec = make_codec(self.cfg.model)
        self.scenes = {k: [scenes[i] for i in v] for k, v in idx.items()}
        self.samples = {k: prepare(v, self.cfg.model, self.codec) for k, v in self.scenes.items()}
        self.splits = class_splits(self.samples["train"], self.cfg.model)
        self.bank = family_bank(self.samples["train"], self.scenes["train"])
        self.seconds = time.perf_counter() - t


class Runs:
    """Pre-training and fine-tuning results per seed, computed on first use."""

    def __init__(self, corpus):
        self.c = corpus
        self._pre = {}
        self._ft = {}
        self.seconds = {}

    def _clock(self, key, t):
        self.seconds[key] = self.seconds.get(key, 0.0) + time.perf_counter() - t

    def pretrained(self, seed):
        if seed not in self._pre:
            t = time.perf_counter()
            c, cfg = self.c, acceptance_config(seed)
            state = new_state(cfg.model, cfg.ablation, seed, cfg.train)
            curves = pretrain(c.samples["train"], c.samples["val"], state, cfg.train.pretrain_epochs,
                              cfg.train.batch_size, cfg.loss)
            self._pre[seed] = (dumps_state(state), curves)
            self._clock(("pretrain", seed), t)
        return self._pre[seed]

    def finetuned(self, seed, fraction, pretrained):
        key = (seed, fraction, pretrained)
        if key not in self._ft:
            c, cfg = self.c, acceptance_config(seed)
            if pretrained:
                data, _ = self.pretrained(seed)
                state, _ = to_finetune(loads_state(data), cfg.train, cfg.train.reinit_heads)
            else:
                state = new_state(cfg.model, cfg.ablation, seed, cfg.train, mode="finetune")
            t = time.perf_counter()
            finetune(c.samples["train"], state, cfg.train.finetune_epochs, fraction, seed, c.samples["val"],
                     cfg.train.batch_size, cfg.loss, keep_best=cfg.train.select_best)
            rep = evaluate_model(state.model, c.samples["test"], c.splits)
            self._ft[key] = (rep.mean_recall[("object", 3, "all")], rep.mean_recall[("predicate", 2, "all")])
            self._clock(("finetune", seed, fraction, pretrained), t)
        return self._ft[key]


@pytest.fixture(scope="session")
def corpus():
    return Corpus()


@pytest.fixture(scope="session")
def runs(corpus):
    return Runs(corpus)


# -- criteria ----------------------------------------------------------------


def test_criterion_1_gradient_suite(record_property):
    t = time.perf_counter()
    worst = {}
    for name in sorted(gc.CASES):
        worst[name] = max(gc.check_case(name, seed) for seed in range(20))
    for name in ("linear_layer", "mlp_batchnorm", "pointnet", "triplet_gcn", "encoder"):
        worst[name] = max(gc.check_module(gc.MODULES[name], seed) for seed in range(20))
    seconds = time.perf_counter() - t
    top = max(worst, key=worst.get)
    detail(record_property, f"{len(worst)} checks x 20 seeds, worst {top} {worst[top]:.2e}, {seconds:.1f}s")
    assert worst[top] < 1e-4
    assert seconds < 60


def test_criterion_2_structural_invariants(record_property, small_scenes, small_cfg, small_codec):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_softmax = 0.0
    for _ in range(200):
        x = rng.normal(scale=rng.uniform(0.1, 50), size=(int(rng.integers(1, 9)), int(rng.integers(1, 13))))
        s = ag.softmax_rows(Tensor(x)).data
        worst_softmax = max(worst_softmax, np.abs(s.sum(axis=1) - 1).max())
        sig = ag.sigmoid(Tensor(rng.normal(scale=20, size=50))).data
        assert np.all((sig >= 0) & (sig <= 1))
    assert worst_softmax <= 1e-9

    net = PointNet([3, 16, 32, 64], rng)
    for _ in range(50):
        pts = rng.normal(size=(int(rng.integers(2, 80)), 3))
        ref = pointnet_object(net, pts).data
        assert np.array_equal(pointnet_object(net, pts[rng.permutation(len(pts))]).data, ref)
        dup = np.vstack([pts, pts[rng.integers(len(pts), size=int(rng.integers(1, 30)))]])
        assert np.array_equal(pointnet_object(net, dup[rng.permutation(len(dup))]).data, ref)

    enc = SceneGraphEncoder(small_cfg, np.random.default_rng(1))
    worst_equiv = 0.0
    for scene in small_scenes:
        assert len(scene.boxes) <= 6
        inst = scene.instances
        new = rng.permutation(len(inst))
        ps = permute_scene(scene, {old: int(new[k]) + 1 for k, old in enumerate(inst)})
        a = enc(collate([preprocess_scene(scene, small_cfg, small_codec)]))
        b = enc(collate([preprocess_scene(ps, small_cfg, small_codec)]))
        pos = {(int(i), int(j)): e for e, (i, j) in enumerate(b.edges)}
        idx = [pos[(int(new[i]), int(new[j]))] for i, j in a.edges]
        worst_equiv = max(worst_equiv, np.abs(b.node_distributions.data[new] - a.node_distributions.data).max(),
                          np.abs(b.edge_probabilities.data[idx] - a.edge_probabilities.data).max())
    seconds = time.perf_counter() - t
    detail(record_property, f"softmax {worst_softmax:.1e}, relabel {worst_equiv:.1e}, {seconds:.1f}s")
    assert worst_equiv <= 1e-9
    assert seconds < 60


def test_criterion_3_metric_oracles(record_property):
    t = time.perf_counter()
    # 120 fixtures for the pair-scoped metrics, 40 for scene scope, plus class-wise means
    test_metrics.test_recalls_match_exhaustive_oracle()
    test_metrics.test_scene_scope_matches_oracle()
    test_metrics.test_per_class_recall_matches_hand_means()
    test_metrics.test_mean_recall_examples()
    test_metrics.test_class_split_partitions_random_tables()
    seconds = time.perf_counter() - t
    detail(record_property, f"160 recall fixtures, {seconds:.1f}s")
    assert seconds < 60


def test_criterion_4_rule_oracles(record_property):
    test_scene.test_rules_antisymmetry_and_symmetry_over_1000_pairs()
    scenes = [generate_scene(s) for s in range(40)]
    test_scene.test_generator_labels_replay_through_rules(scenes)
    detail(record_property, "1000 box pairs, 40 scenes replayed")


def test_criterion_5_pretext_learnability(record_property, corpus, runs):
    cfg = corpus.cfg
    ratios, gains = [], []
    for seed in SEEDS:
        data, curves = runs.pretrained(seed)
        val = [v for e, split, key, v in curves if split == "val" and key == "total"]
        ratios.append(val[-1] / val[0])
        trained = loads_state(data).model
        untrained = new_state(cfg.model, cfg.ablation, seed, cfg.train).model
        p_trained, _ = preservation(trained, corpus.samples["test"], corpus.scenes["test"], corpus.codec,
                                    corpus.bank)
        p_untrained, _ = preservation(untrained, corpus.samples["test"], corpus.scenes["test"], corpus.codec,
                                      corpus.bank)
        gains.append((p_trained.total, p_untrained.total))
    minutes = sum(v for k, v in runs.seconds.items() if k[0] == "pretrain") / 60
    detail(record_property, "L_rec ratio " + ", ".join(f"{r:.3f}" for r in ratios)
           + "; preservation " + ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in gains)
           + f"; pre-training {minutes:.1f} min")
    assert all(r < 0.5 for r in ratios)
    assert all(a - b >= 0.15 for a, b in gains)


def test_criterion_6_pretraining_benefit(record_property, corpus, runs):
    rows = []
    for seed in SEEDS:
        rows.append((runs.finetuned(seed, 0.1, True), runs.finetuned(seed, 0.1, False)))
    obj_wins = sum(p[0] > s[0] for p, s in rows)
    pred_wins = sum(p[1] > s[1] for p, s in rows)
    seconds = corpus.seconds + sum(v for k, v in runs.seconds.items()
                                   if k[0] == "pretrain" or (k[0] == "finetune" and k[2] == 0.1))
    detail(record_property, "obj mR@3 / pred mR@2 pre vs scratch: "
           + ", ".join(f"{p[0]:.3f}/{p[1]:.3f} vs {s[0]:.3f}/{s[1]:.3f}" for p, s in rows)
           + f"; wins {obj_wins}/3, {pred_wins}/3; {seconds / 60:.1f} min")
    assert seconds < 30 * 60
    assert obj_wins >= 2 and pred_wins >= 2


def test_criterion_7_label_efficiency(record_property, corpus, runs):
    table = {}
    for seed in SEEDS:
        for f in FRACTIONS:
            table[(seed, f)] = runs.finetuned(seed, f, True)
            assert all(0.0 <= v <= 1.0 for v in table[(seed, f)])
    wins = 0
    parts = []
    for seed in SEEDS:
        pre, full = table[(seed, 0.1)], runs.finetuned(seed, 1.0, False)
        wins += pre[0] > full[0] or pre[1] > full[1]
        parts.append(f"{pre[0]:.3f}/{pre[1]:.3f} vs {full[0]:.3f}/{full[1]:.3f}")
    curve = ", ".join(f"{f:g}: " + "/".join(f"{np.mean([table[(s, f)][i] for s in SEEDS]):.3f}" for i in (0, 1))
                      for f in FRACTIONS)
    detail(record_property, f"pre@0.1 vs scratch@1.0: {'; '.join(parts)}; wins {wins}/3; mean curve {curve}")
    assert wins >= 2


def small_cli_config(path, **data):
    from sgbottleneck.config import ExperimentConfig
    cfg = ExperimentConfig()
    cfg.model = small_model_config()
    cfg.data.num_scenes = 24
    cfg.data.max_objects = 6
    cfg.train.learning_rate = 1e-3
    for k, v in data.items():
        setattr(cfg.data, k, v)
    path.write_text(cfg.dumps())
    return str(path)


def test_criterion_8_ablation_harness(record_property, tmp_path, small_samples):
    cfg = small_cli_config(tmp_path / "c.json")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    keys = {}
    for flag in ("--no-gcn", "--no-skip", "--shape-loss-only", "--box-loss-only"):
        name = flag.strip("-")
        pre, ft = tmp_path / name / "pre", tmp_path / name / "ft"
        assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "data"), "--epochs", "2", flag,
                     "--out", str(pre)]) == 0
        assert main(["finetune", "--config", cfg, "--data", str(tmp_path / "data"), "--epochs", "2", flag,
                     "--checkpoint", str(pre / "final.sgck"), "--out", str(ft)]) == 0
        keys[name] = set(test_metrics.parse_metrics((ft / "metrics.txt").read_text()))
    assert len({frozenset(k) for k in keys.values()}) == 1
    files = [str(tmp_path / n / "ft" / "metrics.txt") for n in keys]
    assert main(["report", *files, "--out", str(tmp_path / "report.txt")]) == 0
    assert "missing" not in (tmp_path / "report.txt").read_text()

    # without the skip path the decoder sees only the bottleneck outputs
    m = acceptance_config().model
    enc = SceneGraphEncoder(small_model_config(feature_dim=m.feature_dim), np.random.default_rng(0))
    b = enc(collate(small_samples[:1]))
    cfg_m = small_model_config(feature_dim=m.feature_dim)
    node, edge = SceneDecoder(cfg_m, np.random.default_rng(1), use_skip=False).pre_lift(b)
    full, _ = SceneDecoder(cfg_m, np.random.default_rng(1)).pre_lift(b)
    assert node.shape[1] == cfg_m.num_classes and edge.shape[1] == cfg_m.num_predicates
    assert full.shape[1] == cfg_m.num_classes + cfg_m.feature_dim
    detail(record_property, f"4 ablations trained, {len(next(iter(keys.values())))} metric keys each; "
                            f"pre-lift {full.shape[1]} -> {node.shape[1]}")


def test_criterion_9_reproducibility(record_property, tmp_path):
    cfg = small_cli_config(tmp_path / "c.json")
    outputs = {}
    for name in ("a", "b"):
        d = tmp_path / name
        data, pre, ft = str(d / "data"), str(d / "pre"), str(d / "ft")
        assert main(["gen-data", "--config", cfg, "--seed", "9", "--out", data]) == 0
        assert main(["pretrain", "--config", cfg, "--seed", "9", "--data", data, "--epochs", "2", "--out", pre]) == 0
        assert main(["finetune", "--config", cfg, "--seed", "9", "--data", data, "--epochs", "2",
                     "--checkpoint", pre + "/final.sgck", "--label-fraction", "0.5,1.0", "--out", ft]) == 0
        assert main(["eval", "--config", cfg, "--seed", "9", "--data", data,
                     "--checkpoint", ft + "/fraction_1/final.sgck", "--out", str(d / "eval.txt")]) == 0
        assert main(["reconstruct", "--config", cfg, "--seed", "9", "--data", data,
                     "--checkpoint", pre + "/final.sgck", "--out", str(d / "rec")]) == 0
        outputs[name] = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
                         if p.is_file() and p.name != "run_manifest.json"}
    a, b = outputs["a"], outputs["b"]
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    checkpoints = sum(k.endswith(".sgck") for k in a)
    metrics = sum(k.endswith(("metrics.txt", "eval.txt", "preservation.txt")) for k in a)
    detail(record_property, f"{len(a)} files compared ({checkpoints} checkpoints, {metrics} metric files), "
                            f"{len(differing)} differ")
    # manifests differ only in their timestamp
    ma = json.loads((tmp_path / "a" / "pre" / "run_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "pre" / "run_manifest.json").read_text())
    ma.pop("created"), mb.pop("created"), ma.pop("data"), mb.pop("data")
    assert ma == mb
    assert not differing
