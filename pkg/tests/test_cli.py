import dataclasses
import json

import numpy as np
import pytest

from sgbottleneck.checkpoint import load_checkpoint, save_checkpoint
from sgbottleneck.cli import main
from sgbottleneck.config import ExperimentConfig, load_config
from sgbottleneck.metrics import parse_metrics
from sgbottleneck.scene_io import load_scene

from conftest import small_model_config


def write_config(path, **train):
    cfg = ExperimentConfig()
    cfg.model = small_model_config()
    cfg.data.num_scenes = 20
    cfg.data.max_objects = 6
    cfg.train.learning_rate = 1e-3
    cfg.train.pretrain_epochs = 2
    cfg.train.finetune_epochs = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    path.write_text(cfg.dumps())
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
    return root, cfg


def run_files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


# -- gen-data ----------------------------------------------------------------


def test_gen_data_split_and_files(workspace):
    root, cfg = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["format"] == "SGDATA v1"
    assert {k: len(v) for k, v in manifest["splits"].items()} == {"train": 14, "val": 3, "test": 3}
    files = [f for v in manifest["splits"].values() for f in v]
    assert len(set(files)) == 20
    for f in files:
        assert load_scene(root / "data" / f).labels is not None


def test_gen_data_default_split_counts(tmp_path):
    cfg = ExperimentConfig()
    cfg.data.num_scenes = 100
    cfg.data.max_objects = 5
    (tmp_path / "c.json").write_text(cfg.dumps())
    assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert [len(manifest["splits"][k]) for k in ("train", "val", "test")] == [70, 15, 15]


def test_gen_data_deterministic_and_refuses_overwrite(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert run_files(tmp_path / "again") == run_files(root / "data")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again"), "--force"]) == 0


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1e-3, "momentum": 0.9}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text(json.dumps({"schema_version": 7}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_config_defaults_are_published_constants():
    cfg = ExperimentConfig()
    assert cfg.loss.eta == (0.4, 0.2, 0.4) and cfg.loss.lam == (0.1, 1.0)
    assert cfg.loss.focal_alpha == 0.25 and cfg.loss.focal_gamma == 2.0
    assert cfg.train.learning_rate == 1e-4 and cfg.train.batch_size == 4
    m = cfg.model
    assert (m.encoder_gcn_layers, m.decoder_gcn_layers, m.feature_dim, m.angle_bins) == (4, 3, 256, 24)


def test_config_round_trip(workspace):
    _, cfg = workspace
    loaded = load_config(cfg)
    assert dataclasses.asdict(loaded) == dataclasses.asdict(load_config(cfg))
    assert loaded.model == small_model_config()


# -- pretrain / finetune / eval ----------------------------------------------


def test_pretrain_outputs(workspace):
    root, _ = workspace
    pre = root / "pre"
    assert sorted(p.name for p in (pre / "checkpoints").iterdir()) == ["epoch_001.sgck", "epoch_002.sgck"]
    state = load_checkpoint(pre / "final.sgck")
    assert state.mode == "pretrain" and state.epoch == 2
    rows = (pre / "loss_curves.csv").read_text().splitlines()
    assert rows[0] == "epoch,split,component,value"
    assert {r.split(",")[1] for r in rows[1:]} == {"train", "val"}
    manifest = json.loads((pre / "run_manifest.json").read_text())
    assert {"config_digest", "seed", "code_version"} <= set(manifest)


def test_finetune_and_eval(workspace, tmp_path, capsys):
    root, cfg = workspace
    out = tmp_path / "ft"
    args = ["finetune", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(root / "pre" / "final.sgck"),
            "--out", str(out)]
    assert main(args) == 0
    assert "dropped" in capsys.readouterr().out
    metrics = parse_metrics((out / "metrics.txt").read_text())
    assert 0.0 <= metrics[("object_recall", 1, "all")] <= 1.0
    dropped = json.loads((out / "run_manifest.json").read_text())["dropped_tensors"]
    assert dropped and all(n.startswith("decoder.") for n in dropped)
    assert main(["eval", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(out / "final.sgck"),
                 "--out", str(tmp_path / "eval.txt")]) == 0
    assert parse_metrics((tmp_path / "eval.txt").read_text()) == metrics
    assert main(["eval", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(out / "final.sgck"),
                 "--global-ranking", "--out", str(tmp_path / "eval_scene.txt")]) == 0


def test_finetune_sweep_writes_one_metrics_file_per_fraction(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "sweep"
    assert main(["finetune", "--config", cfg, "--data", str(root / "data"), "--no-pretrain",
                 "--label-fraction", "0.05,0.1,0.3,1.0", "--epochs", "1", "--out", str(out)]) == 0
    for f in ("0.05", "0.1", "0.3", "1"):
        assert (out / f"fraction_{f}" / "metrics.txt").exists()
        manifest = json.loads((out / f"fraction_{f}" / "run_manifest.json").read_text())
        assert manifest["label_fraction"] == float(f)


def test_finetune_rejects_unlabeled_data(tmp_path, capsys):
    cfg = ExperimentConfig()
    cfg.model = small_model_config()
    cfg.data.num_scenes = 6
    cfg.data.max_objects = 5
    cfg.data.with_labels = False
    (tmp_path / "c.json").write_text(cfg.dumps())
    c = str(tmp_path / "c.json")
    assert main(["gen-data", "--config", c, "--out", str(tmp_path / "d")]) == 0
    assert main(["finetune", "--config", c, "--data", str(tmp_path / "d"), "--no-pretrain",
                 "--out", str(tmp_path / "f")]) == 2
    assert "labels" in capsys.readouterr().err
    # pre-training itself is label-free
    assert main(["pretrain", "--config", c, "--data", str(tmp_path / "d"), "--epochs", "1",
                 "--out", str(tmp_path / "p")]) == 0


def test_bad_inputs_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert main(["finetune", "--config", cfg, "--data", data, "--out", str(tmp_path / "a")]) == 2
    assert main(["finetune", "--config", cfg, "--data", data, "--no-pretrain", "--label-fraction", "1.5",
                 "--out", str(tmp_path / "b")]) == 2
    assert main(["eval", "--config", cfg, "--data", data, "--checkpoint", str(tmp_path / "none.sgck")]) == 3
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "c")]) == 3
    (tmp_path / "trunc.sgck").write_bytes((root / "pre" / "final.sgck").read_bytes()[:100])
    assert main(["eval", "--config", cfg, "--data", data, "--checkpoint", str(tmp_path / "trunc.sgck")]) == 3


def test_numeric_failure_exit_4(workspace, tmp_path):
    root, cfg = workspace
    state = load_checkpoint(root / "pre" / "final.sgck")
    state.model.encoder.node_head.layers[0].weight.data[0, 0] = np.nan
    save_checkpoint(state, tmp_path / "nan.sgck")
    assert main(["finetune", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(tmp_path / "nan.sgck"),
                 "--out", str(tmp_path / "ft")]) == 4


def test_eval_uniform_heads_follow_tie_rule(workspace, tmp_path, capsys):
    # zeroed node-head output gives uniform distributions; with ties going to
    # the lower index a node is a hit at k exactly when its class is below k
    root, cfg = workspace
    state = load_checkpoint(root / "pre" / "final.sgck")
    from sgbottleneck.config import TrainConfig
    from sgbottleneck.training import to_finetune
    state, _ = to_finetune(state, TrainConfig())
    last = state.model.encoder.node_head.layers[-1]
    last.weight.data[...] = 0
    last.bias.data[...] = 0
    save_checkpoint(state, tmp_path / "uniform.sgck")
    assert main(["eval", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(tmp_path / "uniform.sgck"),
                 "--out", str(tmp_path / "m.txt")]) == 0
    metrics = parse_metrics((tmp_path / "m.txt").read_text())
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    gt = np.concatenate([[c for _, c in sorted(load_scene(root / "data" / f).labels.node_classes.items())]
                         for f in manifest["splits"]["test"]])
    for k in (1, 3, 5):
        assert metrics[("object_recall", k, "all")] == pytest.approx(np.mean(gt < k), abs=1e-12)


# -- reconstruct / report / ablate -------------------------------------------


def test_reconstruct_overfit_scene_preserves_relations(tmp_path):
    # one scene repeated to a batch of four, fitted to convergence
    cfg = write_config(tmp_path / "c.json", learning_rate=1e-2, pretrain_epochs=150)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    one = manifest["splits"]["train"][0]
    manifest["splits"] = {"train": [one] * 4, "val": [], "test": [one]}
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "p")]) == 0
    assert main(["reconstruct", "--config", cfg, "--data", str(tmp_path / "d"), "--split", "test",
                 "--checkpoint", str(tmp_path / "p" / "final.sgck"), "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "preservation.txt").read_text().splitlines()
    assert lines[0] == "SGPRESERVE v1"
    overall = lines[-1].split()
    assert overall[0] == "overall" and float(overall[3]) >= 0.95
    scene_file = tmp_path / "r" / "scenes" / one.split("/")[-1]
    assert len(load_scene(scene_file).boxes) == len(load_scene(tmp_path / "d" / one).boxes)
    assert (tmp_path / "r" / "points").is_dir()


def test_reconstruct_needs_pretrain_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    assert main(["finetune", "--config", cfg, "--data", str(root / "data"), "--no-pretrain", "--epochs", "1",
                 "--out", str(tmp_path / "ft")]) == 0
    assert main(["reconstruct", "--config", cfg, "--data", str(root / "data"),
                 "--checkpoint", str(tmp_path / "ft" / "final.sgck"), "--out", str(tmp_path / "r")]) == 2


def test_report_join(tmp_path, capsys):
    a = "SGMETRICS v1\nobject_recall 1 all 0.5 10\npredicate_recall 1 all 0.25 8\n"
    b = "SGMETRICS v1\nobject_recall 1 all 0.75 10\nmean_recall.object 1 tail undefined 0\n"
    (tmp_path / "a.txt").write_text(a)
    (tmp_path / "b.txt").write_text(b)
    assert main(["report", str(tmp_path / "a.txt")]) == 0
    single = capsys.readouterr().out.splitlines()
    assert single[:2] == ["SGREPORT v1", "name k split a"]
    assert single[2:] == ["object_recall 1 all 0.500000", "predicate_recall 1 all 0.250000"]
    assert main(["report", str(tmp_path / "a.txt"), str(tmp_path / "b.txt")]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[1] == "name k split a b"
    assert "object_recall 1 all 0.500000 0.750000" in rows
    assert "predicate_recall 1 all 0.250000 missing" in rows
    assert "mean_recall.object 1 tail missing undefined" in rows
    (tmp_path / "c.txt").write_text("SGMETRICS v9\n")
    assert main(["report", str(tmp_path / "a.txt"), str(tmp_path / "c.txt")]) == 3
    assert "c.txt" in capsys.readouterr().err


def test_runs_reproducible_byte_for_byte(workspace, tmp_path):
    root, cfg = workspace
    for name in ("one", "two"):
        d = tmp_path / name
        assert main(["gen-data", "--config", cfg, "--seed", "4", "--out", str(d / "data")]) == 0
        assert main(["pretrain", "--config", cfg, "--seed", "4", "--data", str(d / "data"), "--out", str(d / "pre")]) == 0
        assert main(["finetune", "--config", cfg, "--seed", "4", "--data", str(d / "data"),
                     "--checkpoint", str(d / "pre" / "final.sgck"), "--out", str(d / "ft")]) == 0
    one, two = run_files(tmp_path / "one"), run_files(tmp_path / "two")
    assert one.keys() == two.keys()
    for name in one:
        # the data path differs between the two runs only inside run manifests
        assert one[name] == two[name], name


def test_ablate_runs_every_variant(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--config", cfg, "--data", str(root / "data"), "--pretrain-epochs", "1", "--epochs", "1",
                 "--out", str(out)]) == 0
    names = sorted(p.stem for p in (out / "metrics").iterdir())
    assert names == sorted(["full", "no_gcn", "no_skip", "shape_loss_only", "box_loss_only", "no_pretrain"])
    assert not (out / "no_pretrain" / "pretrain").exists()
    state = load_checkpoint(out / "no_gcn" / "pretrain" / "final.sgck")
    assert state.flags.no_gcn and not any(".gcn." in n for n, _ in state.model.named_parameters())
    assert main(["ablate", "--config", cfg, "--data", str(root / "data"), "--variants", "no_everything",
                 "--out", str(tmp_path / "bad")]) == 2


def test_ablation_flags_on_pretrain(workspace, tmp_path):
    root, cfg = workspace
    for flag in ("--no-gcn", "--no-skip", "--shape-loss-only", "--box-loss-only"):
        out = tmp_path / flag.strip("-")
        assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--epochs", "1", flag,
                     "--out", str(out)]) == 0
        assert json.loads((out / "config.json").read_text())["ablation"][flag.strip("-").replace("-", "_")]
    assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--shape-loss-only", "--box-loss-only",
                 "--out", str(tmp_path / "both")]) == 2
