"""Command line: data generation, training, evaluation, reconstruction and reports.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
``SGB_OUTPUT_DIR`` and ``SGB_THREADS`` override the output root and thread count.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import io
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .autograd import NumericError
from .checkpoint import CheckpointError, dumps_state, load_checkpoint, save_checkpoint
from .config import AblationFlags, ConfigError, ExperimentConfig, desk_profile, load_config
from .decoder import assemble_scene
from .experiments import (class_splits, evaluate_model, family_prototypes, generate_corpus, make_codec,
                          prepare, split_indices)
from .metrics import MetricFormatError, family_bank, nearest_family, parse_metrics, preservation_accuracy
from .scene import SceneError
from .scene_io import export_point_list, load_scene, save_scene
from .training import (ContractError, TrainingDiverged, new_state, pretrain, finetune, reconstruct,
                       to_finetune)

log = logging.getLogger("sgbottleneck")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATIONS = ("no_gcn", "no_skip", "shape_loss_only", "box_loss_only", "no_pretrain")


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "profile", None) == "desk":
        cfg = desk_profile(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    env_out = os.environ.get("SGB_OUTPUT_DIR")
    if env_out:
        cfg.output_dir = env_out
    flags = dataclasses.asdict(cfg.ablation)
    for name in ABLATIONS:
        if getattr(args, name, False):
            flags[name] = True
    cfg.ablation = AblationFlags(**flags)
    if getattr(args, "label_fraction", None) is not None:
        fracs = parse_fractions(args.label_fraction)
        cfg.train.label_fraction = fracs[0]
    if getattr(args, "reinit_heads", False):
        cfg.train.reinit_heads = True
    return cfg.validate()


def parse_fractions(text: str) -> list[float]:
    try:
        fracs = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad --label-fraction {text!r}") from None
    if not fracs:
        raise ConfigError("--label-fraction is empty")
    for f in fracs:
        if not 0 < f <= 1:
            raise ConfigError(f"label fraction must lie in (0, 1], got {f}")
    return fracs


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def out_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir) / command


def write_manifest(path: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    (path / "config.json").write_text(cfg.dumps() + "\n")
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "code_version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    (path / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_curves(path: Path, curves: list[tuple]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "component", "value"])
    for epoch, split, comp, value in curves:
        w.writerow([epoch, split, comp, format(value, ".17g")])
    path.write_text(buf.getvalue())


def load_dataset(data_dir, cfg: ExperimentConfig):
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise SceneError(f"{root}: no manifest.json (run gen-data first)")
    manifest = json.loads(mpath.read_text())
    d = cfg.data
    scenes = {split: [load_scene(root / f, (d.min_objects, d.max_objects)) for f in files]
              for split, files in manifest["splits"].items()}
    return manifest, scenes


class Data:
    """Scenes of a generated dataset plus their preprocessed samples."""

    def __init__(self, data_dir, cfg: ExperimentConfig):
        self.manifest, self.scenes = load_dataset(data_dir, cfg)
        self.codec = make_codec(cfg.model)
        self._samples = {}
        self.cfg = cfg

    def samples(self, split: str):
        if split not in self._samples:
            self._samples[split] = prepare(self.scenes[split], self.cfg.model, self.codec)
        return self._samples[split]

    def labeled(self, split: str) -> bool:
        return all(s.labels is not None for s in self.scenes[split])


def require_labels(data: Data, *splits: str) -> None:
    for split in splits:
        if not data.labeled(split):
            raise ConfigError(f"the {split} split has no scene-graph labels; fine-tuning and evaluation "
                              "are supervised (only pre-training runs label-free)")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    root = prepare_out(Path(args.out) if args.out else Path(cfg.data.scene_dir or Path(cfg.output_dir) / "data"),
                       args.force)
    scenes = generate_corpus(cfg.data, cfg.seed)
    (root / "scenes").mkdir()
    files = []
    for s in scenes:
        if not cfg.data.with_labels:
            s = s.without_labels()
        rel = f"scenes/{s.scene_id}.sgscene"
        save_scene(s, root / rel)
        files.append(rel)
    idx = split_indices(len(files), cfg.data.split, cfg.seed)
    manifest = {"format": "SGDATA v1", "seed": cfg.seed, "config_digest": cfg.digest(),
                "num_scenes": len(files), "labels": cfg.data.with_labels,
                "splits": {k: [files[i] for i in v] for k, v in idx.items()}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_manifest(root, "gen-data", cfg)
    print(f"wrote {len(files)} scenes to {root} "
          f"(train {len(idx['train'])}, val {len(idx['val'])}, test {len(idx['test'])})")
    return EXIT_OK


def _run_pretrain(cfg: ExperimentConfig, data: Data, out: Path, epochs: int):
    state = new_state(cfg.model, cfg.ablation, cfg.seed, cfg.train)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)

    def on_epoch(st):
        save_checkpoint(st, ckdir / f"epoch_{st.epoch:03d}.sgck")

    try:
        curves = pretrain(data.samples("train"), data.samples("val"), state, epochs,
                          cfg.train.batch_size, cfg.loss, on_epoch, dumps_state)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            (out / "last_good.sgck").write_bytes(exc.last_good)
        raise
    save_checkpoint(state, out / "final.sgck")
    write_curves(out / "loss_curves.csv", curves)
    return state, curves


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    data = Data(args.data, cfg)
    out = prepare_out(out_dir(args, cfg, "pretrain"), args.force)
    epochs = cfg.train.pretrain_epochs if args.epochs is None else args.epochs
    _, curves = _run_pretrain(cfg, data, out, epochs)
    write_manifest(out, "pretrain", cfg, {"epochs": epochs, "data": str(args.data)})
    val = [v for e, s, c, v in curves if s == "val" and c == "total"]
    if val:
        print(f"held-out reconstruction loss {val[0]:.6f} -> {val[-1]:.6f}")
    return EXIT_OK


def _finetune_state(cfg: ExperimentConfig, checkpoint):
    dropped: list[str] = []
    if cfg.ablation.no_pretrain:
        return new_state(cfg.model, cfg.ablation, cfg.seed, cfg.train, mode="finetune"), dropped
    if checkpoint is None:
        raise ConfigError("finetune needs --checkpoint from pre-training, or --no-pretrain")
    state = load_checkpoint(checkpoint, cfg.model)
    if state.mode == "pretrain":
        state, dropped = to_finetune(state, cfg.train, cfg.train.reinit_heads)
    return state, dropped


def _run_finetune(cfg: ExperimentConfig, data: Data, out: Path, checkpoint, fraction: float, epochs: int):
    state, dropped = _finetune_state(cfg, checkpoint)
    curves = finetune(data.samples("train"), state, epochs, fraction, cfg.seed, data.samples("val"),
                      cfg.train.batch_size, cfg.loss, keep_best=cfg.train.select_best)
    save_checkpoint(state, out / "final.sgck")
    write_curves(out / "loss_curves.csv", curves)
    splits = class_splits(data.samples("train"), cfg.model)
    report = evaluate_model(state.model, data.samples("test"), splits)
    (out / "metrics.txt").write_text(report.dumps())
    return state, report, dropped


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    data = Data(args.data, cfg)
    require_labels(data, "train", "val", "test")
    fracs = parse_fractions(args.label_fraction) if args.label_fraction else [cfg.train.label_fraction]
    root = prepare_out(out_dir(args, cfg, "finetune"), args.force)
    epochs = cfg.train.finetune_epochs if args.epochs is None else args.epochs
    for f in fracs:
        out = root if len(fracs) == 1 else root / f"fraction_{f:g}"
        out.mkdir(exist_ok=True)
        cfg.train.label_fraction = f
        _, report, dropped = _run_finetune(cfg, data, out, args.checkpoint, f, epochs)
        if dropped:
            print(f"dropped {len(dropped)} decoder tensors from the pre-training checkpoint")
        write_manifest(out, "finetune", cfg, {"epochs": epochs, "label_fraction": f,
                                              "checkpoint": args.checkpoint, "dropped_tensors": dropped})
        print(f"fraction {f:g}: object R@1 {report.object_recall[1]:.4f}  "
              f"predicate R@1 {report.predicate_recall[1]:.4f}  -> {out / 'metrics.txt'}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    data = Data(args.data, cfg)
    require_labels(data, "train", args.split)
    state = load_checkpoint(args.checkpoint, cfg.model)
    splits = class_splits(data.samples("train"), cfg.model)
    report = evaluate_model(state.model, data.samples(args.split), splits,
                            scope="scene" if args.global_ranking else "pair")
    text = report.dumps()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_reconstruct(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("reconstruct needs --checkpoint")
    state = load_checkpoint(args.checkpoint, cfg.model)
    if state.mode != "pretrain":
        raise ConfigError("reconstruct needs a pre-training checkpoint (fine-tuned models have no decoder)")
    data = Data(args.data, cfg)
    out = prepare_out(out_dir(args, cfg, "reconstruct"), args.force)
    (out / "scenes").mkdir()
    (out / "points").mkdir()
    protos = family_bank(data.samples("train"), data.scenes["train"]) or family_prototypes(data.codec)
    scenes = data.scenes[args.split]
    total = None
    for (boxes, codes), scene in zip(reconstruct(state.model, data.samples(args.split)), scenes):
        fams = [nearest_family(c, protos) for c in codes]
        rec = assemble_scene(boxes, codes, data.codec)
        rec.families, rec.instances = fams, scene.instances
        recon_scene = rec.to_scene(scene.scene_id)
        save_scene(recon_scene, out / "scenes" / f"{scene.scene_id}.sgscene")
        export_point_list(recon_scene.points, recon_scene.instance_ids, out / "points" / f"{scene.scene_id}.xyz")
        rep = preservation_accuracy(scene, boxes, fams)
        total = rep if total is None else total.merge(rep)
    (out / "preservation.txt").write_text(total.dumps())
    write_manifest(out, "reconstruct", cfg, {"checkpoint": args.checkpoint, "split": args.split})
    print(f"preservation accuracy {total.total:.4f} over {sum(total.totals.values())} relations")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig | None = None) -> int:
    runs = []
    for f in args.files:
        try:
            text = Path(f).read_text()
        except OSError as exc:
            raise MetricFormatError(f"cannot read {f}: {exc}") from None
        runs.append((_run_name(Path(f)), parse_metrics(text, str(f))))
    keys = list(dict.fromkeys(k for _, table in runs for k in table))
    lines = ["SGREPORT v1", "name k split " + " ".join(n for n, _ in runs)]
    for key in keys:
        cells = []
        for _, table in runs:
            if key not in table:
                cells.append("missing")
            elif table[key] is None:
                cells.append("undefined")
            else:
                cells.append(format(table[key], ".6f"))
        lines.append(f"{key[0]} {key[1]} {key[2]} " + " ".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _run_name(path: Path) -> str:
    return path.parent.name if path.name == "metrics.txt" else path.stem


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    """Pre-train, fine-tune and evaluate the full model and every ablation."""
    data = Data(args.data, cfg)
    require_labels(data, "train", "val", "test")
    root = prepare_out(out_dir(args, cfg, "ablate"), args.force)
    variants = args.variants.split(",") if args.variants else ["full", *ABLATIONS]
    pre_epochs = cfg.train.pretrain_epochs if args.pretrain_epochs is None else args.pretrain_epochs
    ft_epochs = cfg.train.finetune_epochs if args.epochs is None else args.epochs
    (root / "metrics").mkdir()
    for name in variants:
        if name != "full" and name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        vcfg = ExperimentConfig(**{f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)})
        vcfg.ablation = AblationFlags(**{name: True}) if name != "full" else AblationFlags()
        vdir = root / name
        vdir.mkdir()
        checkpoint = None
        if not vcfg.ablation.no_pretrain:
            pdir = vdir / "pretrain"
            pdir.mkdir()
            _run_pretrain(vcfg, data, pdir, pre_epochs)
            checkpoint = pdir / "final.sgck"
        fdir = vdir / "finetune"
        fdir.mkdir()
        _, report, _ = _run_finetune(vcfg, data, fdir, checkpoint, vcfg.train.label_fraction, ft_epochs)
        (root / "metrics" / f"{name}.txt").write_text(report.dumps())
        print(f"{name}: object R@1 {report.object_recall[1]:.4f}  predicate R@1 {report.predicate_recall[1]:.4f}")
    write_manifest(root, "ablate", cfg, {"variants": variants})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--profile", choices=("paper", "desk"), default="paper",
                        help="desk shrinks widths and point counts for single-core runs")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    ablation = argparse.ArgumentParser(add_help=False)
    for name in ABLATIONS:
        ablation.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")

    p = argparse.ArgumentParser(prog="sgb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene corpus")

    s = sub.add_parser("pretrain", parents=[common, ablation], help="reconstruction pre-training")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("finetune", parents=[common, ablation], help="scene-graph fine-tuning")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--label-fraction", help="fraction, or comma list for a sweep")
    s.add_argument("--reinit-heads", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="recall metrics of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--global-ranking", action="store_true", help="rank triplets per scene instead of per pair")

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct scenes and score preservation")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))

    s = sub.add_parser("report", parents=[common], help="merge metric files into one table")
    s.add_argument("files", nargs="+")

    s = sub.add_parser("ablate", parents=[common], help="run the full model and every ablation")
    s.add_argument("--data", required=True)
    s.add_argument("--variants", help="comma list out of full," + ",".join(ABLATIONS))
    s.add_argument("--pretrain-epochs", type=int)
    s.add_argument("--epochs", type=int, help="fine-tuning epochs")
    s.add_argument("--label-fraction")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "reconstruct": cmd_reconstruct, "report": cmd_report, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = args.threads or int(os.environ.get("SGB_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            if args.command == "report":
                return cmd_report(args)
            cfg = resolve_config(args)
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneError, CheckpointError, MetricFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
