"""Pre-training, fine-tuning, losses and train-state bookkeeping."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor
from .config import AblationFlags, ConfigError, LossConfig, ModelConfig, TrainConfig
from .decoder import DecoderOutput, SceneDecoder
from .encoder import BottleneckOutput, SceneGraphEncoder
from .losses import cross_entropy, focal_binary_cross_entropy, focal_cross_entropy, l1
from .nn import Module
from .optim import OptimizerState, adam_step, plateau_step
from .preprocess import Batch, SceneSample, collate

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: bytes | None):
        super().__init__(message)
        self.last_good = last_good


class SceneModel(Module):
    def __init__(self, cfg: ModelConfig, flags: AblationFlags, seed: int, with_decoder: bool = True):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SceneGraphEncoder(cfg, rng, use_gcn=not flags.no_gcn)
        if with_decoder:
            self.decoder = SceneDecoder(cfg, rng, use_gcn=not flags.no_gcn, use_skip=not flags.no_skip)
        else:
            object.__setattr__(self, "decoder", None)

    def drop_decoder(self) -> list[str]:
        if self.decoder is None:
            return []
        dropped = [n for n, _ in self.named_parameters() if n.startswith("decoder.")]
        dropped += [n for n, _ in self.named_buffers() if n.startswith("decoder.")]
        del self._modules["decoder"]
        object.__setattr__(self, "decoder", None)
        return dropped


@dataclass
class TrainState:
    model: SceneModel
    optimizer: OptimizerState
    mode: str = "pretrain"
    epoch: int = 0
    flags: AblationFlags = field(default_factory=AblationFlags)
    rng_seed: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.mode == "finetune" and self.model.decoder is not None:
            raise ContractError("finetune state must not carry a decoder")
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)
        AblationFlags(**dataclasses.asdict(self.flags))

    def params(self) -> dict[str, Tensor]:
        return dict(self.model.named_parameters())


def new_state(cfg: ModelConfig, flags: AblationFlags, seed: int, train: TrainConfig,
              mode: str = "pretrain") -> TrainState:
    model = SceneModel(cfg, flags, seed, with_decoder=mode == "pretrain")
    opt = OptimizerState(train.learning_rate, train.plateau_patience, train.plateau_factor)
    return TrainState(model, opt, mode, 0, flags, seed)


def to_finetune(state: TrainState, train: TrainConfig, reinit_heads: bool = False) -> tuple[TrainState, list[str]]:
    """Discard the decoder and start a fresh optimizer over the encoder."""
    dropped = state.model.drop_decoder()
    if reinit_heads:
        fresh = SceneModel(state.model.cfg, state.flags, state.rng_seed + 7919, with_decoder=False)
        state.model.encoder.node_head = fresh.encoder.node_head
        state.model.encoder.edge_head = fresh.encoder.edge_head
    opt = OptimizerState(train.learning_rate, train.plateau_patience, train.plateau_factor)
    return TrainState(state.model, opt, "finetune", 0, state.flags, state.rng_seed,
                      np.random.default_rng(state.rng_seed + 1)), dropped


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    weights: dict[str, float]

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())


def reconstruction_loss(pred: DecoderOutput, batch: Batch, cfg: LossConfig = LossConfig(),
                        flags: AblationFlags = AblationFlags()) -> tuple[Tensor, LossReport]:
    n = batch.num_nodes
    if pred.boxes.extents.shape[0] != n or pred.shape_codes.shape[0] != n:
        raise ContractError(f"prediction covers {pred.boxes.extents.shape[0]} objects, targets {n}")
    weights = dict(zip(("bbox", "angle", "shape"), cfg.eta))
    if flags.shape_loss_only:
        weights["bbox"] = weights["angle"] = 0.0
    if flags.box_loss_only:
        weights["shape"] = 0.0
    terms = {
        "bbox": lambda: l1(pred.boxes.regressed(), batch.box_targets),
        "angle": lambda: cross_entropy(pred.boxes.angle_logits, batch.angle_bins),
        "shape": lambda: l1(pred.shape_codes, batch.shape_codes),
    }
    total = None
    comps = {}
    for name, make in terms.items():
        if weights[name] == 0.0:
            comps[name] = 0.0
            continue
        value = make()
        comps[name] = value.item()
        total = value * weights[name] if total is None else total + value * weights[name]
    return total, LossReport(total.item(), comps, weights)


def scene_graph_loss(pred: BottleneckOutput, node_classes: np.ndarray, edge_targets: np.ndarray,
                     cfg: LossConfig = LossConfig()) -> tuple[Tensor, LossReport]:
    c_obj = pred.node_logits.shape[1]
    c_pred = pred.edge_probabilities.shape[1]
    if node_classes is None or edge_targets is None:
        raise ContractError("scene-graph loss needs ground-truth labels")
    if len(node_classes) and np.max(node_classes) >= c_obj:
        raise ContractError(f"class index {np.max(node_classes)} outside vocabulary of {c_obj}")
    if edge_targets.ndim != 2 or edge_targets.shape[1] != c_pred:
        raise ContractError(f"predicate targets have {edge_targets.shape[-1]} columns, model has {c_pred}")
    weights = {"obj": cfg.lam[0], "pred": cfg.lam[1]}
    obj = focal_cross_entropy(pred.node_logits, node_classes, cfg.focal_alpha, cfg.focal_gamma)
    total = obj * weights["obj"]
    comps = {"obj": obj.item(), "pred": 0.0}
    if len(edge_targets):
        prd = focal_binary_cross_entropy(pred.edge_probabilities, edge_targets, cfg.focal_alpha, cfg.focal_gamma)
        comps["pred"] = prd.item()
        total = total + prd * weights["pred"]
    return total, LossReport(total.item(), comps, weights)


# ---------------------------------------------------------------------------
# loops


def batches(samples: list[SceneSample], batch_size: int, order=None):
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield collate([samples[k] for k in idx[start:start + batch_size]])


def _mean_reports(reports: list[tuple[LossReport, int]]) -> dict[str, float]:
    total_w = sum(w for _, w in reports)
    out = {"total": sum(r.total * w for r, w in reports) / total_w}
    for key in reports[0][0].components:
        out[key] = sum(r.components[key] * w for r, w in reports) / total_w
    return out


def _step_loss(state: TrainState, batch: Batch, loss_cfg: LossConfig):
    bottleneck = state.model.encoder(batch)
    if state.mode == "pretrain":
        return reconstruction_loss(state.model.decoder(bottleneck), batch, loss_cfg, state.flags)
    return scene_graph_loss(bottleneck, batch.node_classes, batch.edge_targets, loss_cfg)


def evaluate_loss(state: TrainState, samples: list[SceneSample], loss_cfg: LossConfig,
                  batch_size: int = 4) -> dict[str, float]:
    state.model.eval()
    reports = []
    with ag.no_grad():
        for batch in batches(samples, batch_size):
            _, rep = _step_loss(state, batch, loss_cfg)
            reports.append((rep, batch.num_nodes))
    state.model.train()
    return _mean_reports(reports)


def _train_epochs(state: TrainState, train: list[SceneSample], val: list[SceneSample], epochs: int,
                  batch_size: int, loss_cfg: LossConfig, on_epoch: Callable | None,
                  snapshot: Callable[[TrainState], bytes] | None, keep_best: bool = False) -> list[tuple]:
    curves: list[tuple] = []
    best, best_loss = None, np.inf
    if val:
        val_losses = evaluate_loss(state, val, loss_cfg, batch_size)
        for key, v in val_losses.items():
            curves.append((state.epoch, "val", key, v))
        if keep_best:
            best, best_loss = _weights(state.model), val_losses["total"]
    last_good = snapshot(state) if snapshot else None
    params = state.params()
    for _ in range(epochs):
        state.model.train()
        order = state.rng.permutation(len(train))
        reports = []
        for batch in batches(train, batch_size, order):
            try:
                loss, rep = _step_loss(state, batch, loss_cfg)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {state.epoch + 1}: {exc}", last_good) from None
            if not np.isfinite(rep.total):
                raise TrainingDiverged(f"non-finite loss at epoch {state.epoch + 1}", last_good)
            state.model.zero_grad()
            loss.backward()
            try:
                adam_step(state.optimizer, params)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), last_good) from None
            reports.append((rep, batch.num_nodes))
        state.epoch += 1
        for key, v in _mean_reports(reports).items():
            curves.append((state.epoch, "train", key, v))
        monitored = None
        if val:
            val_losses = evaluate_loss(state, val, loss_cfg, batch_size)
            for key, v in val_losses.items():
                curves.append((state.epoch, "val", key, v))
            monitored = val_losses["total"]
            if keep_best and monitored < best_loss:
                best, best_loss = _weights(state.model), monitored
        else:
            monitored = _mean_reports(reports)["total"]
        plateau_step(state.optimizer, monitored)
        log.info("%s epoch %d loss %.6f lr %.2e", state.mode, state.epoch, monitored,
                 state.optimizer.learning_rate)
        if snapshot:
            last_good = snapshot(state)
        if on_epoch:
            on_epoch(state)
    if best is not None:
        _restore(state.model, best)
    return curves


def _weights(model: Module):
    return ({n: p.data.copy() for n, p in model.named_parameters()},
            {n: b.copy() for n, b in model.named_buffers()})


def _restore(model: Module, weights) -> None:
    params, buffers = weights
    for n, p in model.named_parameters():
        p.data[...] = params[n]
    for n, b in buffers.items():
        model.set_buffer(n, b)


def pretrain(train: list[SceneSample], val: list[SceneSample], state: TrainState, epochs: int,
             batch_size: int = 4, loss_cfg: LossConfig = LossConfig(), on_epoch: Callable | None = None,
             snapshot: Callable | None = None) -> list[tuple]:
    """Reconstruction pre-training; graph labels are stripped before use."""
    if state.mode != "pretrain":
        raise ContractError("pretrain needs a pretrain-mode state")
    train = [s.without_labels() for s in train]
    val = [s.without_labels() for s in val]
    return _train_epochs(state, train, val, epochs, batch_size, loss_cfg, on_epoch, snapshot)


def label_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic subset of ``round(fraction * n)`` indices (at least one)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"label fraction must lie in (0, 1], got {fraction}")
    count = max(1, int(round(fraction * n)))
    return np.sort(np.random.default_rng(seed).permutation(n)[:count])


def finetune(train: list[SceneSample], state: TrainState, epochs: int, label_fraction: float = 1.0,
             seed: int = 0, val: list[SceneSample] | None = None, batch_size: int = 4,
             loss_cfg: LossConfig = LossConfig(), on_epoch: Callable | None = None,
             snapshot: Callable | None = None, keep_best: bool = False) -> list[tuple]:
    """Supervised scene-graph training of the encoder on a label subset.

    With ``keep_best`` the weights of the epoch with the lowest held-out
    loss are restored at the end.
    """
    if state.mode != "finetune":
        raise ContractError("finetune needs a finetune-mode state (decoder discarded)")
    if any(not s.has_labels for s in train):
        raise ContractError("fine-tuning requires scene-graph labels on every training scene")
    subset = [train[k] for k in label_subset(len(train), label_fraction, seed)]
    return _train_epochs(state, subset, list(val or []), epochs, batch_size, loss_cfg, on_epoch,
                         snapshot, keep_best)


def predict(model: SceneModel, samples: list[SceneSample], batch_size: int = 4):
    """Per-scene (node distributions, edge probabilities) in inference mode."""
    model.eval()
    out = []
    with ag.no_grad():
        for batch in batches(samples, batch_size):
            b = model.encoder(batch)
            for s in range(len(batch.scene_ids)):
                n0, n1 = batch.node_offsets[s], batch.node_offsets[s + 1]
                e0, e1 = batch.edge_offsets[s], batch.edge_offsets[s + 1]
                out.append((b.node_distributions.data[n0:n1], b.edge_probabilities.data[e0:e1]))
    model.train()
    return out


def reconstruct(model: SceneModel, samples: list[SceneSample], batch_size: int = 4):
    """Per-scene (boxes, shape codes) from the decoder in inference mode."""
    if model.decoder is None:
        raise ContractError("reconstruction needs a model with its decoder")
    model.eval()
    out = []
    with ag.no_grad():
        for batch in batches(samples, batch_size):
            dec = model.decoder(model.encoder(batch))
            all_boxes = dec.boxes.boxes()
            for s in range(len(batch.scene_ids)):
                n0, n1 = batch.node_offsets[s], batch.node_offsets[s + 1]
                out.append((all_boxes[n0:n1], dec.shape_codes.data[n0:n1]))
    model.train()
    return out
