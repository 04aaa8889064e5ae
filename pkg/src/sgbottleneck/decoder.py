"""Graph decoder with box and shape heads, plus object-level scene assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codec import FrozenShapeCodec
from .config import ModelConfig
from .encoder import BottleneckOutput, FeatureGraph, TripletGCNLayer
from .nn import MLP, Linear, Module, ModuleList
from .preprocess import bin_center
from .scene import OrientedBox, Scene

EXTENT_LOG_RANGE = (-6.0, 3.0)


@dataclass
class BoxPrediction:
    extents: Tensor  # [n, 3], positive
    centers: Tensor  # [n, 3]
    angle_logits: Tensor  # [n, bins]

    def regressed(self) -> Tensor:
        return ag.concat([self.extents, self.centers], axis=1)

    def yaws(self) -> np.ndarray:
        bins = self.angle_logits.shape[1]
        return np.array([bin_center(int(k), bins) for k in np.argmax(self.angle_logits.data, axis=1)])

    def boxes(self) -> list[OrientedBox]:
        return [OrientedBox(tuple(c), tuple(e), y)
                for e, c, y in zip(self.extents.data, self.centers.data, self.yaws())]


@dataclass
class DecoderOutput:
    boxes: BoxPrediction
    shape_codes: Tensor  # [n, code_dim]
    graph: FeatureGraph


class SceneDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_gcn: bool = True,
                 use_skip: bool = True):
        super().__init__()
        d = cfg.feature_dim
        self.cfg = cfg
        self.use_skip = use_skip
        self.node_embed = Linear(cfg.num_classes + (d if use_skip else 0), d, rng)
        self.edge_embed = Linear(cfg.num_predicates + (d if use_skip else 0), d, rng)
        self.gcn = ModuleList(TripletGCNLayer(d, rng) for _ in range(cfg.decoder_gcn_layers if use_gcn else 0))
        self.box_head = MLP([d, d, d, 6 + cfg.angle_bins], rng)
        self.shape_head = MLP([d, d, d, cfg.shape_code_dim], rng)

    def pre_lift(self, b: BottleneckOutput) -> tuple[Tensor, Tensor]:
        if not self.use_skip:
            return b.node_distributions, b.edge_probabilities
        if b.pre_head_node is None or b.pre_head_edge is None:
            raise ValueError("bottleneck output lacks the retained pre-head features")
        return (ag.concat([b.node_distributions, b.pre_head_node], axis=1),
                ag.concat([b.edge_probabilities, b.pre_head_edge], axis=1))

    def build_decoder_input(self, b: BottleneckOutput) -> FeatureGraph:
        node_in, edge_in = self.pre_lift(b)
        nodes = ag.relu(self.node_embed(node_in))
        if len(b.edges):
            edges = ag.relu(self.edge_embed(edge_in))
        else:
            edges = Tensor(np.zeros((0, self.cfg.feature_dim)))
        return FeatureGraph(nodes, edges, b.edges)

    def decode_graph(self, graph: FeatureGraph) -> FeatureGraph:
        for layer in self.gcn:
            graph = layer(graph)
        return graph

    def predict_boxes(self, node_features: Tensor) -> BoxPrediction:
        raw = self.box_head(node_features)
        extents = ag.exp(ag.clip(raw[:, 0:3], *EXTENT_LOG_RANGE))
        return BoxPrediction(extents, raw[:, 3:6], raw[:, 6:])

    def predict_shape(self, node_features: Tensor) -> Tensor:
        return self.shape_head(node_features)

    def forward(self, b: BottleneckOutput) -> DecoderOutput:
        graph = self.decode_graph(self.build_decoder_input(b))
        return DecoderOutput(self.predict_boxes(graph.node_features),
                             self.predict_shape(graph.node_features), graph)


def box_head(decoder: SceneDecoder, node_features: Tensor) -> BoxPrediction:
    return decoder.predict_boxes(node_features)


def shape_head(decoder: SceneDecoder, node_features: Tensor) -> Tensor:
    return decoder.predict_shape(node_features)


# ---------------------------------------------------------------------------
# assembly


@dataclass
class ReconstructedScene:
    boxes: list[OrientedBox]
    codes: np.ndarray  # [n, code_dim]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    instance_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    families: list[str] | None = None
    instances: list[int] | None = None

    def to_scene(self, scene_id: str = "reconstruction") -> Scene:
        inst = self.instances or list(range(1, len(self.boxes) + 1))
        fams = {i: f for i, f in zip(inst, self.families)} if self.families else {}
        ids = np.asarray([inst[k - 1] for k in self.instance_ids], dtype=np.int64) if len(self.instance_ids) else self.instance_ids
        return Scene(self.points, ids, dict(zip(inst, self.boxes)), scene_id, None, None, fams)


def place_points(canonical: np.ndarray, box: OrientedBox) -> np.ndarray:
    return (np.asarray(canonical) * np.array(box.extents)) @ box.rotation().T + np.array(box.center)


def assemble_scene(boxes: list[OrientedBox], codes, codec: FrozenShapeCodec | None = None,
                   canonical: list[np.ndarray] | None = None) -> ReconstructedScene:
    """Decode each code to a unit-frame shape and place it in its box.

    ``canonical`` overrides the codec output with given unit-frame shapes.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if len(boxes) != len(codes):
        raise ValueError("assemble_scene needs exactly one code per box")
    pts, ids = [], []
    for k, box in enumerate(boxes):
        if canonical is not None:
            shape = canonical[k]
        elif codec is not None:
            shape = codec.decode(codes[k])
        else:
            continue
        pts.append(place_points(shape, box))
        ids.append(np.full(len(shape), k + 1))
    points = np.vstack(pts) if pts else np.zeros((0, 3))
    instance_ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    codes = codes.reshape(len(boxes), codes.shape[-1] if codes.ndim > 1 else -1) if len(boxes) else codes
    return ReconstructedScene(list(boxes), codes, points, instance_ids)
