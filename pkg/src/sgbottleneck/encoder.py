"""Scene-graph encoder: PointNets, triplet message passing and bottleneck heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .nn import MLP, Linear, Module, ModuleList
from .preprocess import Batch


@dataclass
class FeatureGraph:
    node_features: Tensor  # [N, d]
    edge_features: Tensor  # [E, d]
    edges: np.ndarray  # [E, 2]

    def __post_init__(self):
        n = self.node_features.shape[0]
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError("edge endpoint references a missing node")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-edges are not allowed")
        if self.edge_features.shape[0] != len(self.edges):
            raise ValueError("edge feature count does not match edge list")


@dataclass
class BottleneckOutput:
    node_logits: Tensor
    node_distributions: Tensor  # softmax rows
    edge_logits: Tensor
    edge_probabilities: Tensor  # per-class sigmoid
    pre_head_node: Tensor
    pre_head_edge: Tensor
    edges: np.ndarray


class PointNet(Module):
    """Shared per-point MLP followed by a max pool over each set."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList(Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, sets) -> Tensor:
        """``sets`` is [S, P, in] (array or Tensor); returns [S, out]."""
        x = ag.as_tensor(sets)
        s, p, c = x.shape
        if p < 1:
            raise ag.ShapeError("point sets must be non-empty")
        h = ag.reshape(x, (s * p, c))
        n = len(self.layers)
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if k < n - 1:
                h = ag.relu(h)
        return ag.reduce_max(ag.reshape(h, (s, p, h.shape[1])), axis=1)


def pointnet_object(net: PointNet, points) -> Tensor:
    x = ag.as_tensor(points)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ag.ShapeError("pointnet_object needs a non-empty [p, 3] set")
    return ag.reshape(net(ag.reshape(x, (1,) + x.shape)), (-1,))


def check_pair_mask(mask: np.ndarray) -> None:
    if not np.all(np.isin(mask, (0, 1, 2))):
        raise ValueError("pair mask values must be 0, 1 or 2")


def pointnet_pair(net: PointNet, points, mask) -> Tensor:
    mask = np.asarray(mask)
    check_pair_mask(mask)
    x = ag.concat([ag.as_tensor(points), Tensor(mask.reshape(-1, 1).astype(float))], axis=1)
    return ag.reshape(net(ag.reshape(x, (1,) + x.shape)), (-1,))


class TripletGCNLayer(Module):
    """One round of subject-predicate-object message passing.

    g1 maps each concatenated triplet to (subject message, new edge feature,
    object message). Every node averages the messages from all its incident
    edges and adds g2 of that average to its feature. Isolated nodes are
    passed through unchanged.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.g1 = Linear(3 * dim, 3 * dim, rng)
        self.g2_hidden = Linear(dim, dim, rng)
        self.g2_out = Linear(dim, dim, rng)

    def messages(self, graph: FeatureGraph):
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        trip = ag.concat([ag.gather_rows(graph.node_features, src), graph.edge_features,
                          ag.gather_rows(graph.node_features, dst)], axis=1)
        out = ag.relu(self.g1(trip))
        d = self.dim
        return out[:, :d], out[:, d:2 * d], out[:, 2 * d:]

    def aggregate(self, graph: FeatureGraph, psi_subj: Tensor, psi_obj: Tensor):
        n = graph.node_features.shape[0]
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        counts = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
        total = ag.scatter_add_rows(psi_subj, src, n) + ag.scatter_add_rows(psi_obj, dst, n)
        rho = total * (1.0 / np.maximum(counts, 1))[:, None]
        return rho, counts

    def forward(self, graph: FeatureGraph) -> FeatureGraph:
        if len(graph.edges) == 0:
            return graph
        psi_s, edge_new, psi_o = self.messages(graph)
        rho, counts = self.aggregate(graph, psi_s, psi_o)
        update = self.g2_out(ag.relu(self.g2_hidden(rho)))
        connected = (counts > 0).astype(float)[:, None]
        nodes = graph.node_features + update * connected
        return FeatureGraph(nodes, edge_new, graph.edges)


def gcn_layer(graph: FeatureGraph, layer: TripletGCNLayer) -> FeatureGraph:
    return layer(graph)


class SceneGraphEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_gcn: bool = True):
        super().__init__()
        d = cfg.feature_dim
        self.cfg = cfg
        self.use_gcn = use_gcn
        self.object_net = PointNet([3, *cfg.point_hidden, d], rng)
        self.pair_net = PointNet([4, *cfg.point_hidden, d], rng)
        self.box_encoder = Linear(7, cfg.box_embed_dim, rng)
        self.node_projection = Linear(d + cfg.box_embed_dim, d, rng)
        self.gcn = ModuleList(TripletGCNLayer(d, rng) for _ in range(cfg.encoder_gcn_layers if use_gcn else 0))
        self.node_head = MLP([d, d, d, cfg.num_classes], rng)
        self.edge_head = MLP([d, d, d, cfg.num_predicates], rng)

    def encode_boxes(self, boxes: np.ndarray) -> Tensor:
        return self.box_encoder(Tensor(np.asarray(boxes, dtype=np.float64).reshape(-1, 7)))

    def initial_graph(self, batch: Batch) -> FeatureGraph:
        check_pair_mask(batch.pair_points[:, :, 3])
        obj = self.object_net(batch.obj_points)
        nodes = self.node_projection(ag.concat([obj, self.encode_boxes(batch.boxes)], axis=1))
        if len(batch.edges):
            edges = self.pair_net(batch.pair_points)
        else:
            edges = Tensor(np.zeros((0, self.cfg.feature_dim)))
        return FeatureGraph(nodes, edges, batch.edges)

    def forward(self, batch: Batch) -> BottleneckOutput:
        graph = self.initial_graph(batch)
        for layer in self.gcn:
            graph = layer(graph)
        node_logits = self.node_head(graph.node_features)
        if len(batch.edges):
            edge_logits = self.edge_head(graph.edge_features)
        else:
            edge_logits = Tensor(np.zeros((0, self.cfg.num_predicates)))
        return BottleneckOutput(
            node_logits, ag.softmax_rows(node_logits),
            edge_logits, ag.sigmoid(edge_logits),
            graph.node_features, graph.edge_features, batch.edges,
        )
