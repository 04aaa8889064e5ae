"""Recall metrics, class-frequency splits and relationship preservation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import FrozenShapeCodec
from .generator import SHAPE_PARTS, sample_surface
from .scene import PREDICATES, OrientedBox, RuleConfig, Scene, relation_rules

SPLITS = ("all", "head", "body", "tail")


def _ranks_of(scores: np.ndarray, picks: np.ndarray) -> np.ndarray:
    """0-based rank of column ``picks[r]`` in each row; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    rows = np.arange(len(picks))
    s = scores[rows, picks][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > s) | ((scores == s) & (cols < picks[:, None]))
    return better.sum(axis=1)


def object_hits(dist: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64)
    if len(gt) == 0:
        return np.zeros(0, dtype=bool)
    return _ranks_of(dist, gt) < k


def object_recall_at_k(dist, gt, k: int) -> float | None:
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = object_hits(dist, gt, k)
    return float(hits.mean()) if len(hits) else None


def _gt_pairs(edge_targets) -> tuple[np.ndarray, np.ndarray]:
    """(edge index, predicate) for every positive entry of a multi-hot matrix or set list."""
    if isinstance(edge_targets, np.ndarray) and edge_targets.ndim == 2:
        e, p = np.nonzero(edge_targets > 0.5)
        return e, p
    pairs = [(e, p) for e, s in enumerate(edge_targets) for p in sorted(s)]
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.array(pairs, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def predicate_hits(probs, edge_targets, k: int) -> tuple[np.ndarray, np.ndarray]:
    e, p = _gt_pairs(edge_targets)
    if len(e) == 0:
        return np.zeros(0, dtype=bool), p
    probs = np.asarray(probs, dtype=np.float64)
    return _ranks_of(probs[e], p) < k, p


def predicate_recall_at_k(probs, edge_targets, k: int) -> float | None:
    if k < 1:
        raise ValueError("k must be at least 1")
    hits, _ = predicate_hits(probs, edge_targets, k)
    return float(hits.mean()) if len(hits) else None


def triplet_scores(node_i: np.ndarray, edge: np.ndarray, node_j: np.ndarray) -> np.ndarray:
    """Scores [C_obj, C_pred, C_obj] for one ordered pair."""
    return node_i[:, None, None] * edge[None, :, None] * node_j[None, None, :]


def relationship_hits(node_dist, edge_probs, edges, node_classes, edge_targets, k: int,
                      scope: str = "pair") -> tuple[np.ndarray, np.ndarray]:
    """Hit flag and predicate of every ground-truth triplet.

    ``scope="pair"`` ranks each triplet among its own pair's candidates;
    ``scope="scene"`` ranks among every candidate of the scene.
    """
    node_dist = np.asarray(node_dist, dtype=np.float64)
    edge_probs = np.asarray(edge_probs, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    node_classes = np.asarray(node_classes, dtype=np.int64)
    e_idx, p_idx = _gt_pairs(edge_targets)
    if len(e_idx) == 0:
        return np.zeros(0, dtype=bool), p_idx
    c_obj, c_pred = node_dist.shape[1], edge_probs.shape[1]
    per_pair = c_obj * c_pred * c_obj
    flat_gt = (node_classes[edges[e_idx, 0]] * c_pred + p_idx) * c_obj + node_classes[edges[e_idx, 1]]
    if scope == "pair":
        hits = np.empty(len(e_idx), dtype=bool)
        for r, (e, f) in enumerate(zip(e_idx, flat_gt)):
            i, j = edges[e]
            s = triplet_scores(node_dist[i], edge_probs[e], node_dist[j]).reshape(-1)
            rank = np.count_nonzero(s > s[f]) + np.count_nonzero(s[:f] == s[f])
            hits[r] = rank < k
        return hits, p_idx
    if scope == "scene":
        allscores = np.stack([triplet_scores(node_dist[i], edge_probs[e], node_dist[j]).reshape(-1)
                              for e, (i, j) in enumerate(edges)]).reshape(-1)
        pos = e_idx * per_pair + flat_gt
        hits = np.empty(len(e_idx), dtype=bool)
        for r, f in enumerate(pos):
            rank = np.count_nonzero(allscores > allscores[f]) + np.count_nonzero(allscores[:f] == allscores[f])
            hits[r] = rank < k
        return hits, p_idx
    raise ValueError(f"unknown ranking scope {scope!r}")


def relationship_recall_at_k(node_dist, edge_probs, edges, node_classes, edge_targets, k: int,
                             scope: str = "pair") -> float | None:
    if k < 1:
        raise ValueError("k must be at least 1")
    hits, _ = relationship_hits(node_dist, edge_probs, edges, node_classes, edge_targets, k, scope)
    return float(hits.mean()) if len(hits) else None


# ---------------------------------------------------------------------------
# class-wise recall


@dataclass
class ClassSplit:
    head: tuple[int, ...]
    body: tuple[int, ...]
    tail: tuple[int, ...]
    frequency: tuple[int, ...]

    def members(self, split: str) -> tuple[int, ...]:
        if split == "all":
            return self.head + self.body + self.tail
        return getattr(self, split)


def build_class_split(frequency) -> ClassSplit:
    """Equal-count frequency tertiles; the remainder goes to head first, then body."""
    freq = np.asarray(frequency, dtype=np.int64)
    if freq.size == 0:
        raise ValueError("frequency table is empty")
    present = [c for c in range(len(freq)) if freq[c] > 0]
    order = sorted(present, key=lambda c: (-freq[c], c))
    n = len(order)
    base, rem = divmod(n, 3)
    n_head = base + (rem >= 1)
    n_body = base + (rem >= 2)
    return ClassSplit(tuple(order[:n_head]), tuple(order[n_head:n_head + n_body]),
                      tuple(order[n_head + n_body:]), tuple(int(f) for f in freq))


def per_class_recall(hits: np.ndarray, classes: np.ndarray) -> dict[int, float]:
    """Recall for every class with at least one ground-truth item."""
    hits = np.asarray(hits, dtype=bool)
    classes = np.asarray(classes, dtype=np.int64)
    return {int(c): float(hits[classes == c].mean()) for c in np.unique(classes)}


def mean_recall(per_class: dict[int, float], split: ClassSplit) -> dict[str, float | None]:
    """Unweighted class means per split; classes without ground truth are left out."""
    out = {}
    for name in SPLITS:
        vals = [per_class[c] for c in split.members(name) if c in per_class]
        out[name] = float(np.mean(vals)) if vals else None
    return out


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    object_recall: dict[int, float | None] = field(default_factory=dict)
    predicate_recall: dict[int, float | None] = field(default_factory=dict)
    relationship_recall: dict[int, float | None] = field(default_factory=dict)
    mean_recall: dict[tuple[str, int, str], float | None] = field(default_factory=dict)
    sample_count: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, str, float | None, int]]:
        rows = []
        for name, table in (("object_recall", self.object_recall),
                            ("predicate_recall", self.predicate_recall),
                            ("relationship_recall", self.relationship_recall)):
            target = name.split("_")[0]
            for k in sorted(table):
                rows.append((name, k, "all", table[k], self.counts.get(target, 0)))
        for (target, k, split) in sorted(self.mean_recall, key=lambda t: (t[0], t[1], SPLITS.index(t[2]))):
            rows.append((f"mean_recall.{target}", k, split, self.mean_recall[(target, k, split)],
                         self.counts.get(f"{target}_classes.{split}", 0)))
        return rows

    def dumps(self) -> str:
        lines = ["SGMETRICS v1", f"# samples {self.sample_count}", "# name k split value count"]
        for name, k, split, value, count in self.rows():
            v = "undefined" if value is None else format(value, ".12g")
            lines.append(f"{name} {k} {split} {v} {count}")
        return "\n".join(lines) + "\n"

    def get(self, name: str, k: int, split: str = "all") -> float | None:
        for n, kk, s, v, _ in self.rows():
            if (n, kk, s) == (name, k, split):
                return v
        raise KeyError((name, k, split))


class MetricFormatError(ValueError):
    pass


def parse_metrics(text: str, source: str = "<string>") -> dict[tuple[str, int, str], float | None]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "SGMETRICS v1":
        raise MetricFormatError(f"{source}: missing 'SGMETRICS v1' header")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MetricFormatError(f"{source}:{lineno}: expected 5 fields, got {len(parts)}")
        name, k, split, value, _ = parts
        try:
            out[(name, int(k), split)] = None if value == "undefined" else float(value)
        except ValueError:
            raise MetricFormatError(f"{source}:{lineno}: bad number in {line!r}") from None
    return out


OBJECT_K = (1, 3, 5)
PREDICATE_K = (1, 2, 3)
RELATIONSHIP_K = (1, 10, 50)


def evaluate_predictions(predictions, samples, object_split: ClassSplit, predicate_split: ClassSplit,
                         object_k=OBJECT_K, predicate_k=PREDICATE_K, relationship_k=RELATIONSHIP_K,
                         scope: str = "pair") -> MetricReport:
    """Metrics over per-scene (node distributions, edge probabilities)."""
    if len(predictions) != len(samples):
        raise ValueError("one prediction per sample is required")
    rep = MetricReport(sample_count=len(samples))
    obj_gt = np.concatenate([s.node_classes for s in samples]) if samples else np.zeros(0, int)
    n_obj_triples = sum(int(s.edge_targets.sum()) for s in samples)
    rep.counts = {"object": len(obj_gt), "predicate": n_obj_triples, "relationship": n_obj_triples}
    for k in object_k:
        hits = np.concatenate([object_hits(nd, s.node_classes, k) for (nd, _), s in zip(predictions, samples)])
        rep.object_recall[k] = float(hits.mean()) if len(hits) else None
        for split, v in mean_recall(per_class_recall(hits, obj_gt), object_split).items():
            rep.mean_recall[("object", k, split)] = v
    for k in predicate_k:
        hits, cls = [], []
        for (_, ep), s in zip(predictions, samples):
            h, p = predicate_hits(ep, s.edge_targets, k)
            hits.append(h)
            cls.append(p)
        hits, cls = np.concatenate(hits), np.concatenate(cls)
        rep.predicate_recall[k] = float(hits.mean()) if len(hits) else None
        for split, v in mean_recall(per_class_recall(hits, cls), predicate_split).items():
            rep.mean_recall[("predicate", k, split)] = v
    for k in relationship_k:
        hits = np.concatenate([relationship_hits(nd, ep, s.edges, s.node_classes, s.edge_targets, k, scope)[0]
                               for (nd, ep), s in zip(predictions, samples)])
        rep.relationship_recall[k] = float(hits.mean()) if len(hits) else None
    for target, split in (("object", object_split), ("predicate", predicate_split)):
        for name in SPLITS:
            rep.counts[f"{target}_classes.{name}"] = len(split.members(name))
    return rep


def class_frequencies(samples, num_classes: int, num_predicates: int) -> tuple[np.ndarray, np.ndarray]:
    obj = np.zeros(num_classes, dtype=np.int64)
    pred = np.zeros(num_predicates, dtype=np.int64)
    for s in samples:
        obj += np.bincount(s.node_classes, minlength=num_classes)
        pred += s.edge_targets.sum(axis=0).astype(np.int64)
    return obj, pred


# ---------------------------------------------------------------------------
# relationship preservation


@dataclass
class FamilyBank:
    """Reference shape codes with known families for nearest-neighbour lookup."""
    codes: np.ndarray  # [m, code_dim]
    families: list[str]

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=np.float64))
        if len(self.codes) != len(self.families) or not len(self.families):
            raise ValueError("a family bank needs one family per reference code")


def family_prototypes(codec: FrozenShapeCodec, points: int = 256, seed: int = 0) -> FamilyBank:
    """Codec code of each shape family sampled in the unit frame."""
    rng = np.random.default_rng(seed)
    fams = list(SHAPE_PARTS)
    return FamilyBank(np.stack([codec.encode(sample_surface(f, (1.0, 1.0, 1.0), points, rng)) for f in fams]),
                      fams)


def family_bank(samples, scenes) -> FamilyBank | None:
    """Codes of labelled training objects; None when the scenes carry no families."""
    codes, fams = [], []
    for sample, scene in zip(samples, scenes):
        if not scene.families:
            return None
        codes.append(sample.shape_codes)
        fams += [scene.families[i] for i in sample.instances]
    return FamilyBank(np.vstack(codes), fams) if fams else None


def nearest_family(code: np.ndarray, bank: FamilyBank) -> str:
    # prototypes sit at unit size while real objects do not, so a bank of
    # actual training codes separates families far better when available
    dists = np.abs(bank.codes - np.asarray(code)).mean(axis=1)
    return bank.families[int(np.argmin(dists))]


@dataclass
class PreservationReport:
    hits: dict[str, int]
    totals: dict[str, int]

    def accuracy(self, predicate: str | None = None) -> float | None:
        if predicate is None:
            t = sum(self.totals.values())
            return sum(self.hits.values()) / t if t else None
        t = self.totals.get(predicate, 0)
        return self.hits[predicate] / t if t else None

    @property
    def total(self) -> float | None:
        return self.accuracy()

    def merge(self, other: "PreservationReport") -> "PreservationReport":
        keys = list(dict.fromkeys([*self.totals, *other.totals]))
        return PreservationReport({k: self.hits.get(k, 0) + other.hits.get(k, 0) for k in keys},
                                  {k: self.totals.get(k, 0) + other.totals.get(k, 0) for k in keys})

    def dumps(self) -> str:
        lines = ["SGPRESERVE v1", "# predicate preserved total accuracy"]
        for k in self.totals:
            acc = self.accuracy(k)
            lines.append(f"{k} {self.hits[k]} {self.totals[k]} {'undefined' if acc is None else format(acc, '.12g')}")
        acc = self.total
        lines.append(f"overall {sum(self.hits.values())} {sum(self.totals.values())} "
                     f"{'undefined' if acc is None else format(acc, '.12g')}")
        return "\n".join(lines) + "\n"


def preservation_accuracy(original: Scene, boxes: list[OrientedBox], families: list[str] | None = None,
                          predicates=None, names=PREDICATES,
                          rules: RuleConfig = RuleConfig()) -> PreservationReport:
    """Fraction of ground-truth rule predicates that still hold between reconstructed boxes.

    ``boxes`` follow ``original.instances`` order. Without stored labels the
    ground truth is the rule evaluation on the original boxes.
    """
    inst = original.instances
    if len(boxes) != len(inst):
        raise ValueError("need one reconstructed box per original object")
    check = tuple(predicates) if predicates is not None else tuple(names)
    hits = {p: 0 for p in check}
    totals = {p: 0 for p in check}
    fam_o = original.families or {}
    for a in range(len(inst)):
        for b in range(len(inst)):
            if a == b:
                continue
            ia, ib = inst[a], inst[b]
            if original.labels is not None:
                gt = {names[p] for p in original.labels.edge_predicates.get((ia, ib), ())}
            else:
                gt = relation_rules(original.boxes[ia], original.boxes[ib], fam_o.get(ia), fam_o.get(ib), rules)
            gt &= set(check)
            if not gt:
                continue
            fa = families[a] if families else None
            fb = families[b] if families else None
            now = relation_rules(boxes[a], boxes[b], fa, fb, rules)
            for p in gt:
                totals[p] += 1
                hits[p] += p in now
    return PreservationReport(hits, totals)
