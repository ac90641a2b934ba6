"""Spatial relation graphs over box proposals.

Boxes live in normalized image coordinates (y grows downward).  Every
ordered pair of proposals gets a directed relation label from a fixed
rule cascade: containment, coverage, heavy overlap, a connectivity cut,
and finally one of eight 45-degree direction sectors.  Variants change
the label granularity (11 types, 7 types, or raw geometric "soft" edge
vectors) and the connectivity rule (center distance, per-axis distance,
or nearest-neighbor out-degree).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Relation labels.  1..8 walk counter-clockwise starting at "right".
NO_RELATION = 0
RIGHT = 1
TOP_RIGHT = 2
TOP = 3
TOP_LEFT = 4
LEFT = 5
BOTTOM_LEFT = 6
BOTTOM = 7
BOTTOM_RIGHT = 8
INSIDE = 9
COVER = 10
OVERLAP = 11

LABEL_NAMES = (
    "none", "right", "top-right", "top", "top-left", "left",
    "bottom-left", "bottom", "bottom-right", "inside", "cover", "overlap",
)

# 7-type design: the four diagonal sectors merge into their
# counter-clockwise neighbor (same direction the sector tie-break leans).
T7_RIGHT, T7_TOP, T7_LEFT, T7_BOTTOM, T7_INSIDE, T7_COVER, T7_OVERLAP = 1, 2, 3, 4, 5, 6, 7
TYPE7_FROM_TYPE11 = {
    NO_RELATION: 0,
    RIGHT: T7_RIGHT, TOP_RIGHT: T7_TOP, TOP: T7_TOP, TOP_LEFT: T7_LEFT,
    LEFT: T7_LEFT, BOTTOM_LEFT: T7_BOTTOM, BOTTOM: T7_BOTTOM, BOTTOM_RIGHT: T7_RIGHT,
    INSIDE: T7_INSIDE, COVER: T7_COVER, OVERLAP: T7_OVERLAP,
}

LABEL_NAMES_TYPE7 = ("none", "right", "top", "left", "bottom", "inside", "cover", "overlap")

_CONTAIN_TOL = 1e-9
_DIAGONAL = math.sqrt(2.0)


@dataclass(frozen=True)
class Proposal:
    """A candidate box: normalized center/extent plus a visual feature."""

    center_x: float
    center_y: float
    width: float
    height: float
    visual_feature: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not (self.width > 0.0 and self.height > 0.0):
            raise ValueError(
                f"degenerate box: width={self.width}, height={self.height} (must be > 0)")
        object.__setattr__(
            self, "visual_feature", np.asarray(self.visual_feature, dtype=np.float64))

    @property
    def box(self):
        return (self.center_x, self.center_y, self.width, self.height)

    def corners(self):
        """(x0, y0, x1, y1) with x0 < x1, y0 < y1."""
        hw, hh = self.width / 2.0, self.height / 2.0
        return (self.center_x - hw, self.center_y - hh,
                self.center_x + hw, self.center_y + hh)


def within_image_bounds(p: Proposal, tol: float = 0.05) -> bool:
    """True when the box stays inside [-tol, 1+tol] on both axes."""
    x0, y0, x1, y1 = p.corners()
    return x0 >= -tol and y0 >= -tol and x1 <= 1.0 + tol and y1 <= 1.0 + tol


def iou(a: Proposal, b: Proposal) -> float:
    """Intersection over union of two boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def spatial_feature(p: Proposal) -> np.ndarray:
    """[x, y, w, h, w*h] — the per-vertex geometry vector."""
    return np.array([p.center_x, p.center_y, p.width, p.height,
                     p.width * p.height], dtype=np.float64)


def soft_edge_vector(a: Proposal, b: Proposal) -> np.ndarray:
    """Relative-location encoding of edge a->b.

    Top-left and bottom-right corner offsets normalized by the source
    box extent, plus the area ratio.
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return np.array([
        (bx0 - ax0) / a.width,
        (by0 - ay0) / a.height,
        (bx1 - ax1) / a.width,
        (by1 - ay1) / a.height,
        (b.width * b.height) / (a.width * a.height),
    ], dtype=np.float64)


@dataclass(frozen=True)
class GraphVariantConfig:
    """Edge design + connectivity rule with its single parameter."""

    edge_design: str = "type11"          # type11 | type7 | soft
    connectivity: str = "center-dis"     # center-dis | axis-dis | edge-num
    param: float = 0.5

    def __post_init__(self):
        if self.edge_design not in ("type11", "type7", "soft"):
            raise ValueError(f"unknown edge design {self.edge_design!r}")
        if self.connectivity == "center-dis":
            if not (0.0 < self.param <= _DIAGONAL):
                raise ValueError(f"center-dis threshold {self.param} outside (0, sqrt(2)]")
        elif self.connectivity == "axis-dis":
            if not (0.0 < self.param <= 1.0):
                raise ValueError(f"axis-dis fraction {self.param} outside (0, 1]")
        elif self.connectivity == "edge-num":
            if int(self.param) != self.param or self.param < 1:
                raise ValueError(f"edge-num degree {self.param} must be an integer >= 1")
        else:
            raise ValueError(f"unknown connectivity {self.connectivity!r}")

    @property
    def num_edge_types(self):
        """Distinct nonzero labels under this design (soft edges are untyped)."""
        return {"type11": 11, "type7": 7, "soft": 0}[self.edge_design]

    def tag(self) -> str:
        p = int(self.param) if self.connectivity == "edge-num" else self.param
        return f"{self.edge_design}+{self.connectivity}={p}"

    @classmethod
    def from_tag(cls, tag: str) -> "GraphVariantConfig":
        """Parse "type11+center-dis=0.5" style strings (CLI --graph-variant)."""
        try:
            design, rest = tag.split("+", 1)
            connectivity, raw = rest.split("=", 1)
            return cls(design.strip(), connectivity.strip(), float(raw))
        except ValueError as exc:
            if "unknown" in str(exc) or "outside" in str(exc) or "must be" in str(exc):
                raise
            raise ValueError(
                f"cannot parse graph variant {tag!r}; expected design+connectivity=param") from None


def _includes(a, b):
    """Strict containment of b in a, tolerant on touching edges.

    Identical boxes (within tolerance on all four sides) do not count:
    they fall through to the IoU stage and come out as symmetric overlap.
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    t = _CONTAIN_TOL
    if not (ax0 <= bx0 + t and ay0 <= by0 + t and bx1 <= ax1 + t and by1 <= ay1 + t):
        return False
    identical = (abs(ax0 - bx0) <= t and abs(ay0 - by0) <= t
                 and abs(ax1 - bx1) <= t and abs(ay1 - by1) <= t)
    return not identical


def _connected(a, b, cfg):
    """Distance cut for the directional stage (edge-num is graph-level)."""
    if cfg.connectivity == "center-dis":
        d = math.hypot(a.center_x - b.center_x, a.center_y - b.center_y)
        return d / _DIAGONAL <= cfg.param
    if cfg.connectivity == "axis-dis":
        return (abs(a.center_x - b.center_x) < cfg.param
                and abs(a.center_y - b.center_y) < cfg.param)
    return True  # edge-num prunes whole graphs, not pairs


def _sector_label(a, b):
    """Directional label of a->b from the angle of (x_a - x_b, y_b - y_a).

    y is negated because image y grows downward while sectors follow the
    usual math orientation.  Sectors are 45 degrees wide, centered on
    0, 45, ..., 315; a boundary angle joins the counter-clockwise sector.
    """
    theta = math.degrees(math.atan2(-(a.center_y - b.center_y), a.center_x - b.center_x))
    return 1 + int(((theta + 22.5) % 360.0) // 45.0)


def classify_spatial_relation(a: Proposal, b: Proposal, cfg: GraphVariantConfig | None = None) -> int:
    """Label the directed pair (a, b) by the rule cascade.

    Containment, coverage and heavy overlap resolve before any
    connectivity cut; only directional labels can be severed to 0.
    Under edge-num connectivity no pairwise cut exists (the prune happens
    in build_spatial_graph), so this function applies none.
    """
    cfg = cfg or GraphVariantConfig()
    if cfg.edge_design == "soft":
        raise ValueError("soft edge design has no relation labels; use build_spatial_graph")
    if _includes(a, b):
        label = INSIDE
    elif _includes(b, a):
        label = COVER
    elif iou(a, b) > 0.5:
        label = OVERLAP
    elif not _connected(a, b, cfg):
        label = NO_RELATION
    else:
        label = _sector_label(a, b)
    if cfg.edge_design == "type7":
        return TYPE7_FROM_TYPE11[label]
    return label


@dataclass
class SceneGraph:
    """Directed relation graph over K proposals.

    ``edge_labels`` is the K×K integer label matrix (0 = no edge).  For
    the soft design the labels stay 0 and geometry moves to
    ``edge_features`` (K×K×5) masked by ``edge_mask``.  Semantic edge
    features, when ingested, sit in ``semantic_edge_features`` (K×K×D_r).
    """

    proposals: list
    edge_labels: np.ndarray
    spatial_features: np.ndarray
    edge_design: str = "type11"
    edge_features: np.ndarray | None = None
    edge_mask: np.ndarray | None = None
    semantic_edge_features: np.ndarray | None = None

    @property
    def num_proposals(self):
        return len(self.proposals)

    def visual_features(self) -> np.ndarray:
        return np.stack([p.visual_feature for p in self.proposals])


def _edge_num_keep(proposals, k):
    """keep[i][j] True when j is among i's k nearest others (ties: lower j)."""
    n = len(proposals)
    centers = np.array([[p.center_x, p.center_y] for p in proposals])
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        d = np.hypot(centers[:, 0] - centers[i, 0], centers[:, 1] - centers[i, 1])
        order = sorted(j for j in range(n) if j != i)
        order.sort(key=lambda j: d[j])
        for j in order[:k]:
            keep[i, j] = True
    return keep


def build_spatial_graph(proposals, cfg: GraphVariantConfig | None = None) -> SceneGraph:
    """Classify all ordered pairs into a SceneGraph under ``cfg``."""
    cfg = cfg or GraphVariantConfig()
    k = len(proposals)
    if k == 0:
        raise ValueError("cannot build a graph over zero proposals")
    feats = np.stack([spatial_feature(p) for p in proposals])
    labels = np.zeros((k, k), dtype=np.int64)
    if cfg.edge_design == "soft":
        edge_feats = np.zeros((k, k, 5))
        mask = np.zeros((k, k), dtype=bool)
        for i in range(k):
            for j in range(k):
                if i != j and _connected(proposals[i], proposals[j], cfg):
                    mask[i, j] = True
                    edge_feats[i, j] = soft_edge_vector(proposals[i], proposals[j])
        if cfg.connectivity == "edge-num":
            keep = _edge_num_keep(proposals, int(cfg.param))
            mask &= keep
            edge_feats[~mask] = 0.0
        return SceneGraph(list(proposals), labels, feats, "soft",
                          edge_features=edge_feats, edge_mask=mask)
    for i in range(k):
        for j in range(k):
            if i != j:
                labels[i, j] = classify_spatial_relation(proposals[i], proposals[j], cfg)
    if cfg.connectivity == "edge-num":
        keep = _edge_num_keep(proposals, int(cfg.param))
        labels[~keep] = NO_RELATION
        np.fill_diagonal(labels, NO_RELATION)
    return SceneGraph(list(proposals), labels, feats, cfg.edge_design)


def ingest_semantic_edges(detections, relation_embedding, num_proposals) -> np.ndarray:
    """Probability-weighted relation embeddings as a K×K×D_r tensor.

    ``detections`` are (i, j, probs) triples from an external
    relationship detector; absent pairs stay zero (no edge).
    """
    emb = np.asarray(relation_embedding, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"relation embedding must be 2-D, got shape {emb.shape}")
    k = int(num_proposals)
    out = np.zeros((k, k, emb.shape[1]))
    seen = set()
    for i, j, probs in detections:
        if not (0 <= i < k and 0 <= j < k):
            raise ValueError(f"semantic edge ({i},{j}) out of range for K={k}")
        if i == j:
            raise ValueError(f"semantic edge ({i},{j}) is a self-loop")
        if (i, j) in seen:
            raise ValueError(f"duplicate semantic edge ({i},{j})")
        seen.add((i, j))
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (emb.shape[0],):
            raise ValueError(
                f"probability vector for ({i},{j}) has length {p.size}, expected {emb.shape[0]}")
        if (p < 0.0).any() or (p > 1.0).any() or p.sum() > 1.0 + 1e-6:
            raise ValueError(f"invalid probability vector for edge ({i},{j})")
        out[i, j] = p @ emb
    return out


def load_semantic_detections(path):
    """Read (i, j, probs) triples from a JSONL file."""
    detections = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                detections.append((int(rec["i"]), int(rec["j"]), rec["probs"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed semantic detection: {exc}") from None
    return detections


def proposals_to_json(proposals):
    return [{"box": [p.center_x, p.center_y, p.width, p.height],
             "feature": p.visual_feature.tolist()} for p in proposals]


def proposals_from_json(records):
    out = []
    for rec in records:
        x, y, w, h = rec["box"]
        out.append(Proposal(x, y, w, h, np.asarray(rec.get("feature", []), dtype=np.float64)))
    return out


def scene_graph_to_json(graph: SceneGraph) -> dict:
    doc = {
        "proposals": proposals_to_json(graph.proposals),
        "edges": graph.edge_labels.tolist(),
        "edge_design": graph.edge_design,
    }
    if graph.edge_features is not None:
        doc["edge_features"] = graph.edge_features.tolist()
        doc["edge_mask"] = graph.edge_mask.astype(int).tolist()
    return doc


def scene_graph_from_json(doc: dict) -> SceneGraph:
    proposals = proposals_from_json(doc["proposals"])
    labels = np.asarray(doc["edges"], dtype=np.int64)
    k = len(proposals)
    if labels.shape != (k, k):
        raise ValueError(f"edge matrix shape {labels.shape} does not match K={k}")
    feats = np.stack([spatial_feature(p) for p in proposals])
    graph = SceneGraph(proposals, labels, feats, doc.get("edge_design", "type11"))
    if "edge_features" in doc:
        graph.edge_features = np.asarray(doc["edge_features"], dtype=np.float64)
        graph.edge_mask = np.asarray(doc["edge_mask"], dtype=bool)
    return graph
