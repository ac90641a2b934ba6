"""Synthetic relational scenes with templated referring expressions.

Objects sit on a jittered grid and carry color/shape/size attributes;
expressions name a target directly ("the red circle"), through one
relation ("the circle left of the blue square"), or through a chained
relation ("the circle left of the square above the triangle").  A
rule-based resolver re-derives the referent from the expression and the
boxes, so every emitted sample is verifiably unambiguous.

Chained (order-2) scenes are built in two flavors, half and half: in
both, a second mediator-shaped object makes the mediator category
ambiguous, and a second target-shaped object makes the target category
ambiguous.  In the "full decoy" flavor the extra target-shaped object
bears the same relation to the extra mediator AND mirrors the real
target's direct spatial relation to the anchor, so no single-hop view
(not even the anchor's own outgoing edge) separates the two candidates
and the referent is only identifiable by evidence two hops away; in
the "partial" flavor it relates to nothing relevant and one hop
suffices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene_graph import (BOTTOM, LEFT, RIGHT, TOP, GraphVariantConfig, Proposal,
                          classify_spatial_relation, within_image_bounds)

RELATIONS = ("right of", "above", "left of", "below")
SECTOR_BY_RELATION = {"right of": RIGHT, "above": TOP, "left of": LEFT, "below": BOTTOM}
INVERSE_RELATION = {"right of": "left of", "left of": "right of",
                    "above": "below", "below": "above"}
RELATION_TOKENS = {"right of": ("right", "of"), "above": ("above",),
                   "left of": ("left", "of"), "below": ("below",)}
# detector-style semantic categories, aligned with RELATIONS
SEMANTIC_CATEGORIES = ("right_of", "above", "left_of", "below")

_CLASSIFY_CFG = GraphVariantConfig()  # type11 + center-dis 0.5 throughout


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    grid: int = 5
    k_min: int = 4
    k_max: int = 8
    colors: tuple = ("red", "blue", "green", "yellow")
    shapes: tuple = ("circle", "square", "triangle", "star")
    sizes: tuple = (("small", 0.08), ("large", 0.12))
    relations: tuple = RELATIONS
    noise: float = 0.02
    num_scenes: int = 2500
    orders: tuple = (0, 1, 2)
    split: tuple = (0.8, 0.0, 0.2)
    seed: int = 0
    semantic_range: float = 0.35

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError(f"grid must be >= 2, got {self.grid}")
        if not (2 <= self.k_min <= self.k_max):
            raise ValueError(f"need 2 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")
        if self.k_max > self.grid * self.grid:
            raise ValueError(f"k_max {self.k_max} infeasible for a "
                             f"{self.grid}x{self.grid} grid")
        if len(self.colors) < 2 or len(self.shapes) < 2:
            raise ValueError("need at least 2 colors and 2 shapes")
        if not self.sizes:
            raise ValueError("need at least one size class")
        unknown = set(self.relations) - set(RELATIONS)
        if unknown:
            raise ValueError(f"unknown relations {sorted(unknown)}")
        if not self.orders or not set(self.orders) <= {0, 1, 2}:
            raise ValueError(f"orders must be a non-empty subset of {{0,1,2}}, "
                             f"got {self.orders}")
        if 2 in self.orders:
            if len(self.shapes) < 3:
                raise ValueError("chained expressions need >= 3 shapes")
            if self.k_max < 5:
                raise ValueError("chained expressions need k_max >= 5")
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ValueError(f"split must be three non-negative fractions, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be >= 1")

    @property
    def d_x(self):
        return len(self.colors) + len(self.shapes) + 4  # + size + (w, h, w*h)

    def to_json(self):
        return {"grid": self.grid, "k_min": self.k_min, "k_max": self.k_max,
                "colors": list(self.colors), "shapes": list(self.shapes),
                "sizes": [list(s) for s in self.sizes],
                "relations": list(self.relations), "noise": self.noise,
                "num_scenes": self.num_scenes, "orders": list(self.orders),
                "split": list(self.split), "seed": self.seed,
                "semantic_range": self.semantic_range}

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        for key in ("colors", "shapes", "relations", "orders", "split"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "sizes" in doc:
            doc["sizes"] = tuple((name, side) for name, side in doc["sizes"])
        return cls(**doc)


@dataclass
class Scene:
    proposals: list                  # Proposal per object
    attributes: list                 # (color, shape, size_name) per object
    semantic_edges: list             # (i, j, probs) detector-style one-hots


@dataclass
class ExpressionPlan:
    """Logical form of a templated expression."""

    order: int
    t_color: str | None
    t_shape: str
    rel1: str | None = None
    m_shape: str | None = None
    rel2: str | None = None
    a_color: str | None = None
    a_shape: str | None = None


@dataclass
class SampleRecord:
    scene_id: str
    proposals: list
    semantic_edges: list
    tokens: list
    tree: str
    gt_index: int
    order: int


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------

def _cell_center(cell, grid):
    return ((cell % grid + 0.5) / grid, (cell // grid + 0.5) / grid)


def _make_proposal(cell, side, grid, rng, feature=()):
    cx, cy = _cell_center(cell, grid)
    jitter = min(0.02, 0.5 / grid - side / 2.0 - 0.005)
    jitter = max(jitter, 0.0)
    dx, dy = rng.uniform(-jitter, jitter, size=2)
    return Proposal(cx + dx, cy + dy, side, side, np.asarray(feature, dtype=np.float64))


def _feature(color_idx, shape_idx, side, cfg, rng):
    vec = np.zeros(cfg.d_x)
    vec[color_idx] = 1.0
    vec[len(cfg.colors) + shape_idx] = 1.0
    base = len(cfg.colors) + len(cfg.shapes)
    vec[base:base + 4] = [side, side, side, side * side]
    return vec + rng.normal(0.0, cfg.noise, size=cfg.d_x)


def _semantic_edges(proposals, cfg):
    edges = []
    for i, a in enumerate(proposals):
        for j, b in enumerate(proposals):
            if i == j:
                continue
            dx = a.center_x - b.center_x
            dy = a.center_y - b.center_y
            if np.hypot(dx, dy) >= cfg.semantic_range:
                continue
            if abs(dx) >= abs(dy):
                cat = "right_of" if dx > 0 else "left_of"
            else:
                cat = "below" if dy > 0 else "above"
            probs = [0.0] * len(SEMANTIC_CATEGORIES)
            probs[SEMANTIC_CATEGORIES.index(cat)] = 1.0
            edges.append((i, j, probs))
    return edges


def _assemble_scene(objects, cfg, rng):
    """objects: list of (cell, color_idx, shape_idx, size_idx) -> Scene."""
    proposals = []
    attributes = []
    for cell, ci, si, zi in objects:
        size_name, side = cfg.sizes[zi]
        feat = _feature(ci, si, side, cfg, rng)
        proposals.append(_make_proposal(cell, side, cfg.grid, rng, feat))
        attributes.append((cfg.colors[ci], cfg.shapes[si], size_name))
    return Scene(proposals, attributes, _semantic_edges(proposals, cfg))


def generate_scene(cfg: GeneratorConfig, rng) -> Scene:
    """A random scene: K objects on distinct grid cells with random attributes."""
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    cells = rng.choice(cfg.grid * cfg.grid, size=k, replace=False)
    objects = [(int(cell), int(rng.integers(len(cfg.colors))),
                int(rng.integers(len(cfg.shapes))), int(rng.integers(len(cfg.sizes))))
               for cell in cells]
    return _assemble_scene(objects, cfg, rng)


# ---------------------------------------------------------------------------
# expressions: surface form, search, resolution
# ---------------------------------------------------------------------------

def _np_subtree(color, shape):
    if color is None:
        return f"(NP (DT the) (NN {shape}))"
    return f"(NP (DT the) (JJ {color}) (NN {shape}))"


def _pp_subtree(relation, inner):
    words = RELATION_TOKENS[relation]
    if len(words) == 2:
        return f"(PP (RB {words[0]}) (IN {words[1]}) {inner})"
    return f"(PP (IN {words[0]}) {inner})"


def realize_expression(plan: ExpressionPlan):
    """(tokens, bracketed tree) for a logical form."""
    def np_tokens(color, shape):
        return ["the"] + ([color] if color else []) + [shape]

    if plan.order == 0:
        return np_tokens(plan.t_color, plan.t_shape), _np_subtree(plan.t_color, plan.t_shape)
    if plan.order == 1:
        tokens = (np_tokens(plan.t_color, plan.t_shape) + list(RELATION_TOKENS[plan.rel1])
                  + np_tokens(plan.a_color, plan.a_shape))
        tree = (f"(NP {_np_subtree(plan.t_color, plan.t_shape)} "
                f"{_pp_subtree(plan.rel1, _np_subtree(plan.a_color, plan.a_shape))})")
        return tokens, tree
    tokens = (np_tokens(plan.t_color, plan.t_shape) + list(RELATION_TOKENS[plan.rel1])
              + np_tokens(None, plan.m_shape) + list(RELATION_TOKENS[plan.rel2])
              + np_tokens(plan.a_color, plan.a_shape))
    inner = (f"(NP {_np_subtree(None, plan.m_shape)} "
             f"{_pp_subtree(plan.rel2, _np_subtree(plan.a_color, plan.a_shape))})")
    tree = f"(NP {_np_subtree(plan.t_color, plan.t_shape)} {_pp_subtree(plan.rel1, inner)})"
    return tokens, tree


def _related(proposals, i, j, relation):
    return classify_spatial_relation(proposals[i], proposals[j],
                                     _CLASSIFY_CFG) == SECTOR_BY_RELATION[relation]


def resolve_plan(plan: ExpressionPlan, proposals, attributes):
    """Indices the expression's logical form picks out; [] when ill-formed.

    The "the X" template presumes a unique anchor and (for chains) a
    unique mediator; resolution fails to the empty set when that
    presumption breaks.
    """
    def match(color, shape):
        return [i for i, (c, s, _) in enumerate(attributes)
                if s == shape and (color is None or c == color)]

    targets = match(plan.t_color, plan.t_shape)
    if plan.order == 0:
        return sorted(targets)
    anchors = match(plan.a_color, plan.a_shape)
    if len(anchors) != 1:
        return []
    anchor = anchors[0]
    if plan.order == 1:
        return sorted(i for i in targets if _related(proposals, i, anchor, plan.rel1))
    mediators = [j for j in match(None, plan.m_shape)
                 if _related(proposals, j, anchor, plan.rel2)]
    if len(mediators) != 1:
        return []
    return sorted(i for i in targets if _related(proposals, i, mediators[0], plan.rel1))


def _decode_attributes(proposals, cfg):
    """Recover (color, shape, size) from noisy features by nearest prototype."""
    out = []
    nc, ns = len(cfg.colors), len(cfg.shapes)
    for p in proposals:
        f = p.visual_feature
        if f.shape[0] != cfg.d_x:
            raise ValueError(f"feature width {f.shape[0]} does not match generator d_x {cfg.d_x}")
        sides = np.array([side for _, side in cfg.sizes])
        out.append((cfg.colors[int(np.argmax(f[:nc]))],
                    cfg.shapes[int(np.argmax(f[nc:nc + ns]))],
                    cfg.sizes[int(np.argmin(np.abs(sides - f[nc + ns])))][0]))
    return out


def parse_expression_tokens(tokens, cfg):
    """Invert realize_expression: tokens -> ExpressionPlan."""
    rel_by_first = {words[0]: rel for rel, words in RELATION_TOKENS.items()}

    def read_np(pos):
        if pos >= len(tokens) or tokens[pos] != "the":
            raise ValueError(f"expected 'the' at token {pos}")
        pos += 1
        color = None
        if pos < len(tokens) and tokens[pos] in cfg.colors:
            color = tokens[pos]
            pos += 1
        if pos >= len(tokens) or tokens[pos] not in cfg.shapes:
            raise ValueError(f"expected a shape noun at token {pos}")
        return color, tokens[pos], pos + 1

    def read_rel(pos):
        rel = rel_by_first.get(tokens[pos]) if pos < len(tokens) else None
        if rel is None:
            raise ValueError(f"expected a relation at token {pos}")
        return rel, pos + len(RELATION_TOKENS[rel])

    t_color, t_shape, pos = read_np(0)
    if pos == len(tokens):
        return ExpressionPlan(0, t_color, t_shape)
    rel1, pos = read_rel(pos)
    b_color, b_shape, pos = read_np(pos)
    if pos == len(tokens):
        return ExpressionPlan(1, t_color, t_shape, rel1, a_color=b_color, a_shape=b_shape)
    rel2, pos = read_rel(pos)
    a_color, a_shape, pos = read_np(pos)
    if pos != len(tokens):
        raise ValueError(f"trailing tokens after position {pos}")
    if b_color is not None:
        raise ValueError("mediator noun phrases carry no color attribute")
    return ExpressionPlan(2, t_color, t_shape, rel1, m_shape=b_shape, rel2=rel2,
                          a_color=a_color, a_shape=a_shape)


def resolve_sample(tokens, proposals, cfg):
    """Rule-based referent resolution straight from a dataset record."""
    plan = parse_expression_tokens(tokens, cfg)
    return resolve_plan(plan, proposals, _decode_attributes(proposals, cfg))


def _candidate_plans(scene, target, order, relations):
    proposals, attrs = scene.proposals, scene.attributes
    t_color, t_shape, _ = attrs[target]
    plans = []
    if order == 0:
        plan = ExpressionPlan(0, t_color, t_shape)
        same_shape = sum(1 for _, s, _ in attrs if s == t_shape)
        if same_shape >= 2 and resolve_plan(plan, proposals, attrs) == [target]:
            plans.append(plan)
        return plans
    if sum(1 for _, s, _ in attrs if s == t_shape) < 2:
        return []  # relations must be necessary, not decorative
    if order == 1:
        for a, (a_color, a_shape, _) in enumerate(attrs):
            if a == target or a_shape == t_shape:
                continue
            for rel in relations:
                if not _related(proposals, target, a, rel):
                    continue
                plan = ExpressionPlan(1, None, t_shape, rel,
                                      a_color=a_color, a_shape=a_shape)
                if resolve_plan(plan, proposals, attrs) == [target]:
                    plans.append(plan)
        return plans
    for a, (_, a_shape, _) in enumerate(attrs):
        if a == target or a_shape == t_shape:
            continue
        for m, (_, m_shape, _) in enumerate(attrs):
            if m in (a, target) or m_shape in (t_shape, a_shape):
                continue
            if sum(1 for _, s, _ in attrs if s == m_shape) < 2:
                continue  # the mediator category must be ambiguous on its own
            for rel2 in relations:
                if not _related(proposals, m, a, rel2):
                    continue
                for rel1 in relations:
                    if not _related(proposals, target, m, rel1):
                        continue
                    plan = ExpressionPlan(2, None, t_shape, rel1, m_shape=m_shape,
                                          rel2=rel2, a_shape=a_shape)
                    if resolve_plan(plan, proposals, attrs) == [target]:
                        plans.append(plan)
    return plans


def generate_expression(scene: Scene, target: int, order: int, rng, relations=RELATIONS):
    """(tokens, tree, plan) uniquely picking out ``target``, or None.

    Searches the scene for relation/anchor choices under which the
    templated expression resolves to exactly the target, and samples one.
    """
    if not 0 <= target < len(scene.proposals):
        raise IndexError(f"target {target} out of range")
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    plans = _candidate_plans(scene, target, order, relations)
    if not plans:
        return None
    plan = plans[int(rng.integers(len(plans)))]
    tokens, tree = realize_expression(plan)
    return tokens, tree, plan


# ---------------------------------------------------------------------------
# guided construction: scenes built around a wanted expression structure
# ---------------------------------------------------------------------------

# Placement margins: positives sit well inside their 45-degree sector and
# well under the distance cut; negatives keep a moat past the boundary (or
# past the cut), so class membership never hinges on a borderline angle.
_ANGLE_IN = 15.0       # max degrees off the sector center for positives
_ANGLE_OUT = 30.0      # min degrees off the sector center for negatives
_RATIO_IN = 0.4        # max center-distance ratio for positives (cut at 0.5)
_RATIO_OUT = 0.55      # negatives beyond this ratio are severed anyway

_SECTOR_CENTER_DEG = {RIGHT: 0.0, TOP: 90.0, LEFT: 180.0, BOTTOM: 270.0}


def _pair_geometry(a, b):
    """(angle of a as seen from b in screen-flipped degrees, distance ratio)."""
    dx = a.center_x - b.center_x
    dy = a.center_y - b.center_y
    theta = np.degrees(np.arctan2(-dy, dx)) % 360.0
    return theta, np.hypot(dx, dy) / np.sqrt(2.0)


def _angle_gap(theta, center):
    return abs((theta - center + 180.0) % 360.0 - 180.0)


class _Builder:
    """Places objects one by one on final (jittered) geometry.

    Predicates evaluate against the boxes that will actually ship, so a
    relation established at placement time survives into the emitted
    sample; the resolver check downstream is a safety net, not a filter.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.free = list(range(cfg.grid * cfg.grid))
        self.boxes = []              # final Proposal geometry (no features yet)
        self.attrs = []              # (color_idx, shape_idx, size_idx)

    def place(self, shape, color=None, predicate=None):
        rng, cfg = self.rng, self.cfg
        ci = int(rng.integers(len(cfg.colors))) if color is None else cfg.colors.index(color)
        zi = int(rng.integers(len(cfg.sizes)))
        side = cfg.sizes[zi][1]
        for idx in rng.permutation(len(self.free)):
            box = _make_proposal(self.free[idx], side, cfg.grid, rng)
            if not within_image_bounds(box):
                continue
            if predicate is not None and not predicate(box):
                continue
            self.free.pop(idx)
            self.boxes.append(box)
            self.attrs.append((ci, cfg.shapes.index(shape), zi))
            return len(self.boxes) - 1
        return None

    def related(self, idx, relation):
        """Predicate: the candidate box bears ``relation`` to object idx,
        comfortably inside the sector and the connectivity cut."""
        ref = self.boxes[idx]
        sector = SECTOR_BY_RELATION[relation]
        center = _SECTOR_CENTER_DEG[sector]

        def ok(box):
            theta, ratio = _pair_geometry(box, ref)
            return (_angle_gap(theta, center) <= _ANGLE_IN and ratio <= _RATIO_IN
                    and classify_spatial_relation(box, ref, _CLASSIFY_CFG) == sector)
        return ok

    def unrelated(self, pairs):
        """Predicate: the candidate box clearly lacks every (idx, relation);
        each pair is either angularly off-sector or beyond the cut."""
        resolved = [(self.boxes[i], SECTOR_BY_RELATION[r]) for i, r in pairs]

        def ok(box):
            for ref, sector in resolved:
                theta, ratio = _pair_geometry(box, ref)
                if (_angle_gap(theta, _SECTOR_CENTER_DEG[sector]) < _ANGLE_OUT
                        and ratio <= _RATIO_OUT):
                    return False
                if classify_spatial_relation(box, ref, _CLASSIFY_CFG) == sector:
                    return False
            return True
        return ok

    def build(self, target):
        """Attach features, shuffle object order, and emit the Scene."""
        cfg, rng = self.cfg, self.rng
        if len(self.boxes) < cfg.k_min:
            return None
        perm = list(rng.permutation(len(self.boxes)))
        proposals = []
        attributes = []
        for old in perm:
            box = self.boxes[old]
            ci, si, zi = self.attrs[old]
            feat = _feature(ci, si, cfg.sizes[zi][1], cfg, rng)
            proposals.append(Proposal(box.center_x, box.center_y,
                                      box.width, box.height, feat))
            attributes.append((cfg.colors[ci], cfg.shapes[si], cfg.sizes[zi][0]))
        scene = Scene(proposals, attributes, _semantic_edges(proposals, cfg))
        return scene, perm.index(target)


def _distinct_shapes(cfg, rng, n):
    idx = rng.choice(len(cfg.shapes), size=n, replace=False)
    return [cfg.shapes[i] for i in idx]


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _construct_order0(cfg, rng):
    b = _Builder(cfg, rng)
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    t_shape = _pick(rng, cfg.shapes)
    t_color = _pick(rng, cfg.colors)
    target = b.place(t_shape, color=t_color)
    # the distractor shares the category, so the color is load-bearing
    if b.place(t_shape, color=_pick(rng, [c for c in cfg.colors if c != t_color])) is None:
        return None
    while len(b.boxes) < k:
        shape, color = _pick(rng, cfg.shapes), _pick(rng, cfg.colors)
        if shape == t_shape and color == t_color:
            continue
        if b.place(shape, color=color) is None:
            break
    built = b.build(target)
    if built is None:
        return None
    scene, gt = built
    return scene, gt, ExpressionPlan(0, t_color, t_shape)


def _construct_order1(cfg, rng):
    b = _Builder(cfg, rng)
    k = int(rng.integers(max(cfg.k_min, 3), cfg.k_max + 1))
    t_shape, a_shape = _distinct_shapes(cfg, rng, 2)
    a_color = _pick(rng, cfg.colors)
    rel = _pick(rng, cfg.relations)
    anchor = b.place(a_shape, color=a_color)
    target = b.place(t_shape, predicate=b.related(anchor, rel))
    if target is None:
        return None
    # a same-category object without the relation keeps attributes insufficient
    if b.place(t_shape, predicate=b.unrelated([(anchor, rel)])) is None:
        return None
    while len(b.boxes) < k:
        shape, color = _pick(rng, cfg.shapes), _pick(rng, cfg.colors)
        if shape == a_shape and color == a_color:
            continue  # keep the anchor description unique
        pred = b.unrelated([(anchor, rel)]) if shape == t_shape else None
        if b.place(shape, color=color, predicate=pred) is None:
            break
    built = b.build(target)
    if built is None:
        return None
    scene, gt = built
    return scene, gt, ExpressionPlan(1, None, t_shape, rel, a_color=a_color,
                                     a_shape=a_shape)


def _construct_order2(cfg, rng, full_decoy):
    b = _Builder(cfg, rng)
    k = int(rng.integers(max(cfg.k_min, 5), cfg.k_max + 1))
    t_shape, m_shape, a_shape = _distinct_shapes(cfg, rng, 3)
    rel1, rel2 = _pick(rng, cfg.relations), _pick(rng, cfg.relations)
    anchor = b.place(a_shape)
    mediator = b.place(m_shape, predicate=b.related(anchor, rel2))
    if mediator is None:
        return None
    target = b.place(t_shape, predicate=b.related(mediator, rel1))
    if target is None:
        return None
    if full_decoy:
        # Decoy chain with the real chain's geometry: the look-alike target
        # keeps the true target's direct relation to the anchor and hangs
        # off its own mediator at the same offset, so nothing one hop away
        # separates the two candidates - the anchor's identity has to travel
        # through the mediator first.
        not_real = b.unrelated([(mediator, rel1)])
        anchor_edge = classify_spatial_relation(b.boxes[target], b.boxes[anchor],
                                                _CLASSIFY_CFG)

        def mirrors_target(box):
            return (not_real(box) and classify_spatial_relation(
                box, b.boxes[anchor], _CLASSIFY_CFG) == anchor_edge)

        t_decoy = b.place(t_shape, predicate=mirrors_target)
        if t_decoy is None:
            return None
        feeds_decoy = b.related(t_decoy, INVERSE_RELATION[rel1])
        off_anchor = b.unrelated([(anchor, rel2)])
        if b.place(m_shape,
                   predicate=lambda box: feeds_decoy(box) and off_anchor(box)) is None:
            return None
    else:
        m_decoy = b.place(m_shape, predicate=b.unrelated([(anchor, rel2)]))
        if m_decoy is None:
            return None
        if b.place(t_shape,
                   predicate=b.unrelated([(mediator, rel1), (m_decoy, rel1)])) is None:
            return None
    while len(b.boxes) < k:
        shape = _pick(rng, cfg.shapes)
        if shape == a_shape:
            continue  # the anchor stays unique in its category
        pred = None
        if shape == m_shape:
            pred = b.unrelated([(anchor, rel2)])
        elif shape == t_shape:
            pred = b.unrelated([(mediator, rel1)])
        if b.place(shape, predicate=pred) is None:
            break
    built = b.build(target)
    if built is None:
        return None
    scene, gt = built
    return scene, gt, ExpressionPlan(2, None, t_shape, rel1, m_shape=m_shape,
                                     rel2=rel2, a_shape=a_shape)


def build_sample(cfg: GeneratorConfig, index: int, max_attempts: int = 200) -> SampleRecord:
    """One verified sample from a per-index derived rng (parallel-safe)."""
    rng = np.random.default_rng([cfg.seed, index])
    order = cfg.orders[index % len(cfg.orders)]
    # the decoy flavor is a per-sample coin, not a per-attempt one: the hard
    # flavor rejects layouts more often, and redrawing inside the retry loop
    # would quietly skew the corpus toward the easy flavor
    full_decoy = order == 2 and bool(rng.integers(2))
    for _ in range(max_attempts):
        if order == 0:
            built = _construct_order0(cfg, rng)
        elif order == 1:
            built = _construct_order1(cfg, rng)
        else:
            built = _construct_order2(cfg, rng, full_decoy=full_decoy)
        if built is None:
            continue
        scene, target, plan = built
        # safety net: the emitted expression must resolve to the target from
        # the record alone (noisy features included)
        if resolve_plan(plan, scene.proposals, scene.attributes) != [target]:
            continue
        decoded = _decode_attributes(scene.proposals, cfg)
        if resolve_plan(plan, scene.proposals, decoded) != [target]:
            continue
        tokens, tree = realize_expression(plan)
        return SampleRecord(f"scene-{index:06d}", scene.proposals,
                            scene.semantic_edges, tokens, tree, target, order)
    raise GenerationError(f"no valid order-{order} sample after {max_attempts} "
                          f"attempts (scene index {index})")


def generate_dataset(cfg: GeneratorConfig) -> dict:
    """{"train": [...], "val": [...], "test": [...]} with disjoint scene ids."""
    samples = [build_sample(cfg, i) for i in range(cfg.num_scenes)]
    n_train = round(cfg.num_scenes * cfg.split[0])
    n_val = round(cfg.num_scenes * cfg.split[1])
    return {"train": samples[:n_train],
            "val": samples[n_train:n_train + n_val],
            "test": samples[n_train + n_val:]}


# ---------------------------------------------------------------------------
# interchange format
# ---------------------------------------------------------------------------

DATASET_VERSION = 1


def write_dataset(samples, path, d_x):
    """JSONL: a version/width header line, then one record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": DATASET_VERSION, "d_x": d_x}) + "\n")
        for s in samples:
            record = {
                "scene_id": s.scene_id,
                "proposals": [{"box": [p.center_x, p.center_y, p.width, p.height],
                               "feature": p.visual_feature.tolist()}
                              for p in s.proposals],
                "semantic_edges": [{"i": i, "j": j, "probs": list(probs)}
                                   for i, j, probs in s.semantic_edges],
                "tokens": list(s.tokens),
                "tree": s.tree,
                "gt_index": s.gt_index,
                "order": s.order,
            }
            fh.write(json.dumps(record) + "\n")


@dataclass
class Dataset:
    d_x: int
    samples: list


def _record_error(line_no, message):
    return ValueError(f"line {line_no}: {message}")


def read_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError("line 1: missing dataset header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise _record_error(1, f"unparseable header: {err}") from None
    if not isinstance(header, dict) or header.get("version") != DATASET_VERSION:
        raise _record_error(1, f"unsupported dataset version {header.get('version')!r}"
                            if isinstance(header, dict) else "header is not an object")
    d_x = header.get("d_x")
    if not isinstance(d_x, int) or d_x < 1:
        raise _record_error(1, f"bad d_x {d_x!r}")
    samples = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise _record_error(line_no, "blank line inside dataset")
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as err:
            raise _record_error(line_no, f"unparseable record: {err}") from None
        try:
            samples.append(_record_to_sample(doc, d_x))
        except (KeyError, TypeError, ValueError) as err:
            raise _record_error(line_no, str(err)) from None
    return Dataset(d_x, samples)


def _record_to_sample(doc, d_x):
    proposals = []
    for rec in doc["proposals"]:
        box = rec["box"]
        if len(box) != 4:
            raise ValueError(f"box must have 4 numbers, got {len(box)}")
        feature = np.asarray(rec["feature"], dtype=np.float64)
        if feature.shape != (d_x,):
            raise ValueError(f"feature width {feature.shape} does not match "
                             f"header d_x {d_x}")
        proposals.append(Proposal(*box, feature))
    if not proposals:
        raise ValueError("record has no proposals")
    k = len(proposals)
    edges = []
    for rec in doc.get("semantic_edges", []):
        i, j = rec["i"], rec["j"]
        if not (0 <= i < k and 0 <= j < k) or i == j:
            raise ValueError(f"bad semantic edge ({i}, {j}) for {k} proposals")
        edges.append((i, j, list(rec["probs"])))
    gt = doc["gt_index"]
    if not isinstance(gt, int) or not 0 <= gt < k:
        raise ValueError(f"gt_index {gt!r} out of range for {k} proposals")
    order = doc["order"]
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order!r}")
    tokens = doc["tokens"]
    if not tokens or not all(isinstance(t, str) for t in tokens):
        raise ValueError("tokens must be a non-empty list of strings")
    return SampleRecord(doc["scene_id"], proposals, edges, list(tokens),
                        doc["tree"], gt, order)
