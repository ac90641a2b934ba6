"""The grounding model: fusion, gated graph convolution, matching scores.

A forward pass encodes the expression, attends words/phrases over the
proposals, builds gates, propagates multimodal features through N gated
graph convolution layers per branch (spatial and/or semantic), and scores
every proposal against the global language context by cosine similarity.

Parameters live in a flat name -> float64 array dict so the gradient
checker, the optimizer, and the checkpoint format all address them
uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import cross_modal as cm
from . import language as lg
from .scene_graph import GraphVariantConfig, build_spatial_graph

CHECKPOINT_VERSION = 1
SOFT_EDGE_DIM = 5


@dataclass(frozen=True)
class HyperConfig:
    """Model dimensions and structural switches."""

    d_x: int = 32          # visual feature width (datasets override this)
    d_f: int = 64          # word embedding width
    d_h: int = 64          # bidirectional context width (two halves)
    d_n: int = 64          # attention mixing width
    d_l0: int = 64         # word-type head hidden width
    d_e0: int = 64         # edge-type head hidden width
    d_e: int = 64          # graph convolution width
    d_p: int = 16          # projected spatial feature width
    d_s: int = 64          # matching space width
    n_layers: int = 2      # 0 disables propagation (no-context baseline)
    variant: GraphVariantConfig = field(default_factory=GraphVariantConfig)
    branch: str = "spatial"          # spatial | semantic | both
    n_rel_categories: int = 0        # semantic detector categories
    d_r: int = 16                    # semantic relation embedding width
    max_length: int = 20
    seed: int = 0

    def __post_init__(self):
        dims = {"d_x": self.d_x, "d_f": self.d_f, "d_h": self.d_h, "d_n": self.d_n,
                "d_l0": self.d_l0, "d_e0": self.d_e0, "d_e": self.d_e,
                "d_p": self.d_p, "d_s": self.d_s, "d_r": self.d_r}
        for name, value in dims.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_h % 2:
            raise ValueError(f"d_h must be even (two directions), got {self.d_h}")
        if self.n_layers < 0 or self.n_layers > 8:
            raise ValueError(f"n_layers must be in [0, 8], got {self.n_layers}")
        if self.branch not in ("spatial", "semantic", "both"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.branch in ("semantic", "both") and self.n_rel_categories < 1:
            raise ValueError("semantic branch needs n_rel_categories >= 1")

    @property
    def n_edge_types(self):
        return self.variant.num_edge_types

    def branches(self):
        return ("spatial", "semantic") if self.branch == "both" else (self.branch,)

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in (
            "d_x", "d_f", "d_h", "d_n", "d_l0", "d_e0", "d_e", "d_p", "d_s",
            "n_layers", "branch", "n_rel_categories", "d_r", "max_length", "seed")}
        doc["variant"] = {"edge_design": self.variant.edge_design,
                          "connectivity": self.variant.connectivity,
                          "param": self.variant.param}
        return doc

    @classmethod
    def from_json(cls, doc) -> "HyperConfig":
        doc = dict(doc)
        var = doc.pop("variant")
        return cls(variant=GraphVariantConfig(**var), **doc)


def _parameter_specs(cfg: HyperConfig, vocab_size: int):
    """Ordered (name, shape, fan_in) list; order fixes the init rng stream."""
    half = cfg.d_h // 2
    specs = [
        ("lang.embedding", (vocab_size, cfg.d_f), cfg.d_f),
        ("lang.lstm_fw_w", (cfg.d_f + half, 4 * half), cfg.d_f + half),
        ("lang.lstm_fw_b", (1, 4 * half), cfg.d_f + half),
        ("lang.lstm_bw_w", (cfg.d_f + half, 4 * half), cfg.d_f + half),
        ("lang.lstm_bw_b", (1, 4 * half), cfg.d_f + half),
        ("lang.type_w0", (cfg.d_h, cfg.d_l0), cfg.d_h),
        ("lang.type_b0", (1, cfg.d_l0), cfg.d_h),
        ("lang.type_w1", (cfg.d_l0, 4), cfg.d_l0),
        ("lang.type_b1", (1, 4), cfg.d_l0),
        ("attn.word_wn", (cfg.d_n, 1), cfg.d_n),
        ("attn.word_wv", (cfg.d_x, cfg.d_n), cfg.d_x),
        ("attn.word_wf", (cfg.d_f, cfg.d_n), cfg.d_f),
        ("attn.phrase_wn", (cfg.d_n, 1), cfg.d_n),
        ("attn.phrase_wv", (cfg.d_x, cfg.d_n), cfg.d_x),
        ("attn.phrase_wf", (cfg.d_f, cfg.d_n), cfg.d_f),
        ("shared.w_p", (5, cfg.d_p), 5),
    ]
    for branch in cfg.branches():
        if branch == "spatial":
            featured = cfg.variant.edge_design == "soft"
            edge_dim = SOFT_EDGE_DIM
        else:
            featured = True
            edge_dim = cfg.d_r
            specs.append(("sem.rel_embedding", (cfg.n_rel_categories, cfg.d_r), cfg.d_r))
        p = "spatial" if branch == "spatial" else "sem"
        if featured:
            specs += [
                (f"{p}.ea_wn", (cfg.d_n, 1), cfg.d_n),
                (f"{p}.ea_wv", (edge_dim, cfg.d_n), edge_dim),
                (f"{p}.ea_wf", (cfg.d_h, cfg.d_n), cfg.d_h),
            ]
        else:
            specs += [
                (f"{p}.edge_w0", (cfg.d_h, cfg.d_e0), cfg.d_h),
                (f"{p}.edge_b0", (1, cfg.d_e0), cfg.d_h),
                (f"{p}.edge_w1", (cfg.d_e0, cfg.n_edge_types), cfg.d_e0),
                (f"{p}.edge_b1", (1, cfg.n_edge_types), cfg.d_e0),
            ]
        width_in = cfg.d_x + cfg.d_h
        for n in range(1, cfg.n_layers + 1):
            ln = f"{p}.layer{n}"
            specs += [
                (f"{ln}.w_out", (width_in, cfg.d_e), width_in),
                (f"{ln}.w_in", (width_in, cfg.d_e), width_in),
                (f"{ln}.w_self", (width_in, cfg.d_e), width_in),
                (f"{ln}.b_self", (1, cfg.d_e), width_in),
            ]
            if featured:
                specs += [
                    (f"{ln}.bias_w", (edge_dim, cfg.d_e), edge_dim),
                    (f"{ln}.bias_b", (1, cfg.d_e), edge_dim),
                ]
            else:
                specs.append((f"{ln}.type_bias", (cfg.n_edge_types, cfg.d_e), width_in))
            width_in = cfg.d_e
        ctx_width = cfg.d_e if cfg.n_layers >= 1 else cfg.d_x + cfg.d_h
        specs += [
            (f"{p}.score_w0", (cfg.d_p + ctx_width, cfg.d_s), cfg.d_p + ctx_width),
            (f"{p}.score_w1", (cfg.d_h, cfg.d_s), cfg.d_h),
        ]
    return specs


def init_parameters(cfg: HyperConfig, vocab_size: int, seed=None) -> dict:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init, seeded and ordered."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape, fan_in in _parameter_specs(cfg, vocab_size):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# sample preparation (parameter-independent constants)
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    """Everything about one sample that does not depend on parameters."""

    tokens: list
    token_ids: list
    phrases: list
    graph: object                    # spatial SceneGraph
    visual: np.ndarray               # K x D_x
    boxes: list                      # (x, y, w, h) per proposal
    gt_index: int | None = None
    order: int | None = None
    scene_id: object = None
    # typed spatial edges
    type_onehot: np.ndarray | None = None    # K*K x N_e
    count_out: np.ndarray | None = None      # K x N_e
    count_in: np.ndarray | None = None       # K x N_e
    # featured spatial edges (soft design)
    soft_edges: tuple | None = None          # (gather_src E x K, gather_dst E x K, feats E x 5)
    # semantic edges
    sem_edges: tuple | None = None           # (gather_src, gather_dst, probs E x C)

    @property
    def num_proposals(self):
        return len(self.boxes)


def _typed_edge_constants(labels: np.ndarray, n_types: int):
    k = labels.shape[0]
    flat = labels.reshape(-1)
    onehot = np.zeros((k * k, n_types))
    nz = flat > 0
    onehot[np.nonzero(nz)[0], flat[nz] - 1] = 1.0
    count_out = onehot.reshape(k, k, n_types).sum(axis=1)
    count_in = onehot.reshape(k, k, n_types).sum(axis=0)
    return onehot, count_out, count_in


def _gather_mats(src, dst, k):
    e = len(src)
    g_src = np.zeros((e, k))
    g_dst = np.zeros((e, k))
    g_src[np.arange(e), src] = 1.0
    g_dst[np.arange(e), dst] = 1.0
    return g_src, g_dst


def prepare_sample(sample, vocab, cfg: HyperConfig) -> PreparedSample:
    """Build graphs, token ids, phrases, and edge constants for one sample.

    ``sample`` must expose proposals (with boxes and visual features),
    tokens, tree (bracketed string), and optionally semantic_edges,
    gt_index, order, scene_id.
    """
    proposals = sample.proposals
    k = len(proposals)
    visual = np.stack([p.visual_feature for p in proposals])
    if visual.shape[1] != cfg.d_x:
        raise ValueError(
            f"visual feature width {visual.shape[1]} does not match configured d_x={cfg.d_x}")
    tokens = list(sample.tokens)
    tree = lg.parse_bracketed_tree(sample.tree)
    phrases = lg.valid_phrases(lg.extract_noun_phrases(tree, tokens=tokens))
    graph = build_spatial_graph(proposals, cfg.variant)
    prep = PreparedSample(
        tokens=tokens,
        token_ids=vocab.ids(tokens),
        phrases=phrases,
        graph=graph,
        visual=visual,
        boxes=[p.box for p in proposals],
        gt_index=getattr(sample, "gt_index", None),
        order=getattr(sample, "order", None),
        scene_id=getattr(sample, "scene_id", None),
    )
    if "spatial" in cfg.branches():
        if cfg.variant.edge_design == "soft":
            src, dst = np.nonzero(graph.edge_mask)
            feats = graph.edge_features[src, dst]
            g_src, g_dst = _gather_mats(src, dst, k)
            prep.soft_edges = (g_src, g_dst, feats)
        else:
            prep.type_onehot, prep.count_out, prep.count_in = _typed_edge_constants(
                graph.edge_labels, cfg.n_edge_types)
    if "semantic" in cfg.branches():
        detections = list(getattr(sample, "semantic_edges", []) or [])
        src = [d[0] for d in detections]
        dst = [d[1] for d in detections]
        if detections:
            probs = np.array([d[2] for d in detections], dtype=np.float64)
            probs = probs.reshape(len(detections), -1)
            if probs.shape[1] != cfg.n_rel_categories:
                raise ValueError(
                    f"semantic probability width {probs.shape[1]} does not match "
                    f"n_rel_categories={cfg.n_rel_categories}")
        else:
            probs = np.zeros((0, cfg.n_rel_categories))
        g_src, g_dst = _gather_mats(src, dst, k)
        prep.sem_edges = (g_src, g_dst, probs)
    return prep


# ---------------------------------------------------------------------------
# model pieces
# ---------------------------------------------------------------------------

def fuse_multimodal(visual, vertex_contexts):
    """K x (D_x + D_h): visual feature then language context."""
    return ad.concat([visual, vertex_contexts], axis=1)


def ggcn_layer_typed(x, vertex_gates, type_gates, type_onehot, count_out, count_in,
                     w_out, w_in, w_self, b_self, type_bias):
    """One gated propagation step over typed edges.

    ``type_gates`` is 1 x N_e; the K x K gate matrix is recovered from the
    per-pair one-hot type encoding.  Per-type biases are shared between
    the out- and in- directions.
    """
    k = x.shape[0]
    gated = ad.mul(x, vertex_gates)
    adj_out = ad.reshape(ad.matmul(type_onehot, ad.transpose(type_gates)), (k, k))
    out_part = ad.add(ad.matmul(adj_out, ad.matmul(gated, w_out)),
                      ad.matmul(ad.mul(count_out, type_gates), type_bias))
    in_part = ad.add(ad.matmul(ad.transpose(adj_out), ad.matmul(gated, w_in)),
                     ad.matmul(ad.mul(count_in, type_gates), type_bias))
    self_part = ad.add(ad.matmul(x, w_self), b_self)
    return ad.relu(ad.add(ad.add(out_part, in_part), self_part))


def ggcn_layer_featured(x, vertex_gates, edge_gates, gather_src, gather_dst, edge_bias,
                        w_out, w_in, w_self, b_self):
    """One gated propagation step over feature-carrying edges.

    ``edge_gates`` is 1 x E, ``edge_bias`` E x D_e (already projected from
    edge features); gather_src/gather_dst are constant E x K one-hots.
    """
    self_part = ad.add(ad.matmul(x, w_self), b_self)
    if edge_gates is None:
        return ad.relu(self_part)
    gated = ad.mul(x, vertex_gates)
    gate_col = ad.transpose(edge_gates)
    payload_out = ad.mul(ad.add(ad.matmul(gather_dst, ad.matmul(gated, w_out)), edge_bias),
                         gate_col)
    out_part = ad.matmul(ad.transpose(gather_src), payload_out)
    payload_in = ad.mul(ad.add(ad.matmul(gather_src, ad.matmul(gated, w_in)), edge_bias),
                        gate_col)
    in_part = ad.matmul(ad.transpose(gather_dst), payload_in)
    return ad.relu(ad.add(ad.add(out_part, in_part), self_part))


def final_context(x_context, spatial_features, w_p):
    """K x (D_p + width): projected box geometry next to propagated context."""
    return ad.concat([ad.matmul(spatial_features, w_p), x_context], axis=1)


def matching_scores(contexts, global_context, w_s0, w_s1):
    """Cosine similarity of projected contexts against the projected expression."""
    if float(np.linalg.norm(global_context.data)) < 1e-12:
        raise ValueError("global language context is zero; expression carries no signal")
    left = ad.l2_normalize(ad.matmul(contexts, w_s0), axis=1)
    right = ad.l2_normalize(ad.matmul(global_context, w_s1), axis=1)
    k = contexts.shape[0]
    return ad.reshape(ad.matmul(left, ad.transpose(right)), (k,))


@dataclass
class ForwardResult:
    scores: ad.Tensor                 # (K,)
    encoded: lg.EncodedExpression
    guided: dict                      # branch name -> LanguageGuidedGraph
    branch_scores: dict               # branch name -> (K,) Tensor


def _branch_scores(branch, prep, enc, guided_common, params, cfg):
    """Edge gates + GGCN stack + scoring head for one branch."""
    lam_l, lam_q, gates_v, ctx, h_g = guided_common
    p = "spatial" if branch == "spatial" else "sem"
    visual_t = ad.constant(prep.visual)
    if branch == "spatial" and cfg.variant.edge_design != "soft":
        _, gates_e = cm.edge_type_gates(enc.contexts, enc.type_weights,
                                        params[f"{p}.edge_w0"], params[f"{p}.edge_b0"],
                                        params[f"{p}.edge_w1"], params[f"{p}.edge_b1"])
        edge_const = (ad.constant(prep.type_onehot), ad.constant(prep.count_out),
                      ad.constant(prep.count_in))
        featured = False
        edge_feats_t = None
    else:
        if branch == "spatial":
            g_src, g_dst, feats = prep.soft_edges
            edge_feats_t = ad.constant(feats) if len(feats) else None
        else:
            g_src, g_dst, probs = prep.sem_edges
            edge_feats_t = (ad.matmul(ad.constant(probs), params["sem.rel_embedding"])
                            if len(probs) else None)
        _, gates_e = cm.edge_feature_gates(enc.contexts, enc.type_weights, edge_feats_t,
                                           params[f"{p}.ea_wn"], params[f"{p}.ea_wv"],
                                           params[f"{p}.ea_wf"])
        edge_const = (ad.constant(g_src), ad.constant(g_dst))
        featured = True
    x = fuse_multimodal(visual_t, ctx)
    for n in range(1, cfg.n_layers + 1):
        ln = f"{p}.layer{n}"
        if featured:
            edge_bias = (ad.add(ad.matmul(edge_feats_t, params[f"{ln}.bias_w"]),
                                params[f"{ln}.bias_b"])
                         if edge_feats_t is not None else None)
            x = ggcn_layer_featured(x, gates_v, gates_e, edge_const[0], edge_const[1],
                                    edge_bias, params[f"{ln}.w_out"], params[f"{ln}.w_in"],
                                    params[f"{ln}.w_self"], params[f"{ln}.b_self"])
        else:
            x = ggcn_layer_typed(x, gates_v, gates_e, *edge_const,
                                 params[f"{ln}.w_out"], params[f"{ln}.w_in"],
                                 params[f"{ln}.w_self"], params[f"{ln}.b_self"],
                                 params[f"{ln}.type_bias"])
    final = final_context(x, ad.constant(prep.graph.spatial_features), params["shared.w_p"])
    scores = matching_scores(final, h_g, params[f"{p}.score_w0"], params[f"{p}.score_w1"])
    guided = cm.LanguageGuidedGraph(prep.graph, lam_l, lam_q, gates_v, gates_e, ctx, h_g)
    return scores, guided


def forward(prep: PreparedSample, params, cfg: HyperConfig) -> ForwardResult:
    """Score every proposal against the expression.

    ``params`` maps names to tensors (tape leaves during training,
    constants during inference).  Branches share the language encoding
    and the word/phrase vertex attention; each branch has its own edge
    gates, propagation stack, and scoring head.
    """
    lang_params = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("lang.")}
    enc = lg.encode_expression(prep.tokens, prep.token_ids, prep.phrases,
                               lang_params, cfg.max_length)
    visual_t = ad.constant(prep.visual)
    lam_l = cm.word_vertex_attention(enc.embeddings, enc.type_weights, visual_t,
                                     params["attn.word_wn"], params["attn.word_wv"],
                                     params["attn.word_wf"])
    lam_q = cm.phrase_vertex_attention(enc.phrase_features, visual_t,
                                       params["attn.phrase_wn"], params["attn.phrase_wv"],
                                       params["attn.phrase_wf"])
    gates_v = cm.vertex_gates(lam_l, lam_q)
    ctx = cm.vertex_language_context(enc.contexts, enc.phrase_contexts, lam_l, lam_q)
    h_g = cm.global_language_context(enc.contexts, enc.type_weights)
    common = (lam_l, lam_q, gates_v, ctx, h_g)
    guided = {}
    branch_scores = {}
    for branch in cfg.branches():
        branch_scores[branch], guided[branch] = _branch_scores(
            branch, prep, enc, common, params, cfg)
    names = list(branch_scores)
    if len(names) == 1:
        scores = branch_scores[names[0]]
    else:
        scores = ad.smul(ad.add(branch_scores["spatial"], branch_scores["semantic"]), 0.5)
    return ForwardResult(scores, enc, guided, branch_scores)


# ---------------------------------------------------------------------------
# the model bundle: config + vocabulary + parameters
# ---------------------------------------------------------------------------

class Model:
    """Configuration, vocabulary, and parameters, with forward helpers."""

    def __init__(self, cfg: HyperConfig, vocab: lg.Vocabulary, params=None):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params if params is not None else init_parameters(cfg, vocab.size)
        self._check_shapes()

    def _check_shapes(self):
        expected = {name: shape for name, shape, _ in
                    _parameter_specs(self.cfg, self.vocab.size)}
        if set(expected) != set(self.params):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter names mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")

    def bind(self, tape=None) -> dict:
        """Tensor view of the parameters: tape leaves or plain constants."""
        if tape is None:
            return {k: ad.constant(v) for k, v in self.params.items()}
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def prepare(self, sample) -> PreparedSample:
        return prepare_sample(sample, self.vocab, self.cfg)

    def forward_prepared(self, prep, bound=None) -> ForwardResult:
        return forward(prep, bound if bound is not None else self.bind(), self.cfg)

    def score(self, prep) -> np.ndarray:
        return self.forward_prepared(prep).scores.data

    def clone_config(self, **overrides) -> HyperConfig:
        return replace(self.cfg, **overrides)


def save_checkpoint(model: Model, path):
    """JSON checkpoint: version, config, vocabulary, named parameters."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "hyper": model.cfg.to_json(),
        "vocab": model.vocab.to_json(),
        "params": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                   for name, arr in sorted(model.params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    cfg = HyperConfig.from_json(doc["hyper"])
    vocab = lg.Vocabulary.from_json(doc["vocab"])
    params = {name: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
              for name, rec in doc["params"].items()}
    return Model(cfg, vocab, params)
