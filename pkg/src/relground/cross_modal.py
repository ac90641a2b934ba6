"""Cross-modal attention and gating between an expression and a scene graph.

Words and phrases attend over proposals; the resulting attention mass
doubles as vertex gates, per-word relation mass turns into edge(-type)
gates, and attention-weighted word contexts give every vertex a language
context vector.  All functions are pure tensor-graph builders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .language import ENTITY, RELATION, UNNECESSARY


def attention_scores(queries, keys, wn, wq, wk):
    """R x S score grid: wn . tanh(keys_s . wk + queries_r . wq).

    ``queries`` is R x D_q (word/phrase features), ``keys`` is S x D_k
    (visual or edge features); wq: D_q x D_n, wk: D_k x D_n, wn: D_n x 1.
    """
    r = queries.shape[0]
    s = keys.shape[0]
    d_n = wn.shape[0]
    q_proj = ad.reshape(ad.matmul(queries, wq), (r, 1, d_n))
    k_proj = ad.reshape(ad.matmul(keys, wk), (1, s, d_n))
    mixed = ad.tanh(ad.add(q_proj, k_proj))
    return ad.reshape(ad.matmul(ad.reshape(mixed, (r * s, d_n)), wn), (r, s))


def word_vertex_attention(embeddings, type_weights, visual, wn, wv, wf):
    """T x K attention, each row scaled by the word's entity mass."""
    alpha = attention_scores(embeddings, visual, wn, wf, wv)
    entity_mass = type_weights[:, ENTITY:ENTITY + 1]
    return ad.mul(ad.softmax(alpha, axis=1), entity_mass)


def phrase_vertex_attention(phrase_features, visual, wn, wv, wf):
    """M x K attention with plain row-softmax (no type weighting)."""
    if phrase_features is None:
        return None
    alpha = attention_scores(phrase_features, visual, wn, wf, wv)
    return ad.softmax(alpha, axis=1)


def vertex_gates(word_attention, phrase_attention):
    """K x 1 gates: total attention mass landing on each proposal."""
    k = word_attention.shape[1]
    total = ad.reduce_sum(word_attention, axis=0)
    if phrase_attention is not None:
        total = ad.add(total, ad.reduce_sum(phrase_attention, axis=0))
    return ad.reshape(total, (k, 1))


def vertex_language_context(contexts, phrase_contexts, word_attention, phrase_attention):
    """K x D_h attention-weighted mean of word (and phrase) contexts.

    Vertices attracting less than 1e-12 total attention get an exact
    zero context: no language evidence points at them.
    """
    k = word_attention.shape[1]
    numer = ad.matmul(ad.transpose(word_attention), contexts)
    denom = ad.reduce_sum(word_attention, axis=0)
    if phrase_attention is not None:
        numer = ad.add(numer, ad.matmul(ad.transpose(phrase_attention), phrase_contexts))
        denom = ad.add(denom, ad.reduce_sum(phrase_attention, axis=0))
    denom = ad.reshape(denom, (k, 1))
    # the guard mask is derived from values, not differentiated through
    mask = ad.constant((denom.data >= 1e-12).astype(np.float64))
    safe = ad.add(ad.mul(denom, mask), ad.constant(1.0 - mask.data))
    return ad.div(ad.mul(numer, mask), safe)


def global_language_context(contexts, type_weights):
    """1 x D_h sum of word contexts weighted by their useful (non-filler) mass."""
    t_len = contexts.shape[0]
    useful = ad.reduce_sum(type_weights[:, 0:UNNECESSARY], axis=1)
    return ad.matmul(ad.reshape(useful, (1, t_len)), contexts)


def edge_type_gates(contexts, type_weights, w0, b0, w1, b1):
    """(T x N_e word distributions, 1 x N_e gates) for typed edge designs."""
    hidden = ad.relu(ad.add(ad.matmul(contexts, w0), b0))
    dist = ad.softmax(ad.add(ad.matmul(hidden, w1), b1), axis=1)
    weighted = ad.mul(dist, type_weights[:, RELATION:RELATION + 1])
    gates = ad.reshape(ad.reduce_sum(weighted, axis=0), (1, dist.shape[1]))
    return weighted, gates


def edge_feature_gates(contexts, type_weights, edge_features, wn, wv, wf):
    """(T x E word distributions, 1 x E gates) for feature-carrying edges.

    Language attends over the edges themselves (their feature vectors
    act as keys), so every edge gets its own gate instead of sharing a
    per-type one.
    """
    if edge_features is None or edge_features.shape[0] == 0:
        return None, None
    alpha = attention_scores(contexts, edge_features, wn, wf, wv)
    dist = ad.softmax(alpha, axis=1)
    weighted = ad.mul(dist, type_weights[:, RELATION:RELATION + 1])
    gates = ad.reshape(ad.reduce_sum(weighted, axis=0), (1, dist.shape[1]))
    return weighted, gates


@dataclass
class LanguageGuidedGraph:
    """A scene graph annotated with everything the expression contributes."""

    base: object                     # SceneGraph
    word_attention: ad.Tensor        # T x K
    phrase_attention: ad.Tensor | None   # M x K
    vertex_gates: ad.Tensor          # K x 1
    edge_gates: ad.Tensor | None     # 1 x N_e (typed) or 1 x E (featured)
    vertex_contexts: ad.Tensor       # K x D_h
    global_context: ad.Tensor        # 1 x D_h


def assemble_guided_graph(graph, encoded, visual, params, edge_features=None):
    """Compute all guided-graph fields for one branch.

    ``params`` carries the attention triples (word_wn/wv/wf,
    phrase_wn/wv/wf) plus either the typed edge head (edge_w0/b0/w1/b1)
    or the featured edge attention triple (ea_wn/wv/wf); the edge kind is
    chosen by whether ``edge_features`` is given.
    """
    lam_l = word_vertex_attention(encoded.embeddings, encoded.type_weights, visual,
                                  params["word_wn"], params["word_wv"], params["word_wf"])
    lam_q = phrase_vertex_attention(encoded.phrase_features, visual,
                                    params["phrase_wn"], params["phrase_wv"],
                                    params["phrase_wf"])
    gates_v = vertex_gates(lam_l, lam_q)
    ctx = vertex_language_context(encoded.contexts, encoded.phrase_contexts, lam_l, lam_q)
    h_g = global_language_context(encoded.contexts, encoded.type_weights)
    if edge_features is not None:
        _, gates_e = edge_feature_gates(encoded.contexts, encoded.type_weights, edge_features,
                                        params["ea_wn"], params["ea_wv"], params["ea_wf"])
    else:
        _, gates_e = edge_type_gates(encoded.contexts, encoded.type_weights,
                                     params["edge_w0"], params["edge_b0"],
                                     params["edge_w1"], params["edge_b1"])
    return LanguageGuidedGraph(graph, lam_l, lam_q, gates_v, gates_e, ctx, h_g)
