"""Expression handling: tokens, vocabulary, parse trees, noun phrases, encoding.

The encoder is a bidirectional LSTM built on the autodiff engine; each
word also receives a soft 4-way type classification (entity / relation /
absolute location / unnecessary) that the cross-modal stage uses to weight
attention.  Noun phrases come from externally supplied bracketed
constituency trees.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DETERMINERS = frozenset(
    {"a", "an", "the", "this", "that", "these", "those", "any", "some"})

ABSOLUTE_LOCATION_WORDS = frozenset(
    {"left", "right", "top", "bottom", "middle", "center", "front", "back",
     "leftmost", "rightmost", "closest", "farthest"})

# type-weight component order
ENTITY, RELATION, ABSOLUTE_LOCATION, UNNECESSARY = 0, 1, 2, 3

UNKNOWN_ID = 0

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Token ids with id 0 reserved for unknown words."""

    token_to_id: dict
    min_occurrences: int = 5

    @property
    def size(self):
        """Number of embedding rows (known tokens + the unknown slot)."""
        return len(self.token_to_id) + 1

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNKNOWN_ID)

    def ids(self, tokens) -> list:
        return [self.token_to_id.get(t, UNKNOWN_ID) for t in tokens]

    def __contains__(self, token):
        return token in self.token_to_id

    def to_json(self) -> dict:
        return {"min_occurrences": self.min_occurrences, "token_to_id": dict(self.token_to_id)}

    @classmethod
    def from_json(cls, doc) -> "Vocabulary":
        return cls({str(k): int(v) for k, v in doc["token_to_id"].items()},
                   int(doc["min_occurrences"]))


def build_vocabulary(corpus, min_occurrences: int = 5) -> Vocabulary:
    """Count tokens over the corpus; keep those appearing more than the threshold.

    Ids are assigned lexicographically starting at 1, so the result does
    not depend on corpus order.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = {}
    for tokens in corpus:
        for tok in tokens:
            if tok:
                counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(tok for tok, n in counts.items() if n > min_occurrences)
    return Vocabulary({tok: i + 1 for i, tok in enumerate(kept)}, min_occurrences)


# ---------------------------------------------------------------------------
# bracketed constituency trees
# ---------------------------------------------------------------------------

@dataclass
class ConstituencyNode:
    tag: str
    children: list = field(default_factory=list)
    token: str | None = None

    @property
    def is_leaf(self):
        return self.token is not None

    def leaves(self):
        if self.is_leaf:
            return [self]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def leaf_tokens(self):
        return [leaf.token for leaf in self.leaves()]


class TreeParseError(ValueError):
    """Malformed bracketed tree; carries the character position."""

    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


def parse_bracketed_tree(text: str) -> ConstituencyNode:
    """Parse "(TAG child ...)" Penn-Treebank-style bracketing."""
    pos = 0
    n = len(text)

    def skip_space(p):
        while p < n and text[p].isspace():
            p += 1
        return p

    def read_word(p):
        start = p
        while p < n and not text[p].isspace() and text[p] not in "()":
            p += 1
        if p == start:
            raise TreeParseError("expected a tag or token", start)
        return text[start:p], p

    def parse_node(p):
        p = skip_space(p)
        if p >= n or text[p] != "(":
            raise TreeParseError("expected '('", p)
        p = skip_space(p + 1)
        tag, p = read_word(p)
        children = []
        token = None
        while True:
            p = skip_space(p)
            if p >= n:
                raise TreeParseError("unbalanced parentheses", p)
            if text[p] == ")":
                p += 1
                break
            if text[p] == "(":
                if token is not None:
                    raise TreeParseError("node mixes token and children", p)
                child, p = parse_node(p)
                children.append(child)
            else:
                if children or token is not None:
                    raise TreeParseError("node mixes token and children", p)
                token, p = read_word(p)
        if token is None and not children:
            raise TreeParseError(f"node ({tag}) has no content", p - 1)
        return ConstituencyNode(tag, children, token), p

    pos = skip_space(pos)
    if pos >= n:
        raise TreeParseError("empty input", pos)
    node, pos = parse_node(pos)
    pos = skip_space(pos)
    if pos != n:
        raise TreeParseError("trailing content", pos)
    return node


def format_bracketed_tree(node: ConstituencyNode) -> str:
    if node.is_leaf:
        return f"({node.tag} {node.token})"
    inner = " ".join(format_bracketed_tree(c) for c in node.children)
    return f"({node.tag} {inner})"


# ---------------------------------------------------------------------------
# noun-phrase extraction
# ---------------------------------------------------------------------------

@dataclass
class PhraseCandidate:
    """A candidate noun phrase: raw member indices and the filtered ones."""

    indices: list          # token positions covered by the candidate NP
    kept: list             # positions left after dropping stop words
    tokens: list           # raw candidate tokens, for reporting

    @property
    def valid(self):
        return len(self.kept) >= 2


def extract_noun_phrases(tree: ConstituencyNode, tokens=None,
                         determiners=DETERMINERS,
                         location_words=ABSOLUTE_LOCATION_WORDS) -> list:
    """Candidate noun phrases from a constituency tree.

    For every leaf, ascend to the nearest NP ancestor; deduplicate, then
    drop any candidate whose span properly contains another candidate
    (an outer NP is represented by the inner NPs it wraps).  Finally each
    candidate sheds determiners and absolute-location words; it is a
    valid phrase only if at least two tokens remain.
    """
    leaves = tree.leaves()
    leaf_tokens = [leaf.token for leaf in leaves]
    if tokens is not None and [t.lower() for t in leaf_tokens] != [t.lower() for t in tokens]:
        raise ValueError(
            f"tree leaves {leaf_tokens} do not match expression tokens {list(tokens)}")

    spans = {}  # id(node) -> (start, end) over leaf indices

    def annotate(node, start):
        if node.is_leaf:
            spans[id(node)] = (start, start + 1)
            return start + 1
        pos = start
        for child in node.children:
            pos = annotate(child, pos)
        spans[id(node)] = (start, pos)
        return pos

    annotate(tree, 0)

    parents = {}

    def link(node):
        for child in node.children:
            parents[id(child)] = node
            link(child)

    link(tree)

    candidates = []  # (span, node) in order of first appearance
    seen_spans = set()
    for leaf in leaves:
        node = parents.get(id(leaf))
        while node is not None and node.tag != "NP":
            node = parents.get(id(node))
        if node is None:
            continue
        span = spans[id(node)]
        if span not in seen_spans:
            seen_spans.add(span)
            candidates.append(span)

    narrowest = [s for s in candidates
                 if not any(o != s and s[0] <= o[0] and o[1] <= s[1] for o in candidates)]

    out = []
    for start, end in sorted(narrowest):
        indices = list(range(start, end))
        kept = [i for i in indices
                if leaf_tokens[i].lower() not in determiners
                and leaf_tokens[i].lower() not in location_words]
        out.append(PhraseCandidate(indices, kept, [leaf_tokens[i] for i in indices]))
    return out


def valid_phrases(candidates) -> list:
    """Member-index lists of the candidates that survive filtering."""
    return [c.kept for c in candidates if c.valid]


# ---------------------------------------------------------------------------
# encoding: bidirectional LSTM + word-type head
# ---------------------------------------------------------------------------

@dataclass
class EncodedExpression:
    tokens: list
    token_ids: list
    embeddings: ad.Tensor        # T x D_f
    contexts: ad.Tensor          # T x D_h
    type_weights: ad.Tensor      # T x 4
    phrases: list                # M member-index lists (filtered)
    phrase_features: ad.Tensor | None   # M x D_f
    phrase_contexts: ad.Tensor | None   # M x D_h

    @property
    def num_words(self):
        return len(self.tokens)

    @property
    def num_phrases(self):
        return len(self.phrases)


def lstm_direction(embeddings, weights, bias, hidden_size, reverse=False):
    """Run one LSTM direction over a T x D_f tensor; returns T x hidden_size.

    ``weights`` is (D_f + hidden) x (4 * hidden) with gates ordered
    input, forget, cell, output; ``bias`` is 1 x (4 * hidden).
    """
    t_len = embeddings.shape[0]
    h = ad.constant(np.zeros((1, hidden_size)))
    c = ad.constant(np.zeros((1, hidden_size)))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    rows = [None] * t_len
    hs = hidden_size
    for t in order:
        x_t = embeddings[t:t + 1, :]
        z = ad.add(ad.matmul(ad.concat([x_t, h], axis=1), weights), bias)
        gate_i = ad.sigmoid(z[:, 0:hs])
        gate_f = ad.sigmoid(z[:, hs:2 * hs])
        cell = ad.tanh(z[:, 2 * hs:3 * hs])
        gate_o = ad.sigmoid(z[:, 3 * hs:4 * hs])
        c = ad.add(ad.mul(gate_f, c), ad.mul(gate_i, cell))
        h = ad.mul(gate_o, ad.tanh(c))
        rows[t] = h
    return ad.concat(rows, axis=0)


def word_type_weights(contexts, w0, b0, w1, b1):
    """Soft 4-way word classification from contexts (Eq-style 2-layer head)."""
    hidden = ad.relu(ad.add(ad.matmul(contexts, w0), b0))
    return ad.softmax(ad.add(ad.matmul(hidden, w1), b1), axis=1)


def one_hot_rows(ids, width) -> np.ndarray:
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def phrase_average_matrix(phrases, t_len) -> np.ndarray:
    """M x T constant matrix whose rows average member-word positions."""
    out = np.zeros((len(phrases), t_len))
    for m, members in enumerate(phrases):
        out[m, members] = 1.0 / len(members)
    return out


def encode_expression(tokens, token_ids, phrases, params, max_length: int = 20) -> EncodedExpression:
    """Embed and contextualize an expression; compute type weights and phrase reps.

    ``params`` maps names to bound tensors: embedding, lstm_fw_w, lstm_fw_b,
    lstm_bw_w, lstm_bw_b, type_w0, type_b0, type_w1, type_b1.  ``phrases``
    holds filtered member-index lists from extract_noun_phrases.
    """
    t_len = len(tokens)
    if t_len == 0:
        raise ValueError("cannot encode an empty expression")
    if t_len > max_length:
        raise ValueError(f"expression length {t_len} exceeds max_length {max_length}")
    embed = params["embedding"]
    onehot = ad.constant(one_hot_rows(token_ids, embed.shape[0]))
    feats = ad.matmul(onehot, embed)
    hidden = params["lstm_fw_w"].shape[1] // 4
    fwd = lstm_direction(feats, params["lstm_fw_w"], params["lstm_fw_b"], hidden)
    bwd = lstm_direction(feats, params["lstm_bw_w"], params["lstm_bw_b"], hidden, reverse=True)
    contexts = ad.concat([fwd, bwd], axis=1)
    weights = word_type_weights(contexts, params["type_w0"], params["type_b0"],
                                params["type_w1"], params["type_b1"])
    phrase_feats = phrase_ctx = None
    if phrases:
        averager = ad.constant(phrase_average_matrix(phrases, t_len))
        phrase_feats = ad.matmul(averager, feats)
        phrase_ctx = ad.matmul(averager, contexts)
    return EncodedExpression(list(tokens), list(token_ids), feats, contexts,
                             weights, [list(p) for p in phrases], phrase_feats, phrase_ctx)
