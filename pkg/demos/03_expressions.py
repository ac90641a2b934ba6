"""
Reading a referring expression
==============================

Before any attention happens, an expression is tokenized, parsed into a
constituency tree, and mined for the noun phrases whose words should
point at one object together.  This script walks a nested expression
through each stage and shows why exactly one phrase survives.
"""

from relground import language as lg

EXPRESSION = "the umbrella held by a lady wearing a green skirt"

# words come out lowercased, possessives intact, punctuation dropped
tokens = lg.tokenize(EXPRESSION)
print("tokens:", tokens)

# A bracketed constituency tree for the expression.  In the full
# pipeline the generator emits these alongside each sample; here one is
# written by hand.
TREE = ("(NP (NP (DT the) (NN umbrella)) (VP (VBN held) (PP (IN by)"
        " (NP (NP (DT a) (NN lady)) (VP (VBG wearing)"
        " (NP (DT a) (JJ green) (NN skirt)))))))")
tree = lg.parse_bracketed_tree(TREE)
print("tree leaves:", [leaf.token for leaf in tree.leaves()])

# --- candidate phrases --------------------------------------------------------
# Every leaf climbs to its nearest NP ancestor; outer NPs collapse onto
# the inner ones they wrap, so each candidate is a minimal noun phrase.

candidates = lg.extract_noun_phrases(tree, tokens=tokens)
for cand in candidates:
    print(f"candidate {' '.join(cand.tokens)!r:20} keeps {cand.kept} "
          f"-> {'valid' if cand.valid else 'too thin'}")

# Determiners and pure location words don't describe an object, so they
# are shed; a phrase is only worth a dedicated attention query if at
# least two content words remain.  "green skirt" is the lone survivor:
print("surviving phrases:", lg.valid_phrases(candidates))

# --- vocabulary ---------------------------------------------------------------
# Tokens seen strictly more than min_occurrences times get ids in
# lexicographic order, from 1; everything rare or unseen shares id 0.

corpus = [tokens] * 6 + [["a", "photo"]] * 3
vocab = lg.build_vocabulary(corpus, min_occurrences=5)
print("vocabulary size (incl. the unknown id):", vocab.size)
print("ids for", tokens[:4], "->", vocab.ids(tokens[:4]))
print("ids for ['a', 'purple', 'photo'] ->", vocab.ids(["a", "purple", "photo"]))

# malformed trees fail loudly, pointing at the offending character
try:
    lg.parse_bracketed_tree("(NP (DT the) (NN umbrella)")
except lg.TreeParseError as err:
    print("parse error:", err)
