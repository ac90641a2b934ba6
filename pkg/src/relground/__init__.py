"""Grounding referring expressions in sets of box proposals.

The package couples a language-guided visual relation graph with a gated
graph convolution so that relational expressions ("the bag on the chair
left of the lamp") can be matched against box proposals.  Everything runs
on a small built-in reverse-mode autodiff engine over numpy float64.

Modules
-------
autodiff      tape-based reverse-mode engine + finite-difference checking
scene_graph   boxes, pairwise spatial relations, relation-graph construction
language      tokenization, vocabulary, parse trees, noun phrases, encoder
cross_modal   word/phrase-to-proposal attention and the gate computations
model         parameters, gated graph convolution, matching scores
training      triplet/softmax losses, negative mining, Adam, train loop
datagen       synthetic relational scenes with a symbolic resolver oracle
cli           gen-data / train / eval / ground / inspect / gradcheck
"""

__version__ = "0.1.0"
