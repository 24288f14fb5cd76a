"""An unsupervised syntactic language model at desk scale.

A composition model encodes sentences with a pruned inside-outside chart
and induces binary parse trees; a stack-based transformer generates words
interleaved with tree-building actions.  The two are trained jointly in a
hard-EM loop, decoded with word-synchronized beam search, and evaluated on
unlabeled bracketing F1 and surprisal.
"""

__version__ = "0.1.0"
