"""Conjunctive query answering over incomplete knowledge graphs.

Queries with multiple missing entities are decomposed into root-to-leaf
paths, serialized tail-first with per-path positional ids, and fed to a
bidirectional self-attention encoder that predicts one entity distribution
per masked slot.  A mean-pooling projection baseline, a dataset generator
and a filtered-ranking evaluation harness round out the pipeline.
"""

__version__ = "0.1.0"

from dagquery.kg import KnowledgeGraph, Vocabulary, build_vocab, load_triples

__all__ = [
    "KnowledgeGraph",
    "Vocabulary",
    "build_vocab",
    "load_triples",
    "__version__",
]
