"""
This package learns compositional chain-like Horn rules from knowledge graphs
by reducing sampled relation paths with a recurrent attention unit, and then
applies the learned rules to knowledge graph completion and to inductive
relation classification over long paths.
"""

__version__ = "0.1.0"
