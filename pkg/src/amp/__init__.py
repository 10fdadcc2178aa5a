"""Adaptive MLP pruning for toy vision transformers.

Taylor-based neuron importance under a label-free entropy criterion,
binary-search adaptive per-block pruning, structural weight surgery and
distillation-based recovery, with a small reverse-mode autodiff engine
underneath.
"""

__version__ = "0.1.0"
