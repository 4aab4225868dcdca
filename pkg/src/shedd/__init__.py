"""Semi-supervised heterogeneous domain adaptation via disentangled dual
encoders, consistency-regularized pseudo-labelling, and a from-scratch
autodiff engine."""

__version__ = "0.1.0"
