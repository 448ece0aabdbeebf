"""Facade split-grammar toolkit.

Pipeline: a stochastic grammar generator produces (layout, procedure) pairs;
a sequence-to-sequence transformer maps flat rect layouts back to derivation
trees under grammar-masked decoding; a differentiable rasterizer then fits
the continuous sizing parameters against the target segmentation.
"""

__version__ = "0.1.0"
