"""Motion style transfer laboratory.

Four-moment style statistics, statistics-fused attention, and
consistency-regularized adversarial training over BVH motion capture data.
"""

__version__ = "0.1.0"
