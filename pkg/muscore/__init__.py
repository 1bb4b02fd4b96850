"""
muscore: zero-shot multimodal anomaly classification and segmentation

Unlabeled samples score each other:
- Curvature-gated point grouping for 3D patches
- Similarity-weighted multi-degree neighborhood aggregation
- Mutual patch scoring with interval averaging and cross-modal enhancement
- Sample-level re-scoring over a window-masked similarity graph
"""

__version__ = "1.0.0"
