"""Cross-modal place recognition at desk scale.

Two branches (image and LiDAR point cloud) are trained in three stages to
share a descriptor space; retrieval is exact nearest-neighbor search with
recall@k / recall@1% evaluation protocols.
"""

__version__ = "0.1.0"
