"""Desk-scale 3D-aware segmentation data factory.

A frozen latent-conditioned tri-plane radiance field over a procedural
scene family, a few-shot semantic decoder trained on a handful of rendered
annotations, and the machinery that turns the pair into unlimited
multi-view-consistent images, masks, depth maps, labeled point clouds,
inversions, and semantic edits.
"""

__version__ = "0.1.0"
