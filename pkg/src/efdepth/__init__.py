"""Event-frame fusion for monocular depth estimation.

Pipeline: asynchronous events -> voxel grids -> per-modality reliability
masks -> pyramid encoders -> consensus attention fusion -> recurrent
decoder with confidence-normalized spatial propagation -> log-depth maps.
"""

__version__ = "0.1.0"
