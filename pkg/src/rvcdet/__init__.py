"""Fast dynamic pillar voxelization and heatmap-crop false-positive filtering."""

__version__ = "0.1.0"
