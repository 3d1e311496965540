"""Detail-preserving implicit surface reconstruction: truncated PSDF
features, pixel-aligned encoders, attention view aggregation, and
depth-filtered octree isosurface extraction."""
