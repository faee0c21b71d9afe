"""Geospatial embedding pipeline on a hierarchical spherical cell grid.

Subpackages and modules:

- s2geom: cell identifiers, tokens, hierarchy navigation, grid positions
- ingest: per-cell feature loading and global normalization
- raster: grouping patch cells under image cells and rasterizing feature grids
- nn: dense tensors with reverse-mode autodiff, AdamW, schedules, checkpoints
- mae: masked-autoencoder pretraining and per-cell embedding extraction
- downstream: probes, splits, fusion, location encoding, regression metrics
- synth: synthetic feature/label/embedding generator for end-to-end runs
- pipeline: staged orchestration with config hashing and resumability
- cli: command-line entry points
"""

__version__ = "0.1.0"
