"""Occupancy-centric driving scene toolkit.

Dense semantic occupancy grids generated from BEV layouts, geometric
condition buffers rendered from occupancy, and multi-view expansion
planning, all at desk scale with deterministic numerics.
"""

__version__ = "0.1.0"
