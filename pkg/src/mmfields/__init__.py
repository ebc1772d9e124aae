"""Multi-modal voxel feature fields.

Joint reconstruction of radiance and two distilled semantic feature branches
(visual and language) on dense voxel grids, trained with hand-derived
gradients, plus query-driven scene decomposition, a CLI, and an HTTP service.
"""

__version__ = "0.1.0"

from . import (
    data,
    decompose,
    field,
    geometry,
    losses,
    metrics,
    pipeline,
    renderer,
    trainer,
)

__all__ = [
    "data",
    "decompose",
    "field",
    "geometry",
    "losses",
    "metrics",
    "pipeline",
    "renderer",
    "trainer",
    "__version__",
]
