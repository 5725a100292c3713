"""sia3d: desk-scale 3D dense captioning with late-aggregated captions.

Detect objects in a synthetic point-cloud room with vote-based instance
queries, caption contextual relations with separately decoded context
queries, pool everything into a global descriptor, and concatenate the
per-object captions afterwards.
"""

__version__ = "0.1.0"

from . import ndtensor, geometry, scenegen, backbone, queries, dualdecoder
from . import tgi, heads, losses, evalkit, config, model, trainer

__all__ = ["ndtensor", "geometry", "scenegen", "backbone", "queries",
           "dualdecoder", "tgi", "heads", "losses", "evalkit", "config",
           "model", "trainer", "__version__"]
