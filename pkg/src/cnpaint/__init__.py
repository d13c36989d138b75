"""Collaborative stroke-based painting engine.

Subpackages: strokes (parameter grid + sequence documents), render (brush
compositor), masking (context/predict splits), autograd (reverse-mode engine),
model (masked denoising transformer), diffusion (noise schedule + sampler),
training (desk-scale trainer + synthetic data), metrics (evaluation),
service (HTTP/WebSocket paint server), cli (command line).
"""

__version__ = "0.1.0"

from .strokes import (
    STROKE_DIM,
    STROKE_FIELDS,
    BlockFullError,
    ClassLabel,
    GridLayout,
    Stroke,
    StrokeSequence,
    deserialize,
    load_sequence,
    locate_slot,
    save_sequence,
    serialize,
    validate_stroke,
)

__all__ = [
    "STROKE_DIM",
    "STROKE_FIELDS",
    "BlockFullError",
    "ClassLabel",
    "GridLayout",
    "Stroke",
    "StrokeSequence",
    "deserialize",
    "load_sequence",
    "locate_slot",
    "save_sequence",
    "serialize",
    "validate_stroke",
    "__version__",
]
