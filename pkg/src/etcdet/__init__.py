"""etcdet: extratropical-cyclone detection pipeline.

Submodules: grid (lat-lon fields + geometry), tracking (center detection and
track linking), labels (annotation store and review workflow), augment
(training-time image transforms), detector (single-shot detector built on
numpy with hand-coded gradients), metrics (PR curves, AP, mAP), synth
(deterministic synthetic data), cli, service.
"""

__version__ = "0.1.0"
