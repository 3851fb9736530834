"""viewgraft: graft a misaligned inserted view into a multi-view scene.

A small, fully deterministic numpy stack: a tape autodiff engine, a
differentiable heightfield reconstructor, scene synthesis with controlled
misalignment, geometry-perturbation augmentation, the adaptation loop, and
an experiment layer with presets and an acceptance harness.
"""

__version__ = "0.1.0"
