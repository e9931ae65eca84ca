"""Desk-scale lab for audio-video alignment in a dual-branch diffusion transformer.

Synthetic paired sequences with a known event track stand in for real clips,
so alignment becomes a measurable quantity (see :mod:`harmonylab.synth`).
"""

__version__ = "0.1.0"
