"""Multi-dialect text-to-speech toolkit.

Library plus CLI covering the full desk-scale path: text frontend, dialect
conditioning, a routed transformer encoder, duration modeling, flow-matching
mel decoding, Griffin-Lim waveform synthesis, objective metrics, and a
quality-gated dataset generation pipeline.
"""

__version__ = "0.1.0"
