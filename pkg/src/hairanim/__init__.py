"""Anchor-guided hair transfer and portrait animation on a synthetic toy domain.

The package covers the full loop: procedural portrait-video synthesis with
exact region masks, a deterministic hair-transfer compositor, warp-based
animation encoders, a dual-pathway gated decoder, decoupled two-phase
training, evaluation metrics, and a command-line pipeline.
"""

__version__ = "0.1.0"
