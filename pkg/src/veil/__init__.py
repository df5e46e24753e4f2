"""Reversible voice-privacy toolkit.

Generates speaker-adversarial perturbations with an encoder/dual-decoder
network, jointly trains a removal net that predicts and subtracts them to
restore the original audio, and evaluates protection and restoration with
verification, quality, content and prosody metrics.
"""

__version__ = "0.1.0"
