"""quadcd: four-channel contrastive decoding engine.

Per decode step the engine compares the token distributions a backend
produces under four conditioning channels (original image, dual and
residual decoupled exposures, and a non-visual text-only pass), screens
the decoupled channels against the non-visual one by Jensen-Shannon
divergence, and combines logits contrastively before sampling.
"""

__version__ = "0.1.0"
