"""modislab: coupled per-modality VAEs with adversarially aligned latents,
semi-supervised class structure, and the synthetic-data evaluation suite.
"""

__version__ = "0.1.0"
