"""Speech-text alignment pretraining testbed.

Contrastive (cosine / entropic-transport), ASR and mixed-sequence
pretraining objectives for a frozen encoder/decoder stack with a
trainable window-query projector, plus a two-stage training harness
and the matching evaluation metrics.
"""

__version__ = "0.1.0"
