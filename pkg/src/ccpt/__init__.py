"""Continual contrastive pre-training on a stream of synthetic modalities.

A two-tower encoder is trained one modality at a time. Forgetting is held
back by replaying k-means-selected exemplars from a fixed-size buffer and by
distilling a frozen previous-stage copy's batch similarity rows.
"""

__version__ = "0.1.0"
