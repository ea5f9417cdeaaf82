"""Long-tailed classification with real data plus a noisy synthetic complement.

Modules: data (splits, augmentation, batches), syngen (procedural synthetic
provider), mixer (MixUp/CutMix), model (numpy network), contrastive (noise-aware
supervised contrastive losses, KNN correction, prototypes), trainer, cli.
"""

__version__ = "0.1.0"
