"""Two-phase discriminative autoencoder for multi-modality image fusion."""

__version__ = "0.1.0"

from .data import Image, ImagePair, PatchBatch, VideoSequence  # noqa: F401
from .fusion import AttentionConfig  # noqa: F401
from .losses import LossWeights  # noqa: F401
from .networks import DaeFuseModel, FeatureEmbedding, NetworkConfig  # noqa: F401
from .training import (  # noqa: F401
    Trainer,
    TrainingConfig,
    TrainingLog,
    fuse_pair,
    fuse_video,
    lr_schedule,
    train,
)
