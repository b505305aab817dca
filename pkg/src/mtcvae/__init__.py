"""Chunk-wise variational autoencoder separating content from motion in video."""
from .datakit import (
    ChunkWindow, Dataset, ShapesConfig, MovingMNISTConfig, chunk_video, generate_moving_mnist,
    generate_moving_shapes, load_dataset, sample_chunk_window, save_dataset, split_dataset, unchunk,
)
from .losses import blind_reenactment_loss, extended_reconstruction, kl_regularizers
from .model import MTCVAE, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .inference import reconstruct_video, reenact, traverse_between, traverse_unit

__version__ = "0.1.0"
