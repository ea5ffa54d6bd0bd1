"""Episodic few-shot learning with a compact trainable encoder."""

from .dataset import DatasetIndex, ImageEntry, generate_synthetic, load_manifest
from .encoder import EncoderConfig, EncoderState, encode, init_encoder, load_weights, save_weights
from .episodes import Episode, EpisodeSpec, build_test_tasks, sample_episodes
from .fewshot import TrainConfig, bsr_loss, meta_train

__all__ = [
    "DatasetIndex", "ImageEntry", "generate_synthetic", "load_manifest",
    "EncoderConfig", "EncoderState", "encode", "init_encoder", "load_weights", "save_weights",
    "Episode", "EpisodeSpec", "build_test_tasks", "sample_episodes",
    "TrainConfig", "bsr_loss", "meta_train",
]
