"""Diverse translation with a discrete domain latent inferred from the target."""

from .config import RunConfig, load_config
from .corpus import SynthSpec, generate_corpus
from .nets import ModelConfig, Seq2Seq

__all__ = ["ModelConfig", "RunConfig", "Seq2Seq", "SynthSpec", "generate_corpus", "load_config"]
