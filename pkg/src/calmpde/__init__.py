"""Mesh-agnostic neural PDE surrogate built from continuous convolutions
with learnable query points and a transformer processor in latent space."""

from .codec import CodecConfig, Decoder, Encoder, LatentState
from .config import RunConfig, load_config
from .model import CalmPDE
from .processor import Processor, ProcessorConfig
from .training import TrainConfig

__all__ = ["CalmPDE", "CodecConfig", "Decoder", "Encoder", "LatentState", "Processor",
           "ProcessorConfig", "RunConfig", "TrainConfig", "load_config"]
__version__ = "0.1.0"
