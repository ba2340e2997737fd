"""Scene-memory transformer agents for simulated indoor navigation."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .autodiff import ParamStore, Tensor, backward, no_grad
from .embedding import EmbeddingConfig, Embedder, Observation
from .memory import SceneMemory
from .policy import PolicyConfig, PolicyNetwork

__all__ = ["BACKEND", "EmbeddingConfig", "Embedder", "Observation", "ParamStore",
           "PolicyConfig", "PolicyNetwork", "SceneMemory", "Tensor", "__version__",
           "backward", "no_grad"]
