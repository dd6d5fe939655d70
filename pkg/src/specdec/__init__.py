"""Speculative decoding engine for a toy vision-language transformer.

Pipeline: synthetic multimodal data -> frozen target pretraining -> online
distillation of a one-layer draft with an elastic visual-token compressor
-> lossless chain/tree speculative decoding with latency analytics.
"""

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
