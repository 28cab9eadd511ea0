"""Desk-scale few-shot NER laboratory.

A miniature decoder-only transformer (RMSNorm, SwiGLU, RoPE, grouped-query
attention) built on an in-package reverse-mode autodiff engine, fine-tuned
with low-rank adapters under a combined token + contrastive objective, and
evaluated with constrained extraction decoding over N-way K-shot episodes.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: F401
from .model import ModelConfig, contrastive_tap_layer, forward, init_params  # noqa: F401
from .lora import LoraSpec, attach, merge  # noqa: F401
