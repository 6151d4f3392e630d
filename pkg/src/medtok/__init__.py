"""Multimodal medical code tokenizer.

Fuses a frozen text embedding and a trainable knowledge-graph embedding
per medical code, quantizes the fused embeddings against a
region-partitioned learned codebook, and emits deterministic token
sequences plus token embeddings for downstream sequence models.
"""

__version__ = "0.1.0"
