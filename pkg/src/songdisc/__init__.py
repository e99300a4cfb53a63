"""Disentangled whole-song bird vocalization embeddings.

A dual-encoder capacity-constrained VAE separates each song's temporal
layout (per-frame global latents) from its type-discriminative content (a
single local vector learned from segment-shuffled input), plus the data,
analysis, clustering-evaluation, and CLI plumbing around it.
"""

__version__ = "0.1.0"
