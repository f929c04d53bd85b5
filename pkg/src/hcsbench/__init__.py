"""Evaluation and curation stack for high-content screening embeddings."""
__version__ = "0.1.0"
