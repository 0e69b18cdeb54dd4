"""Retrieval-augmented multimodal sentiment regression with hierarchical prompts."""
__version__ = "0.1.0"
