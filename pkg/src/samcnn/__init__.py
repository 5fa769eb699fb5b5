"""samCNN neural rerankers for short-text retrieval."""

__version__ = "0.1.0"
