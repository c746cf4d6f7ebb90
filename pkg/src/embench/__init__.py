"""embench: deterministic benchmarking of frozen tile/slide embeddings."""

__version__ = "0.1.0"
