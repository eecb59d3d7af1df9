"""FineTag: bilinear-pooled multi-attribute classification head with ranking losses."""

__version__ = "0.1.0"
