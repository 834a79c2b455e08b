"""Domain-adversarial, concept-aligned misinformation detection on feature
vectors, with the multi-source target-error bound and its empirical terms."""

__version__ = "0.1.0"
