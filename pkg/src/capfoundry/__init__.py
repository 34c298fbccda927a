"""capfoundry: two-stage multi-domain caption pipeline with synthesis, metrics,
caption-bridged reasoning evaluation, and a blind pairwise review service."""

__version__ = "0.1.0"
