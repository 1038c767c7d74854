"""Cross-modal image / point-cloud place recognition at desk scale."""

__version__ = "0.1.0"
