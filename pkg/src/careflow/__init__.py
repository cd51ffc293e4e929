"""Cross-modal feature transport with rectified flows for multimodal prediction."""

__version__ = "0.1.0"
