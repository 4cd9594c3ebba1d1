"""MultiQT: multimodal question tracking over paired audio and ASR streams."""

__version__ = "0.1.0"
