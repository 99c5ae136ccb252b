"""Night-time scene parsing with prompt-image guided dual-branch self-training."""

__version__ = "0.1.0"
