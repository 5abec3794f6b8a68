"""Text-to-SQL fine-tuning pipeline on a from-scratch numpy transformer stack."""

__version__ = "0.1.0"
