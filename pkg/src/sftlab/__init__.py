"""Selective fine-tuning laboratory for incremental domain adaptation of
end-to-end sequence models."""

__version__ = "0.1.0"
