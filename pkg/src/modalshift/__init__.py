"""Parameter-importance analysis of modality fine-tuning on a toy speech-text language model."""

__version__ = "0.1.0"
