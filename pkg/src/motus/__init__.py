"""Self-supervised pre-training and fine-tuning of movement classifiers for wearable sensor suits."""

__version__ = "0.1.0"
