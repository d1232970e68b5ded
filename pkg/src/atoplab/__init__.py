"""Adversarial training on purification: random transforms, a generator-based
purifier fine-tuned with a classification loss, and adaptive evaluation."""

__version__ = "0.1.0"
