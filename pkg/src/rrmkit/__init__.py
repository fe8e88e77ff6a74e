"""Toolkit for training adversarially robust classifiers by matching a
frozen teacher's penultimate representations, with the standard baselines
(standard/fast/free adversarial training, distillation, dataset
robustification) and exact pass-count / wall-time benchmarking."""

__version__ = "0.1.0"
