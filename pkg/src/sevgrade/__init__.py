"""Continuous disease-severity grading from few labelled healthy images.

Three stages: self-supervised patch-level one-class training, ensemble
pseudo-labelling with artefact denoising, and dual-centre retraining whose
two detectors are merged into one continuous score.
"""

__version__ = "0.1.0"
