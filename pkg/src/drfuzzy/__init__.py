"""Attention-augmented CNN with a Gaussian fuzzy head for diabetic-retinopathy grading."""

__version__ = "0.1.0"
