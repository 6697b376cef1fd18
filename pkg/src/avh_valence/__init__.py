"""Valence assessment of auditory verbal hallucinations from mobile data.

End-to-end pipeline: mobile-sensing feature streams, sonification of hourly
series into log-mel spectrograms, a convolutional audio embedder, ROCKET
featurization, diary text aggregation, and fused dense-network prediction of
four EMA valence questions. Everything is seeded and reproducible; a synthetic
cohort generator stands in for the private clinical dataset.
"""

__version__ = "0.1.0"

QUESTIONS = ("negativeness", "loudness", "control", "power")
