"""Predicting remaining sedentary periods from a few days of personal data.

Models: population mean, per-person GP, pooled GP, multi-task GP, and a
weighted blend of population and personal linear regressors.
"""

__version__ = "0.1.0"
