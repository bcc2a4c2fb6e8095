"""Local linearity regularization toolkit: autodiff core, models, attacks,
linearity measurement, training loops and an experiment harness."""

__version__ = "0.1.0"
