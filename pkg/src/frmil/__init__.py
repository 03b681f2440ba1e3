"""Desk-scale multiple-instance-learning engine on instance-feature bags.

Subpackages:
  autodiff   tensor arithmetic with reverse-mode differentiation
  bagdata    bag store I/O, synthetic generation, splits, balanced sampling
  baseline   non-parametric magnitude baseline and margin estimation
  model      max-instance selection, re-calibration, positional encoding,
             attention pooling, comparator heads
  objectives bag / max-instance / feature-magnitude losses
  training   Adam, training loop, metrics, checkpoints
  cli        command-line entry point
"""

__version__ = "0.1.0"
