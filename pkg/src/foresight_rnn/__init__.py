"""Stochastic hierarchical recurrent predictor with variance-guided
hidden-state refinement, a toy door-opening environment, and analysis tools.
"""

__version__ = "0.1.0"
