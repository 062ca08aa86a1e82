"""
Monotonicity-based imaging of nonlinear anomalies in a linear background:
P1 forward solver, boundary excitation families, test rules and oracles.
"""

__version__ = "0.1.0"
