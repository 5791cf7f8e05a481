"""Intrinsic MPSP trajectory optimization on SO(3).

Library plus CLI for finite-horizon attitude maneuvers of a variable-pitch
quadrotor and a single-main-rotor helicopter: an MPSP solver built on
left-trivialized sensitivities, an iLQR baseline, and a Pontryagin
single-shooting benchmark, with an experiment harness for nominal flips,
solver comparisons, and Monte Carlo sweeps.
"""

__version__ = "0.1.0"
