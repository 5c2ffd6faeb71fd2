"""Motion planning, calibration, and benchmark simulation for a 6-DoF
remote-center-of-motion tool arm performing peg transfer."""

__version__ = "0.1.0"
