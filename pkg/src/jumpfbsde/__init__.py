"""Controlled coupled FBSDEs with jumps: Monte-Carlo solvers, DPP value function and HJB-PIDE scheme."""

__version__ = "0.1.0"
