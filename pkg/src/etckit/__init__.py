"""Event-triggered control toolkit: learned certificates, simulation, bounds."""

__version__ = "0.1.0"
