"""
pallex: run application stages of duty-cycled Linux devices as early as
their dependencies allow, and account for the energy of each cycle.
"""

__version__ = "0.1.0"
