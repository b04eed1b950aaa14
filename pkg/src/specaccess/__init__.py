"""Learning-based spectrum access: occupancy model, estimation, sensing policies and coordination."""

__version__ = "0.1.0"
