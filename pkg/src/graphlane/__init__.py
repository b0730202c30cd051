"""Graph reinforcement learning for cooperative lane changes on a two-ramp highway."""

__version__ = "0.1.0"
