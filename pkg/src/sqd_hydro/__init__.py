"""Power-of-d load balancing with general service times: simulator and fluid limit."""

__version__ = "0.1.0"
