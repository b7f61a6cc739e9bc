"""branchcap: numerics for branching capacity and Brownian-snake capacity."""

__version__ = "0.1.0"
