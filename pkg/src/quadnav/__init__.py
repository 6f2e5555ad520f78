"""Conservative RL for quadrotor waypoint navigation, with HJ reachability analysis."""

__version__ = "0.1.0"
