"""Control contraction metrics and contraction-constrained MPC with disturbance forecasts."""

__version__ = "0.1.0"
