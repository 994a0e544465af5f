"""
🚦 TAANP traffic toolkit
Task-aware neural processes for network-wide traffic flow estimation and
forecasting from sparse fixed sensors plus floating car data.
"""

__version__ = "1.0.0"
