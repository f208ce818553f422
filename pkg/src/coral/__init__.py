"""Composable orchestration of independent components coordinated by behavior trees."""

__version__ = "0.1.0"
