"""Personalised correction of suboptimal corrective labels, with a synthetic driving testbed."""

__version__ = "0.1.0"
