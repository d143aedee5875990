"""Incident-aware origin-destination flow prediction.

Incident effects on OD flows are estimated with synthetic controls and
placebo tests, learned from incident and network features, and added to a
normal-day forecast only where a cell is predicted to be affected.
"""

__version__ = "0.1.0"
