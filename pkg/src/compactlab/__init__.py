"""Desk-scale lab for offloaded LSM compaction with boundary-crossing accounting."""

__version__ = "0.1.0"
