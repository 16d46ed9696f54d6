"""cohortkit: desk-scale user-targeting pipeline over a synthetic user world."""

__version__ = "0.1.0"
