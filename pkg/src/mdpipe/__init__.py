"""mdpipe: a desk-scale metadata aggregation pipeline over OAI-PMH."""

__version__ = "0.1.0"
