"""Description-driven image editing with reference attention bridges, desk scale."""

__version__ = "0.1.0"
