"""Stylized glyph generation, layout planning and text-rendering evaluation at desk scale."""

__version__ = "0.1.0"
