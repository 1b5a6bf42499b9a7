"""Trajeglish: discrete motion-token traffic modeling at desk scale."""

__version__ = "0.1.0"
