"""Multi-altitude neural radiance field with source-view attention conditioning."""

__version__ = "0.1.0"
