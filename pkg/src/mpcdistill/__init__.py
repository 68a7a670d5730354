"""Output-feedback policies distilled from economic NMPC solutions of an uncertain reactor."""

__version__ = "0.1.0"
