"""The exporter's single failure type."""


class ExportError(Exception):
    """Anything that prevents a valid embedding file from being written."""
