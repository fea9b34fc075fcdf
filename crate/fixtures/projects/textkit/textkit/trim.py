"""Shortening text."""


def truncate(text, width, ellipsis="..."):
    """Shorten text to at most width characters, marking cuts with ellipsis."""
    return text if len(text) < width else text[:width] + ellipsis
