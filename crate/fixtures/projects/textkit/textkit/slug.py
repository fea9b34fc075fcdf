"""URL slugs."""

import re


def slugify(text, sep="-"):
    """Lowercase text and join its alphanumeric runs with sep."""
    words = re.findall(r"[a-z0-9]+", text)
    return sep.join(words)
