"""Natural-language directions to behavior plans on navigation graphs."""

__version__ = "0.1.0"
