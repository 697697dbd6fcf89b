"""semlink: split-inference semantic traffic control."""

__version__ = "0.1.0"
