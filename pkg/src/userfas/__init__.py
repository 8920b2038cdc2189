"""Per-user face anti-spoofing with style-transfer spoof synthesis."""

__version__ = "0.1.0"
