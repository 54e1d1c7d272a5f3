"""Data poisoning versus group robustness on synthetic grouped data."""
