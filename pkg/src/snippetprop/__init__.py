"""Representative-snippet summarization and propagation for weakly supervised action localization."""

__version__ = "0.1.0"
