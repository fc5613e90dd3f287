"""codeprov: mining, scoring, and statistical analysis of AI-generated code in commit histories."""

__version__ = "0.1.0"
