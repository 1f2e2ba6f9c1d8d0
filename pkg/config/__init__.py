"""Configuration: environment settings and validated config models."""
