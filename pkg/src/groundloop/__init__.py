"""Region-level semantic grounding with agent/verifier feedback loops."""

__version__ = "0.1.0"
