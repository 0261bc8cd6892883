"""Prosody-driven token-level intent tagging and LLM plan disambiguation."""

__version__ = "0.1.0"
