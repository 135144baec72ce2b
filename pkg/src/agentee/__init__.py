"""Confidential LLM-agent pipelines on simulated realms."""

__version__ = "0.1.0"
