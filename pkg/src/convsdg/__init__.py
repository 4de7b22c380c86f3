"""ConvSDG: LLM-generated session data for conversational dense retrieval."""

__version__ = "0.1.0"
