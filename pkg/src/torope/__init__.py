"""Time-and-order rotary position embeddings for event-stream recommenders."""

__version__ = "0.1.0"
