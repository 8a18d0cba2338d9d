"""Course tutoring service: corpus ingestion, hybrid retrieval, guarded answering."""

__version__ = "0.1.0"
