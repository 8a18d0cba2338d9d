"""Composition root wiring config into live components."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from .config import ENV_API_KEY, ProviderConfig, TutorConfig
from .corpus import CorpusStore
from .gateway import (
    FallbackEmbedder,
    FileAuditLog,
    Gateway,
    HttpChatProvider,
    HttpEmbedder,
    MockProvider,
)
from .persistence import Database, SessionLocks
from .pipeline import TutorPipeline
from .retrieval import RetrievalEngine


def build_provider(config: ProviderConfig, mock_script: Optional[str] = None):
    script_path = mock_script or config.mock_script
    if config.kind == "mock" or script_path:
        if script_path:
            return MockProvider.from_file(script_path)
        return MockProvider({})
    if not config.base_url:
        raise ValueError("provider.base_url (or TUTOR_LLM_BASE_URL) is required for kind=http")
    return HttpChatProvider(config.base_url, os.environ.get(ENV_API_KEY))


def build_embedder(config: ProviderConfig):
    if config.embedder == "http":
        if not config.base_url:
            raise ValueError("provider.base_url is required for embedder=http")
        return HttpEmbedder(config.base_url, os.environ.get(ENV_API_KEY), config.embed_model)
    return FallbackEmbedder(config.embed_dimension)


class TutorRuntime:
    """Everything the service and CLI need, built from one config."""

    def __init__(
        self,
        config: TutorConfig,
        provider=None,
        embedder=None,
        mock_script: Optional[str] = None,
    ):
        self.config = config
        data_dir = Path(config.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        self.db = Database(data_dir / "tutor.db")
        self.corpus = CorpusStore(data_dir / "courses")
        self.provider = provider if provider is not None else build_provider(
            config.provider, mock_script
        )
        self.embedder = embedder if embedder is not None else build_embedder(config.provider)
        self.gateway = Gateway(
            self.provider,
            self.embedder,
            audit=FileAuditLog(data_dir / "llm_audit.jsonl"),
            timeout_ms=config.provider.timeout_ms,
            max_retries=config.provider.max_retries,
            concurrency=config.provider.concurrency,
        )
        self.engine = RetrievalEngine(
            self.corpus,
            self.gateway,
            k1=config.retrieval.k1,
            b=config.retrieval.b,
            k_rrf=config.retrieval.k_rrf,
        )
        self.pipeline = TutorPipeline(self.engine, self.gateway, config.pipeline)
        self.session_locks = SessionLocks()

    def close(self) -> None:
        self.db.close()
