"""Service configuration: TOML file plus environment overrides.

Environment always wins over the file. API keys are never read from the
file at all; they come from the environment variable TUTOR_LLM_API_KEY.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pipeline import PipelineConfig
from .retrieval import DEFAULT_B, DEFAULT_K1, DEFAULT_K_RRF

ENV_API_KEY = "TUTOR_LLM_API_KEY"
ENV_BASE_URL = "TUTOR_LLM_BASE_URL"
ENV_EMBED_MODEL = "TUTOR_EMBED_MODEL"
ENV_CHAT_MODEL = "TUTOR_CHAT_MODEL"
ENV_PROVIDER = "TUTOR_PROVIDER"
ENV_EMBEDDER = "TUTOR_EMBEDDER"
ENV_MOCK_SCRIPT = "TUTOR_MOCK_SCRIPT"
ENV_DATA_DIR = "TUTOR_DATA_DIR"
ENV_LISTEN_ADDR = "TUTOR_LISTEN_ADDR"

DEFAULT_SERVICE_TOKEN_ENV = "TUTOR_SERVICE_TOKEN"


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"  # "mock" | "http"
    embedder: str = "fallback"  # "fallback" | "http"
    chat_model: str = "tutor-chat"
    embed_model: str = "tutor-embed"
    base_url: Optional[str] = None
    mock_script: Optional[str] = None
    embed_dimension: int = 64
    timeout_ms: int = 30_000
    max_retries: int = 2
    concurrency: int = 8


@dataclass(frozen=True)
class RetrievalConfig:
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    k_rrf: int = DEFAULT_K_RRF


@dataclass(frozen=True)
class TutorConfig:
    listen_addr: str = "127.0.0.1:8080"
    data_dir: Path = Path("data")
    service_token_env: str = DEFAULT_SERVICE_TOKEN_ENV
    ui_dir: Optional[Path] = None
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @property
    def host(self) -> str:
        return self.listen_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen_addr.rsplit(":", 1)[1])


def load_config(
    path: Optional[Path | str] = None, env: Optional[Mapping[str, str]] = None
) -> TutorConfig:
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None and Path(path).exists():
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))

    provider_data = data.get("provider", {})
    provider = ProviderConfig(
        kind=env.get(ENV_PROVIDER, provider_data.get("kind", "mock")),
        embedder=env.get(ENV_EMBEDDER, provider_data.get("embedder", "fallback")),
        chat_model=env.get(ENV_CHAT_MODEL, provider_data.get("chat_model", "tutor-chat")),
        embed_model=env.get(ENV_EMBED_MODEL, provider_data.get("embed_model", "tutor-embed")),
        base_url=env.get(ENV_BASE_URL, provider_data.get("base_url")) or None,
        mock_script=env.get(ENV_MOCK_SCRIPT, provider_data.get("mock_script")) or None,
        embed_dimension=int(provider_data.get("embed_dimension", 64)),
        timeout_ms=int(provider_data.get("timeout_ms", 30_000)),
        max_retries=int(provider_data.get("max_retries", 2)),
        concurrency=int(provider_data.get("concurrency", 8)),
    )

    retrieval_data = data.get("retrieval", {})
    retrieval = RetrievalConfig(
        k1=float(retrieval_data.get("k1", DEFAULT_K1)),
        b=float(retrieval_data.get("b", DEFAULT_B)),
        k_rrf=int(retrieval_data.get("k_rrf", DEFAULT_K_RRF)),
    )

    pipeline_data = data.get("pipeline", {})
    pipeline = PipelineConfig(
        chat_model=provider.chat_model,
        temperature=float(pipeline_data.get("temperature", 0.0)),
        max_tokens=int(pipeline_data.get("max_tokens", 1024)),
        max_subquestions=int(pipeline_data.get("max_subquestions", 5)),
        context_chunk_cap=int(pipeline_data.get("context_chunk_cap", 12)),
        max_rewrites=int(pipeline_data.get("max_rewrites", 2)),
        conversation_window=int(pipeline_data.get("conversation_window", 6)),
        min_solution_lines=int(pipeline_data.get("min_solution_lines", 3)),
        code_overlap_threshold=float(pipeline_data.get("code_overlap_threshold", 0.5)),
    )

    return TutorConfig(
        listen_addr=env.get(ENV_LISTEN_ADDR, data.get("listen_addr", "127.0.0.1:8080")),
        data_dir=Path(env.get(ENV_DATA_DIR, data.get("data_dir", "data"))),
        service_token_env=data.get("service_token_env", DEFAULT_SERVICE_TOKEN_ENV),
        ui_dir=Path(data["ui_dir"]) if data.get("ui_dir") else None,
        provider=provider,
        retrieval=retrieval,
        pipeline=pipeline,
    )
