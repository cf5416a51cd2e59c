"""Engine configuration: one YAML file plus environment-held secrets.

Everything tunable lives in the file (endpoints, model names, strategy
hyperparameters, template version, sandbox limits). The API key is the one
deliberate exception: it comes only from the environment, and a key found
inside the file is rejected outright so it cannot end up in version
control.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .errors import IoFailure, SchemaViolation
from .gateway import (
    ChatBackend,
    EmbedBackend,
    Gateway,
    HashEmbedder,
    OpenAIChatBackend,
    OpenAIEmbedBackend,
    ReplayChatBackend,
    ScriptedChatBackend,
    ScriptRule,
)
from .optimizer import StrategyConfig
from .prompting import TEMPLATE_VERSION, PromptBuilder

DEFAULT_API_KEY_ENV = "TEXTBFGS_API_KEY"
FALLBACK_API_KEY_ENV = "OPENAI_API_KEY"

CHAT_KINDS = ("openai", "replay", "scripted")
EMBED_KINDS = ("openai", "hash")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "openai"
    base_url: str = "http://localhost:8000/v1"
    chat_model: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0
    retries: int = 3
    fixture: str = ""   # replay kind: path to the recorded fixture
    script: str = ""    # scripted kind: path to the rule file


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "hash"
    dim: int = 64
    seed: int = 0
    model: str = ""     # openai kind
    base_url: str = ""  # openai kind; empty = share the chat base_url


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 4096
    extra_params: Mapping[str, object] = field(default_factory=dict)

    def as_request_kwargs(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "extra_params": dict(self.extra_params),
        }


@dataclass(frozen=True)
class PromptConfig:
    template_version: str = TEMPLATE_VERSION
    failure_budget: int = 4096
    per_test_budget: int = 1024


@dataclass(frozen=True)
class SandboxConfig:
    runner_cmd: tuple[str, ...] = ()  # empty = the built-in python runner
    grace: float = 10.0


@dataclass(frozen=True)
class EngineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)

    # -- factories ------------------------------------------------------------

    def make_chat_backend(self, env: Mapping[str, str] | None = None) -> ChatBackend:
        cfg = self.backend
        if cfg.kind == "replay":
            return ReplayChatBackend(_require_path(cfg.fixture, "backend.fixture"))
        if cfg.kind == "scripted":
            return load_script(_require_path(cfg.script, "backend.script"))
        return OpenAIChatBackend(
            base_url=cfg.base_url,
            model=cfg.chat_model,
            api_key=_api_key(cfg.api_key_env, env),
            timeout=cfg.timeout,
            retries=cfg.retries,
        )

    def make_embed_backend(self, env: Mapping[str, str] | None = None) -> EmbedBackend:
        cfg = self.embedding
        if cfg.kind == "hash":
            return HashEmbedder(dim=cfg.dim, seed=cfg.seed)
        return OpenAIEmbedBackend(
            base_url=cfg.base_url or self.backend.base_url,
            model=cfg.model,
            dim=cfg.dim,
            api_key=_api_key(self.backend.api_key_env, env),
            retries=self.backend.retries,
        )

    def make_gateway(self, env: Mapping[str, str] | None = None) -> Gateway:
        return Gateway(self.make_chat_backend(env), self.make_embed_backend(env))

    def make_builder(self) -> PromptBuilder:
        return PromptBuilder(
            template_version=self.prompts.template_version,
            failure_budget=self.prompts.failure_budget,
            per_test_budget=self.prompts.per_test_budget,
            sampling=self.sampling.as_request_kwargs(),
        )

    def runner_cmd(self) -> list[str] | None:
        return list(self.sandbox.runner_cmd) or None


def _api_key(api_key_env: str, env: Mapping[str, str] | None) -> str | None:
    env = os.environ if env is None else env
    return env.get(api_key_env) or env.get(FALLBACK_API_KEY_ENV)


def _require_path(value: str, name: str) -> str:
    if not value:
        raise SchemaViolation(f"config field {name!r} is required for this backend kind")
    return value


def load_script(path: str | Path) -> ScriptedChatBackend:
    """Build a scripted backend from a rule file.

    Format: {"name": ..., "default": "...", "rules": [{"when_contains":
    ["needle", ...], "text": "..."}]}. Rules are tried in order; the first
    whose needles all appear in the flattened prompt wins.
    """
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no script file at {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise SchemaViolation(f"{path}: script must be an object")
    rules = []
    for i, raw in enumerate(data.get("rules", [])):
        if not isinstance(raw, dict) or "text" not in raw:
            raise SchemaViolation(f"{path}: rule {i} needs a 'text' field")
        needles = raw.get("when_contains", [])
        if not isinstance(needles, list) or not all(isinstance(n, str) for n in needles):
            raise SchemaViolation(f"{path}: rule {i} 'when_contains' must be a list of strings")
        rules.append(ScriptRule(text=raw["text"], when_contains=tuple(needles)))
    return ScriptedChatBackend(
        rules, default=data.get("default", ""), name=data.get("name", path.stem)
    )


_SECTIONS = ("backend", "embedding", "strategy", "sampling", "prompts", "sandbox")


def config_from_dict(data: dict, base_dir: Path | None = None) -> EngineConfig:
    """Validate a parsed config mapping; unknown keys are typos, not options."""
    if not isinstance(data, dict):
        raise SchemaViolation("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise SchemaViolation(f"unknown config sections: {sorted(unknown)}")
    for section in _SECTIONS:
        if section in data and not isinstance(data[section], dict):
            raise SchemaViolation(f"config section {section!r} must be a mapping")

    backend_raw = dict(data.get("backend", {}))
    if "api_key" in backend_raw:
        raise SchemaViolation(
            "the API key must come from the environment "
            f"(default {DEFAULT_API_KEY_ENV}), never from the config file"
        )
    if backend_raw.get("kind", "openai") not in CHAT_KINDS:
        raise SchemaViolation(f"backend.kind must be one of {CHAT_KINDS}")
    embed_raw = dict(data.get("embedding", {}))
    if embed_raw.get("kind", "hash") not in EMBED_KINDS:
        raise SchemaViolation(f"embedding.kind must be one of {EMBED_KINDS}")

    if base_dir is not None:
        for key in ("fixture", "script"):
            if backend_raw.get(key):
                backend_raw[key] = str((base_dir / backend_raw[key]).resolve())

    sandbox_raw = dict(data.get("sandbox", {}))
    if "runner_cmd" in sandbox_raw:
        cmd = sandbox_raw["runner_cmd"]
        if cmd is None:
            sandbox_raw["runner_cmd"] = ()
        elif isinstance(cmd, list) and all(isinstance(p, str) for p in cmd):
            sandbox_raw["runner_cmd"] = tuple(cmd)
        else:
            raise SchemaViolation("sandbox.runner_cmd must be a list of strings or null")

    try:
        return EngineConfig(
            backend=BackendConfig(**backend_raw),
            embedding=EmbeddingConfig(**embed_raw),
            strategy=StrategyConfig(**data.get("strategy", {})),
            sampling=SamplingConfig(**data.get("sampling", {})),
            prompts=PromptConfig(**data.get("prompts", {})),
            sandbox=SandboxConfig(**sandbox_raw),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(f"bad config value: {exc}") from exc


def load_config(path: str | Path | None) -> EngineConfig:
    """Load a YAML config file; None yields the built-in defaults."""
    if path is None:
        return EngineConfig()
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no config file at {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SchemaViolation(f"{path}: invalid YAML ({exc})") from exc
    if data is None:
        data = {}
    return config_from_dict(data, base_dir=path.parent)
