"""Settings resolution: command-line flags > TREECODER_* environment > YAML file > defaults."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .domain import AssemblyMode, RunConfig
from .errors import ConfigurationError
from .llm import BackendRef, Script

logger = logging.getLogger(__name__)

ENV_PREFIX = "TREECODER_"


@dataclass(frozen=True)
class Settings:
    backend_decision: str | None = None
    backend_implementer: str | None = None
    scripted: str | None = None
    sandbox: str = "subprocess"
    sandbox_timeout: float = 60.0
    catalog: str | None = None
    templates: str | None = None
    run_root: str = "runs"
    max_retries: int = 3
    parallelism: int = 4
    assembly: str = "deterministic"
    pair_programming: bool = True
    knowledge_base: bool = True
    knowledge_k: int = 2
    kb_team_leader: str | None = None
    kb_coder: str | None = None
    compare: str | None = None
    prices: dict[str, dict[str, float]] = field(default_factory=dict)


_FIELDS = {f.name: f for f in fields(Settings)}


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELDS[name].type
    if value is None:
        return None
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
    except ValueError as exc:
        raise ConfigurationError(f"setting {name}: {exc}") from None
    if name == "prices":
        if not isinstance(value, Mapping):
            raise ConfigurationError("setting prices must map model names to {prompt, completion}")
        return {str(k): {"prompt": float(v["prompt"]), "completion": float(v["completion"])}
                for k, v in value.items()}
    return str(value)


def _apply(base: Settings, values: Mapping[str, Any], source: str) -> Settings:
    changes = {}
    for k, v in values.items():
        if k not in _FIELDS:
            raise ConfigurationError(f"{source}: unknown setting {k!r}")
        if v is not None:
            changes[k] = _coerce(k, v)
    return replace(base, **changes)


def load_file(path: str | Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return data


def from_env(env: Mapping[str, str]) -> dict[str, str]:
    return {k[len(ENV_PREFIX):].lower(): v for k, v in env.items()
            if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in _FIELDS and k != ENV_PREFIX + "PRICES"}


def resolve(flags: Mapping[str, Any], env: Mapping[str, str], config_path: str | None = None) -> Settings:
    settings = Settings()
    if config_path:
        settings = _apply(settings, load_file(config_path), str(config_path))
    settings = _apply(settings, from_env(env), "environment")
    settings = _apply(settings, {k: v for k, v in flags.items() if k in _FIELDS}, "flags")
    if settings.sandbox not in ("subprocess", "container"):
        raise ConfigurationError(f"sandbox must be subprocess or container, got {settings.sandbox!r}")
    AssemblyMode(settings.assembly)
    return settings


def parse_backend(text: str) -> dict[str, str]:
    """``scripted`` or ``remote,model=gpt-4o,endpoint=https://...,key_env=OPENAI_API_KEY``."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts or parts[0] not in ("scripted", "remote"):
        raise ConfigurationError(f"backend must start with 'scripted' or 'remote': {text!r}")
    out = {"kind": parts[0]}
    for p in parts[1:]:
        k, sep, v = p.partition("=")
        if not sep or k not in ("model", "endpoint", "key_env", "max_in_flight", "timeout"):
            raise ConfigurationError(f"bad backend option {p!r}")
        out[k] = v
    return out


def script_path(scripted: str | None, name: str) -> Path:
    if not scripted:
        raise ConfigurationError("scripted backend selected but no --scripted fixture given")
    p = Path(scripted)
    if p.is_file():
        return p
    cand = p / f"{name}.yaml"
    if not cand.is_file():
        raise ConfigurationError(f"scripted fixture not found: {cand}")
    return cand


def backends(settings: Settings, script_name: str = "script") -> tuple[BackendRef, BackendRef]:
    """Decision-maker and implementer backends; both scripted ones share a single script."""
    specs = {}
    for role, text in (("decision", settings.backend_decision), ("implementer", settings.backend_implementer)):
        if text is None:
            if settings.scripted is None:
                raise ConfigurationError(f"no {role} backend configured (use --backend-{role} or --scripted)")
            text = "scripted"
        specs[role] = parse_backend(text)
    script = None
    out = []
    for role in ("decision", "implementer"):
        spec = specs[role]
        if spec["kind"] == "scripted":
            if script is None:
                script = Script.from_yaml(script_path(settings.scripted, script_name))
            out.append(BackendRef("scripted", f"scripted-{role}", script=script))
        else:
            for need in ("model", "endpoint", "key_env"):
                if need not in spec:
                    raise ConfigurationError(f"remote {role} backend needs {need}=")
            out.append(BackendRef("remote", spec["model"], spec["endpoint"], spec["key_env"],
                                  max_in_flight=int(spec.get("max_in_flight", 4)),
                                  timeout=float(spec.get("timeout", 120))))
    return out[0], out[1]


def run_config(settings: Settings, script_name: str = "script") -> RunConfig:
    decision, implementer = backends(settings, script_name)
    return RunConfig(
        decision_model=decision, implementer_model=implementer, max_function_retries=settings.max_retries,
        module_parallelism=settings.parallelism, sandbox_timeout=settings.sandbox_timeout,
        assembly_mode=AssemblyMode(settings.assembly), pair_programming=settings.pair_programming,
        use_knowledge_base=settings.knowledge_base, knowledge_k=settings.knowledge_k)
