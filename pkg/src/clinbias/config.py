"""Run configuration: one flat YAML file plus environment overrides.

Secrets never live in the file; the config names the environment
variable that holds the API token.  Three path settings can be
overridden from the environment so shared configs work across machines
with differently located reference data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from .errors import ValidationError
from .provider import (
    DecodingParams,
    FlakyBackend,
    HashMockBackend,
    JsonHttpBackend,
    OpenAICompatBackend,
    UniformMockBackend,
)

ENV_CODE_TABLE = "CLINBIAS_ICD10CM_ORDER"
ENV_FEMALE_CODES = "CLINBIAS_FEMALE_CODES"
ENV_MALE_CODES = "CLINBIAS_MALE_CODES"

BACKEND_KINDS = ("json-http", "openai", "hash-mock", "uniform-mock")


@dataclass(frozen=True)
class RunConfig:
    model_id: str
    backend_kind: str = "hash-mock"
    base_url: str | None = None
    auth_token_env: str | None = None  # env var NAME, never the token itself
    timeout: float = 60.0
    max_retries: int = 2
    retry_delay: float = 0.5

    embed_model_id: str | None = None  # defaults to model_id
    embed_dim: int = 256  # local hashing embedder when no backend embeds

    probe_mode: str = "joint"
    max_workers: int = 4
    temperature: float = 0.0
    max_tokens: int = 256
    seed: int | None = None

    code_table: str | None = None
    female_codes: str | None = None
    male_codes: str | None = None
    names_csv: str | None = None
    stimuli_path: str | None = None
    records_path: str | None = None
    template_path: str | None = None
    cache_dir: str = "runs/cache"
    out_dir: str = "runs/out"

    names_per_group: int = 5
    mock_probability: float = 0.5  # uniform-mock only
    mock_salt: str = ""  # hash-mock only
    flaky_fail_after: int | None = None  # testing knob: fail the Nth backend call

    def __post_init__(self):
        if not self.model_id:
            raise ValidationError("model_id must be non-empty")
        if self.backend_kind not in BACKEND_KINDS:
            raise ValidationError(
                f"backend_kind must be one of {BACKEND_KINDS}, got {self.backend_kind!r}"
            )
        if self.backend_kind in ("json-http", "openai") and not self.base_url:
            raise ValidationError(f"backend_kind {self.backend_kind} requires base_url")
        if self.probe_mode not in ("joint", "first_token"):
            raise ValidationError(f"probe_mode must be joint or first_token, got {self.probe_mode!r}")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def decoding_params(self) -> DecodingParams:
        return DecodingParams(
            temperature=self.temperature, max_tokens=self.max_tokens, seed=self.seed
        )


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}

_ENV_PATH_OVERRIDES = (
    ("code_table", ENV_CODE_TABLE),
    ("female_codes", ENV_FEMALE_CODES),
    ("male_codes", ENV_MALE_CODES),
)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ValidationError(f"{path}: bad YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys: {', '.join(unknown)}")
    for field_name, env_name in _ENV_PATH_OVERRIDES:
        value = os.environ.get(env_name)
        if value:
            raw[field_name] = value
    try:
        return RunConfig(**raw)
    except TypeError as e:
        raise ValidationError(f"{path}: {e}") from e


def require_paths(config: RunConfig, *field_names) -> dict:
    """Resolve the named path settings, failing loudly on the first one
    that is unset or missing on disk."""
    out = {}
    for name in field_names:
        value = getattr(config, name)
        if not value:
            hint = ""
            for fname, env in _ENV_PATH_OVERRIDES:
                if fname == name:
                    hint = f" (config key {name!r} or env {env})"
            raise ValidationError(f"required path {name!r} is not configured{hint}")
        if not os.path.exists(value):
            raise ValidationError(f"{name}: no such file: {value}")
        out[name] = value
    return out


def make_backend(config: RunConfig):
    if config.backend_kind == "hash-mock":
        backend = HashMockBackend(salt=config.mock_salt)
    elif config.backend_kind == "uniform-mock":
        backend = UniformMockBackend(probability=config.mock_probability)
    else:
        token = None
        if config.auth_token_env:
            token = os.environ.get(config.auth_token_env)
            if not token:
                raise ValidationError(
                    f"auth_token_env names {config.auth_token_env!r} but that "
                    f"environment variable is not set"
                )
        cls = JsonHttpBackend if config.backend_kind == "json-http" else OpenAICompatBackend
        backend = cls(
            base_url=config.base_url,
            auth_token=token,
            timeout=config.timeout,
            max_retries=config.max_retries,
            retry_delay=config.retry_delay,
        )
    if config.flaky_fail_after is not None:
        backend = FlakyBackend(backend, fail_after=config.flaky_fail_after)
    return backend
