"""Run configuration: JSON file -> validated PipelineConfig."""
import hashlib
import json
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Optional

from .exceptions import ConfigurationError
from .prompts import template_hashes
from .replies import format_errors
from .serializers import (
    BackendConfigSerializer, FlagsSerializer, MockScriptSerializer, PipelineConfigSerializer,
)


BACKEND_ROLES = ('classifier', 'transformer', 'judge_quality', 'judge_following', 'generator')


@dataclass(frozen=True)
class MockScript:
    mode: str = 'always-succeed'
    n: int = 0
    p: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = ''
    model: str = 'mock'
    api_key_env: str = ''
    timeout: float = 60.0
    max_concurrency: int = 8
    params: dict = field(default_factory=dict)
    mock: MockScript = field(default_factory=MockScript)

    def share_key(self):
        """Backends with equal keys share one client handle and one admission gate"""
        return (self.endpoint, self.model, self.api_key_env)


@dataclass(frozen=True)
class ChatBackendConfig(BackendConfig):
    temperature: float = 0.0


@dataclass(frozen=True)
class EditBackendConfig(BackendConfig):
    pass


@dataclass(frozen=True)
class Flags:
    mock: bool = False
    filter_knowledge: bool = False
    short_circuit_judges: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    input_path: Path
    image_root: Path
    work_dir: Path
    output_dir: Path
    knowledge_path: Optional[Path] = None
    knowledge_image_root: Optional[Path] = None
    seed: int = 0
    retry_budget: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    max_workers: int = 16
    ledger_flush_every: int = 100
    min_quality: int = 3
    filter_regeneration_retries: int = 0
    variant_bool_fraction: float = 0.5
    aesthetic_markers: tuple = ('Refine the image', 'enhance', 'aesthetic')
    balance: Optional[dict] = None
    selection_mode: str = 'uniform'
    shard_size: int = 1000
    flags: Flags = field(default_factory=Flags)
    classifier: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    transformer: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    judge_quality: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    judge_following: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    generator: EditBackendConfig = field(default_factory=EditBackendConfig)
    mock_seed: int = 0

    # Fields that change throughput or locations but never the produced data
    UNHASHED_FIELDS = ('work_dir', 'output_dir', 'max_workers', 'ledger_flush_every')
    UNHASHED_BACKEND_FIELDS = ('timeout', 'max_concurrency')

    def with_overrides(self, work_dir=None, seed=None, mock=None, max_concurrency=None):
        """Apply the CLI overrides (--workdir, --seed, --mock, --max-concurrency)"""
        changes = {}
        if work_dir is not None:
            changes['work_dir'] = Path(work_dir).resolve()
        if seed is not None:
            if not 0 <= seed < 2 ** 64:
                raise ConfigurationError("--seed must be an unsigned 64-bit integer")
            changes['seed'] = seed
        if mock:
            changes['flags'] = replace(self.flags, mock=True)
        if max_concurrency is not None:
            if max_concurrency < 1:
                raise ConfigurationError("--max-concurrency must be at least 1")
            for name in BACKEND_ROLES:
                changes[name] = replace(getattr(self, name), max_concurrency=max_concurrency)
            changes['max_workers'] = max(self.max_workers, max_concurrency)
        return replace(self, **changes)

    def hashed_view(self):
        data = _jsonable(asdict(self))
        for name in self.UNHASHED_FIELDS:
            data.pop(name, None)
        for name in BACKEND_ROLES:
            for backend_field in self.UNHASHED_BACKEND_FIELDS:
                data[name].pop(backend_field, None)
        data['templates'] = template_hashes()
        return data

    def config_hash(self):
        canonical = json.dumps(self.hashed_view(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def to_json(self):
        return _jsonable(asdict(self))

    def to_document(self):
        """The config as a build_config() input document, stored in the ledger header"""
        data = self.to_json()
        data['backends'] = {role: data.pop(role) for role in BACKEND_ROLES}
        return data


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _validated(serializer_class, data):
    serializer = serializer_class(data=data or {})
    if not serializer.is_valid():
        raise ConfigurationError(format_errors(serializer.errors))
    return serializer.validated_data


def _resolve(base_dir, value):
    if value in (None, ''):
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base_dir / path
    return path.resolve()


def _backend(config_class, data, mock_seed):
    data = dict(_validated(BackendConfigSerializer, data))
    mock_data = dict(_validated(MockScriptSerializer, data.pop('mock', None)))
    mock_data.setdefault('seed', mock_seed)
    known = {f.name for f in fields(config_class)}
    data = {key: value for key, value in data.items() if key in known}
    data['params'] = dict(data.get('params') or {})
    return config_class(mock=MockScript(**mock_data), **data)


def build_config(data, base_dir='.'):
    """
    Validate a config mapping and turn it into a PipelineConfig.

    Args:
        data (dict): parsed config document
        base_dir (str|Path): directory relative paths are resolved against

    Raises:
        ConfigurationError: when the document fails validation
    """
    if not isinstance(data, dict):
        raise ConfigurationError("Config must be a JSON object")
    attrs = dict(_validated(PipelineConfigSerializer, data))
    base_dir = Path(base_dir).resolve()

    backends = attrs.pop('backends') or {}
    flags = _validated(FlagsSerializer, attrs.pop('flags'))
    mock_seed = attrs['mock_seed']

    for key in ('input_path', 'image_root', 'work_dir', 'output_dir', 'knowledge_path', 'knowledge_image_root'):
        attrs[key] = _resolve(base_dir, attrs.get(key))
    if attrs['knowledge_path'] and attrs['knowledge_image_root'] is None:
        attrs['knowledge_image_root'] = attrs['image_root']

    balance = attrs.pop('balance')
    if balance is not None:
        balance = _jsonable(dict(balance))

    return PipelineConfig(
        balance=balance,
        aesthetic_markers=tuple(attrs.pop('aesthetic_markers')),
        flags=Flags(**flags),
        classifier=_backend(ChatBackendConfig, backends.get('classifier'), mock_seed),
        transformer=_backend(ChatBackendConfig, backends.get('transformer'), mock_seed),
        judge_quality=_backend(ChatBackendConfig, backends.get('judge_quality'), mock_seed),
        judge_following=_backend(ChatBackendConfig, backends.get('judge_following'), mock_seed),
        generator=_backend(EditBackendConfig, backends.get('generator'), mock_seed),
        **attrs
    )


def load_config(path):
    """Read and validate a JSON config file"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config {path} is not valid JSON: {e}")
    return build_config(data, base_dir=path.parent)
