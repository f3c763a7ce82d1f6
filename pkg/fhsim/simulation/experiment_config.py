"""
Experiment configuration files.

Experiments are described in TOML. Every key is checked against the schema
below; unknown keys, wrong types and invalid choices raise ``ConfigError``
pointing at the offending line::

    name = "ccv-vs-lco"
    framework = ["cds", "fl", "fl-ev"]       # or a single string; also "fl-fixed"
    scheme = ["ccv", "lco"]
    prior = "masked"                          # baseline | masked | per-structure
    tier = "none"                             # none | basic | shape | shape-intensity
    seeds = [0, 1, 2, 3, 4]
    split_seed = 0
    output_dir = "results/ccv-vs-lco"
    apply_probability = 0.5
    harmonize = true

    [fixed_weights]                           # only read by fl-fixed
    acdc = 1.0

    [dataset]
    directory = "data/phantoms"               # or profiles = "profiles.toml", or neither
    seed = 0
    target_spacing = [2.0, 2.0, 8.0]
    window = [32, 32, 8]
    bins = 256

    [trainer]
    learning_rate = 0.5
    feature_learning_rate = 0.05
    max_epochs = 100
    patience = 10
    iterations_per_round = 7

    [model]
    kind = "logistic"
    hidden_width = 0
    downsample_factor = 4

``FHSIM_SEED`` (comma-separated integers) replaces ``seeds``.
"""

import hashlib
import json
import os
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .augmentation import AugmentationTier
from .classifier import ModelKind, ModelSpec, TrainerConfig
from .evaluation import EvaluationScheme
from .exceptions import ConfigError, FhsimError
from .federation import Framework
from .phantomdata import CenterProfile, PhantomConstants, Prior, constants_from_mapping

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_TARGET_SPACING = (2.0, 2.0, 8.0)
DEFAULT_WINDOW = (32, 32, 8)
DEFAULT_BINS = 256
SEED_ENV = 'FHSIM_SEED'

_TOP_LEVEL_KEYS = {
    'name', 'framework', 'scheme', 'prior', 'tier', 'seeds', 'split_seed', 'output_dir',
    'apply_probability', 'harmonize', 'fixed_weights', 'dataset', 'trainer', 'model',
}
_DATASET_KEYS = {'directory', 'profiles', 'seed', 'target_spacing', 'window', 'bins'}
_TRAINER_KEYS = {'learning_rate', 'feature_learning_rate', 'max_epochs', 'patience', 'iterations_per_round'}
_MODEL_KEYS = {'kind', 'hidden_width', 'downsample_factor'}

_KEY_LINE = re.compile(r'^\s*(?:"([^"]+)"|([A-Za-z0-9_\-]+))\s*=')
_TABLE_LINE = re.compile(r'^\s*\[\[?\s*([A-Za-z0-9_\-.]+)\s*\]\]?')
_TOML_LINE = re.compile(r'line (\d+)')


class _KeyLocator:
    """Finds the line of ``[table] key`` in the raw TOML text"""

    def __init__(self, text: str):
        self.lines: Dict[Tuple[str, str], int] = {}
        self.tables: Dict[str, int] = {}
        self.array_tables: Dict[str, List[int]] = {}
        table = ''
        for number, line in enumerate(text.splitlines(), start=1):
            header = _TABLE_LINE.match(line)
            if header:
                table = header.group(1)
                self.tables.setdefault(table, number)
                if line.lstrip().startswith('[['):
                    self.array_tables.setdefault(table, []).append(number)
                continue
            key = _KEY_LINE.match(line)
            if key:
                self.lines.setdefault((table, key.group(1) or key.group(2)), number)

    def line(self, table: str, key: Optional[str] = None) -> Optional[int]:
        if key is None:
            return self.tables.get(table)
        return self.lines.get((table, key), self.tables.get(table))


@dataclass(frozen=True)
class DatasetConfig:
    directory: Optional[Path] = None
    profiles: Optional[Path] = None
    seed: int = 0
    target_spacing: Tuple[float, float, float] = DEFAULT_TARGET_SPACING
    window: Tuple[int, int, int] = DEFAULT_WINDOW
    bins: int = DEFAULT_BINS


@dataclass(frozen=True)
class ModelSettings:
    kind: ModelKind = ModelKind.LOGISTIC
    hidden_width: int = 0
    downsample_factor: int = 4


@dataclass(frozen=True)
class Cell:
    """One combination of the experimental grid"""
    framework: Framework
    scheme: EvaluationScheme
    tier: AugmentationTier
    prior: Prior

    @property
    def key(self) -> Tuple[str, str, str, str]:
        return (self.framework.value, self.scheme.value, self.tier.value, self.prior.value)

    @property
    def slug(self) -> str:
        return '_'.join(self.key)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    frameworks: Tuple[Framework, ...]
    schemes: Tuple[EvaluationScheme, ...]
    priors: Tuple[Prior, ...]
    tiers: Tuple[AugmentationTier, ...]
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    split_seed: int = 0
    output_dir: Path = Path('results')
    apply_probability: float = 0.5
    harmonize: bool = True
    fixed_weights: Optional[Dict[str, float]] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    source: Optional[Path] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty", self._source_name)
        if not all((self.frameworks, self.schemes, self.priors, self.tiers)):
            raise ConfigError("framework, scheme, prior and tier need at least one value", self._source_name)
        if Framework.FL_FIXED in self.frameworks and not self.fixed_weights:
            raise ConfigError("framework fl-fixed needs a [fixed_weights] table", self._source_name)

    @property
    def _source_name(self) -> Optional[str]:
        return str(self.source) if self.source else None

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            kind=self.model.kind,
            input_shape=(3, *self.dataset.window),
            hidden_width=self.model.hidden_width,
            downsample_factor=self.model.downsample_factor,
        )

    def cells(self) -> List[Cell]:
        return [Cell(f, s, t, p) for f, s, t, p in product(self.frameworks, self.schemes, self.tiers, self.priors)]

    def to_dict(self) -> Dict[str, Any]:
        """Canonical JSON-ready form; output location and source path are left out."""
        data = {
            'name': self.name,
            'framework': [f.value for f in self.frameworks],
            'scheme': [s.value for s in self.schemes],
            'prior': [p.value for p in self.priors],
            'tier': [t.value for t in self.tiers],
            'seeds': list(self.seeds),
            'split_seed': self.split_seed,
            'apply_probability': self.apply_probability,
            'harmonize': self.harmonize,
            'fixed_weights': dict(sorted((self.fixed_weights or {}).items())),
            'dataset': {
                'directory': str(self.dataset.directory) if self.dataset.directory else None,
                'profiles': str(self.dataset.profiles) if self.dataset.profiles else None,
                'seed': self.dataset.seed,
                'target_spacing': list(self.dataset.target_spacing),
                'window': list(self.dataset.window),
                'bins': self.dataset.bins,
            },
            'trainer': {k: v for k, v in asdict(self.trainer).items() if k != 'seed'},
            'model': {
                'kind': self.model.kind.value,
                'hidden_width': self.model.hidden_width,
                'downsample_factor': self.model.downsample_factor,
            },
        }
        return data

    @property
    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


class _Reader:
    """Typed access to one parsed TOML table, reporting errors with line numbers"""

    def __init__(self, data: Mapping[str, Any], table: str, locator: _KeyLocator, path: Optional[str]):
        self.data = data
        self.table = table
        self.locator = locator
        self.path = path

    def error(self, message: str, key: Optional[str] = None) -> ConfigError:
        where = f"[{self.table}] " if self.table else ''
        if key is not None:
            message = f"{where}{key}: {message}"
        return ConfigError(message, self.path, self.locator.line(self.table, key))

    def check_keys(self, allowed: set) -> None:
        for key in self.data:
            if key not in allowed:
                raise self.error(f"unknown key (allowed: {', '.join(sorted(allowed))})", key)

    def get(self, key: str, kind, default=None):
        if key not in self.data:
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, bool):
            raise self.error("expected an integer, got a boolean", key)
        if not isinstance(value, kind):
            raise self.error(f"expected {kind.__name__}, got {type(value).__name__}", key)
        return value

    def choices(self, key: str, enum, default: Sequence) -> Tuple:
        value = self.data.get(key, list(default))
        values = [value] if isinstance(value, str) else value
        if not isinstance(values, list) or not values:
            raise self.error("expected a string or a non-empty list of strings", key)
        result = []
        for item in values:
            try:
                result.append(enum(item))
            except ValueError:
                allowed = ', '.join(e.value for e in enum)
                raise self.error(f"invalid value {item!r} (choose from {allowed})", key)
        return tuple(dict.fromkeys(result))

    def numbers(self, key: str, kind, count: int, default: Tuple) -> Tuple:
        values = self.get(key, list, list(default))
        if len(values) != count:
            raise self.error(f"expected {count} values, got {len(values)}", key)
        result = []
        for item in values:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise self.error(f"expected numbers, got {item!r}", key)
            if kind is int and not isinstance(item, int):
                raise self.error(f"expected integers, got {item!r}", key)
            result.append(kind(item))
        return tuple(result)

    def sub(self, key: str) -> '_Reader':
        value = self.get(key, dict, {})
        table = f"{self.table}.{key}" if self.table else key
        return _Reader(value, table, self.locator, self.path)


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def seeds_from_env(default: Sequence[int]) -> Tuple[int, ...]:
    raw = os.environ.get(SEED_ENV, '').strip()
    if not raw:
        return tuple(default)
    try:
        seeds = tuple(int(part) for part in raw.split(',') if part.strip())
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be comma-separated integers, got {raw!r}") from e
    if not seeds:
        raise ConfigError(f"{SEED_ENV} holds no seeds")
    return seeds


def parse_config(text: str, path: Optional[Union[str, Path]] = None,
                 results_root: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Parse and validate experiment TOML text."""
    source = str(path) if path is not None else None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ConfigError(f"invalid TOML: {e}", source, int(match.group(1)) if match else None) from e

    locator = _KeyLocator(text)
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    top = _Reader(data, '', locator, source)
    top.check_keys(_TOP_LEVEL_KEYS)

    dataset_table = top.sub('dataset')
    dataset_table.check_keys(_DATASET_KEYS)
    trainer_table = top.sub('trainer')
    trainer_table.check_keys(_TRAINER_KEYS)
    model_table = top.sub('model')
    model_table.check_keys(_MODEL_KEYS)

    name = top.get('name', str, Path(path).stem if path is not None else 'experiment')

    directory = dataset_table.get('directory', str)
    profiles = dataset_table.get('profiles', str)
    if directory is not None and profiles is not None:
        raise dataset_table.error("set either directory or profiles, not both", 'profiles')
    dataset = DatasetConfig(
        directory=_resolve(base, directory),
        profiles=_resolve(base, profiles),
        seed=dataset_table.get('seed', int, 0),
        target_spacing=dataset_table.numbers('target_spacing', float, 3, DEFAULT_TARGET_SPACING),
        window=dataset_table.numbers('window', int, 3, DEFAULT_WINDOW),
        bins=dataset_table.get('bins', int, DEFAULT_BINS),
    )
    if any(s <= 0 for s in dataset.target_spacing):
        raise dataset_table.error("spacing must be positive", 'target_spacing')
    if any(w < 1 for w in dataset.window):
        raise dataset_table.error("window sizes must be positive", 'window')
    if dataset.bins < 2:
        raise dataset_table.error("need at least two bins", 'bins')

    defaults = TrainerConfig()
    try:
        trainer = TrainerConfig(
            learning_rate=trainer_table.get('learning_rate', float, defaults.learning_rate),
            max_epochs=trainer_table.get('max_epochs', int, defaults.max_epochs),
            patience=trainer_table.get('patience', int, defaults.patience),
            iterations_per_round=trainer_table.get('iterations_per_round', int, defaults.iterations_per_round),
            feature_learning_rate=trainer_table.get('feature_learning_rate', float),
        )
    except FhsimError:
        raise
    except ValueError as e:
        raise ConfigError(str(e), source, locator.line('trainer')) from e

    kind_value = model_table.get('kind', str, ModelKind.LOGISTIC.value)
    try:
        kind = ModelKind(kind_value)
    except ValueError:
        raise model_table.error(f"invalid value {kind_value!r} (choose from logistic, mlp)", 'kind')
    model = ModelSettings(
        kind=kind,
        hidden_width=model_table.get('hidden_width', int, 16 if kind is ModelKind.MLP else 0),
        downsample_factor=model_table.get('downsample_factor', int, 4),
    )

    seeds_value = top.get('seeds', list, list(DEFAULT_SEEDS))
    if any(isinstance(s, bool) or not isinstance(s, int) for s in seeds_value):
        raise top.error("expected a list of integers", 'seeds')

    fixed_table = top.sub('fixed_weights')
    fixed_weights = {key: fixed_table.get(key, float) for key in fixed_table.data} or None

    apply_probability = top.get('apply_probability', float, 0.5)
    if not 0.0 <= apply_probability <= 1.0:
        raise top.error("must lie in [0, 1]", 'apply_probability')

    output_dir = top.get('output_dir', str)
    if output_dir is None:
        output_path = Path(results_root or 'results') / name
    else:
        output_path = _resolve(base, output_dir)

    try:
        config = ExperimentConfig(
            name=name,
            frameworks=top.choices('framework', Framework, [Framework.FL.value]),
            schemes=top.choices('scheme', EvaluationScheme, [EvaluationScheme.CCV.value]),
            priors=top.choices('prior', Prior, [Prior.MASKED.value]),
            tiers=top.choices('tier', AugmentationTier, [AugmentationTier.NONE.value]),
            seeds=seeds_from_env(seeds_value),
            split_seed=top.get('split_seed', int, 0),
            output_dir=output_path,
            apply_probability=apply_probability,
            harmonize=top.get('harmonize', bool, True),
            fixed_weights=fixed_weights,
            dataset=dataset,
            trainer=trainer,
            model=model,
            source=Path(path) if path is not None else None,
        )
        config.model_spec  # validates the architecture
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e), source, locator.line('model')) from e
    return config


def load_config(path: Union[str, Path], results_root: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", str(path)) from e
    return parse_config(text, path, results_root)


def parse_profiles(text: str, path: Optional[Union[str, Path]] = None) -> Tuple[List[CenterProfile], PhantomConstants]:
    """
    Parse a center profile file::

        [constants]                 # optional PhantomConstants overrides
        contraction = 0.7

        [[center]]
        center_id = "a"
        n_subjects = 20
        class_balance = 0.5
        myo_thickness_hcm = [11.0, 1.5]
    """
    source = str(path) if path is not None else None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ConfigError(f"invalid TOML: {e}", source, int(match.group(1)) if match else None) from e
    locator = _KeyLocator(text)

    unknown = sorted(set(data) - {'constants', 'center'})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}", source, locator.line('', unknown[0]))
    try:
        constants = constants_from_mapping(data.get('constants', {}))
    except (ConfigError, TypeError, ValueError) as e:
        raise ConfigError(getattr(e, 'reason', str(e)), source, locator.line('constants')) from e

    tables = data.get('center', [])
    if not isinstance(tables, list) or not tables:
        raise ConfigError("profile file needs at least one [[center]] table", source)
    profiles = []
    headers = locator.array_tables.get('center', [])
    for index, table in enumerate(tables):
        try:
            profiles.append(CenterProfile.from_mapping(table))
        except (ConfigError, TypeError, ValueError) as e:
            line = headers[index] if index < len(headers) else None
            raise ConfigError(getattr(e, 'reason', str(e)), source, line) from e
    ids = [p.center_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate center ids: {ids}", source)
    return sorted(profiles, key=lambda p: p.center_id), constants


def load_profiles(path: Union[str, Path]) -> Tuple[List[CenterProfile], PhantomConstants]:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"cannot read profiles: {e}", str(path)) from e
    return parse_profiles(text, path)
