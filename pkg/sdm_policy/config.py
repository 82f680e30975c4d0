"""
Run configuration: nested dataclasses with defaults for every field, merged from a JSON file
and dotted ``section.field`` overrides, and validated before any compute starts.
"""

import dataclasses
import json
import os
import pathlib
import typing

from . import sdm_errors as errors
from .diffusion import NetConfig, NoiseSchedule, TeacherConfig, make_schedule
from .sdm import DistillConfig
from .tasks import TASKS

Override = typing.Union[str, typing.Tuple[str, typing.Any]]


@dataclasses.dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2

    def validate(self):
        self.build()

    def build(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.T, self.beta_min, self.beta_max)


@dataclasses.dataclass
class DataConfig:
    """``episodes`` expert episodes for pointmass, ``gmm_samples`` mixture draws for gmm"""

    episodes: int = 20
    gmm_samples: int = 4000
    seed: int = 42

    def validate(self):
        if self.episodes < 2:
            raise errors.ConfigError(f"data.episodes must be >= 2, got {self.episodes}")
        if self.seed < 0:
            raise errors.ConfigError(f"data.seed must be >= 0, got {self.seed}")
        if self.gmm_samples < 1:
            raise errors.ConfigError(f"data.gmm_samples must be >= 1, got {self.gmm_samples}")

    def count(self, task: str) -> int:
        return self.gmm_samples if task == "gmm" else self.episodes


@dataclasses.dataclass
class EvalConfig:
    episodes: int = 100
    seeds: typing.List[int] = dataclasses.field(default_factory=lambda: [42, 43, 44])
    nfe: int = 10
    reps: int = 200
    warmup: int = 20
    samples: int = 4000
    segment_episodes: int = 20
    top_k: int = 5
    threads: typing.Optional[int] = None

    def validate(self):
        if self.episodes < 20:
            raise errors.ConfigError(f"eval.episodes must be >= 20, got {self.episodes}")
        if len(self.seeds) < 3:
            raise errors.ConfigError(f"eval.seeds needs at least 3 seeds, got {self.seeds}")
        if min(self.seeds) < 0:
            raise errors.ConfigError(f"eval.seeds must be >= 0, got {self.seeds}")
        if self.nfe < 1:
            raise errors.ConfigError(f"eval.nfe must be >= 1, got {self.nfe}")
        if self.reps < 100 or self.warmup < 10:
            raise errors.ConfigError(f"eval needs reps >= 100 and warmup >= 10, got {self.reps}, {self.warmup}")
        if self.samples < 2 or self.segment_episodes < 1 or self.top_k < 1:
            raise errors.ConfigError("eval.samples must be >= 2, eval.segment_episodes and eval.top_k >= 1")
        if self.threads is not None and self.threads < 1:
            raise errors.ConfigError(f"eval.threads must be >= 1, got {self.threads}")

    def thread_count(self) -> int:
        """``threads`` when set, else ``SDM_THREADS``, else 1"""
        if self.threads is not None:
            return self.threads
        raw = os.getenv("SDM_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise errors.ConfigError(f"SDM_THREADS must be an integer, got {raw!r}")
        if threads < 1:
            raise errors.ConfigError(f"SDM_THREADS must be >= 1, got {threads}")
        return threads


@dataclasses.dataclass
class RunConfig:
    task: str = "pointmass"
    seed: int = 42
    out_dir: str = "runs/default"
    schedule: ScheduleConfig = dataclasses.field(default_factory=ScheduleConfig)
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    teacher: TeacherConfig = dataclasses.field(default_factory=TeacherConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    distill: DistillConfig = dataclasses.field(default_factory=DistillConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def validate(self):
        if self.task not in TASKS:
            raise errors.ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.seed < 0:
            raise errors.ConfigError(f"seed must be >= 0, got {self.seed}")
        for section in (self.schedule, self.net, self.teacher, self.data, self.distill, self.eval):
            section.validate()
        if self.distill.t_init is not None and self.distill.t_init > self.schedule.T:
            raise errors.ConfigError(f"distill.t_init {self.distill.t_init} exceeds schedule.T {self.schedule.T}")
        if self.eval.nfe > self.schedule.T:
            raise errors.ConfigError(f"eval.nfe {self.eval.nfe} exceeds schedule.T {self.schedule.T}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce_text(key: str, text: str, tp):
    """Parse command-line text into ``tp``"""
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.strip().lower() in ("none", "null", ""):
            return None
        return _coerce_text(key, text, next(arg for arg in args if arg is not type(None)))
    if origin in (list, typing.List):
        stripped = text.strip()
        if stripped.startswith("["):
            try:
                items = json.loads(stripped)
            except json.JSONDecodeError:
                raise errors.ConfigError(f"Config key {key} expects {_type_name(tp)}, got {text!r}")
            return _coerce_value(key, items, tp)
        return [_coerce_text(key, item, args[0]) for item in stripped.split(",") if item.strip()]
    if tp is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise errors.ConfigError(f"Config key {key} expects bool, got {text!r}")
    if tp in (int, float):
        try:
            return tp(text)
        except ValueError:
            raise errors.ConfigError(f"Config key {key} expects {tp.__name__}, got {text!r}")
    return text


def _coerce_value(key: str, value, tp):
    """Check a JSON value against ``tp``, widening ints to floats"""
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        return _coerce_value(key, value, next(arg for arg in args if arg is not type(None)))
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise errors.ConfigError(f"Config key {key} expects {_type_name(tp)}, got {value!r}")
        return [_coerce_value(key, item, args[0]) for item in value]
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if tp in (int, bool, str) and type(value) is tp:
        return value
    raise errors.ConfigError(f"Config key {key} expects {_type_name(tp)}, got {value!r}")


def _field_types(obj) -> typing.Dict[str, typing.Any]:
    return typing.get_type_hints(type(obj))


def _apply_mapping(obj, values: dict, prefix: str = ""):
    if not isinstance(values, dict):
        raise errors.ConfigError(f"Config section {prefix.rstrip('.') or '<root>'} must be an object")
    types = _field_types(obj)
    for name, value in values.items():
        key = f"{prefix}{name}"
        if name not in types:
            raise errors.ConfigError(f"Unknown config key {key}")
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            _apply_mapping(current, value, f"{key}.")
        else:
            setattr(obj, name, _coerce_value(key, value, types[name]))


def apply_override(config: RunConfig, key: str, value):
    """Set ``section.field`` (or a top-level field) from text or an already typed value"""
    *sections, name = key.split(".")
    target = config
    for depth, section in enumerate(sections):
        if section not in _field_types(target) or not dataclasses.is_dataclass(getattr(target, section)):
            raise errors.ConfigError(f"Unknown config key {'.'.join(sections[: depth + 1])}")
        target = getattr(target, section)
    types = _field_types(target)
    if name not in types or dataclasses.is_dataclass(getattr(target, name)):
        raise errors.ConfigError(f"Unknown config key {key}")
    coerce = _coerce_text if isinstance(value, str) else _coerce_value
    setattr(target, name, coerce(key, value, types[name]))


def _split_override(override: Override) -> typing.Tuple[str, typing.Any]:
    if isinstance(override, str):
        key, sep, value = override.partition("=")
        if not sep:
            raise errors.ConfigError(f"Override {override!r} must look like section.field=value")
        return key.strip().lstrip("-"), value
    key, value = override
    return key.lstrip("-"), value


def parse_config(
    path: typing.Optional[typing.Union[str, os.PathLike]] = None, overrides: typing.Iterable[Override] = ()
) -> RunConfig:
    """
    Merge defaults, then the JSON file at ``path``, then ``overrides``, and validate

    Parameters
    ----------

    path: str | os.PathLike, optional
        JSON document mirroring ``RunConfig``. If ``None``, only defaults and overrides apply.
    overrides: Iterable
        ``"distill.c=3"`` strings or ``("distill.c", "3")`` pairs, applied in order

    Returns
    -------

    RunConfig
        Validated configuration

    Raises
    ------

    ConfigError
        On a missing file, invalid JSON, an unknown key, a type mismatch or a value outside its range
    """
    config = RunConfig()
    if path is not None:
        path = pathlib.Path(path)
        if not path.is_file():
            raise errors.ConfigError(f"Config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
        if text.strip():
            try:
                values = json.loads(text)
            except json.JSONDecodeError as e:
                raise errors.ConfigError(f"Config file {path} is not valid JSON: {e}")
            _apply_mapping(config, values)
    for override in overrides:
        apply_override(config, *_split_override(override))
    config.validate()
    return config
