"""Experiment and sweep configuration files.

Configs are YAML documents (format version 1). An experiment file::

    version: 1
    method: adaedl            # autoregressive | base-spd | max-confidence-spd | adaedl
    target:                   # either `file: <path>` or generator parameters
      vocab_size: 256
      order: 1
      concentration: 0.0039
      seed: 1000
    draft:                    # either `file: <path>` or a derived draft
      mode: partial-knowledge
      strength: 0.5
      seed: 2000
    policy:                   # PolicyConfig fields except `kind`
      max_draft_length: 7
      gamma: 0.2
      initial_lambda: 0.5
      dynamic_lambda: true
    sampling:
      temperature: 1.0        # plus optional top_k or nucleus_p
    cost:                     # `preset: <name>`, `t_draft_token: <s>` or
      ratio: 7.0              # `ratio: <t_verify / t_draft>`, tried in that order;
      t_verify_round: 0.04    # optional t_target_step, t_overhead_stop_check
    prompts:
      count: 4
      length: 8
      seed: 0
    generation_length: 128
    seed: 0
    output_dir: null          # falls back to --out, then $SPECLAB_OUT_DIR

Every section and key is optional; omitted values take the defaults of the
corresponding dataclass. Relative file paths are resolved against the
directory holding the config file.

A sweep file holds a ``base`` experiment plus ``axes``, a mapping from a
dotted field path (``policy.initial_lambda``, ``sampling.temperature``,
``method``, ``cost.ratio`` ...) to a list of values. Points are the cross
product of the axes in the order they are listed, the last axis varying
fastest. ``max_points`` caps the product size.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .distributions import AdjustmentSpec
from .engine import COST_RATIO_PRESETS, CostModel
from .models import DerivedDraftSpec, _check_table_size
from .stopping import PolicyConfig

CONFIG_VERSION = 1
DEFAULT_MAX_POINTS = 10_000

METHOD_POLICY = {
    "autoregressive": None,
    "base-spd": "static",
    "max-confidence-spd": "max-confidence",
    "adaedl": "adaedl",
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path at fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class TargetSpec:
    file: str | None = None
    vocab_size: int = 256
    order: int = 1
    concentration: float = 1.0 / 256
    seed: int = 1000

    def __post_init__(self):
        if self.file is None:
            _check_table_size(self.vocab_size, self.order)
            if not self.concentration > 0:
                raise ValueError(f"concentration must be > 0, got {self.concentration!r}")


@dataclass(frozen=True)
class DraftSpec:
    file: str | None = None
    mode: str = "partial-knowledge"
    strength: float = 0.5
    seed: int = 2000

    def __post_init__(self):
        if self.file is None:
            self.derived()

    def derived(self) -> DerivedDraftSpec:
        return DerivedDraftSpec(self.mode, self.strength, self.seed)


@dataclass(frozen=True)
class CostSpec:
    preset: str | None = None
    ratio: float | None = 7.0
    t_draft_token: float | None = None
    t_verify_round: float = 0.04
    t_target_step: float | None = None
    t_overhead_stop_check: float = 0.0

    def __post_init__(self):
        if self.preset is not None and self.preset not in COST_RATIO_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(COST_RATIO_PRESETS)}")
        if self.ratio is not None and not self.ratio > 0:
            raise ValueError(f"ratio must be > 0, got {self.ratio!r}")
        if self.preset is None and self.ratio is None and self.t_draft_token is None:
            raise ValueError("set one of preset, ratio or t_draft_token")
        self.build()

    def build(self) -> CostModel:
        # Precedence: preset, then an explicit t_draft_token, then ratio.
        extra = dict(t_target_step=self.t_target_step, t_overhead_stop_check=self.t_overhead_stop_check)
        if self.preset is not None:
            return CostModel.preset(self.preset, self.t_verify_round, **extra)
        if self.t_draft_token is not None:
            return CostModel(self.t_draft_token, self.t_verify_round, **extra)
        return CostModel.from_ratio(self.ratio, self.t_verify_round, **extra)


@dataclass(frozen=True)
class PromptSpec:
    count: int = 4
    length: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.length < 0:
            raise ValueError(f"length must be >= 0, got {self.length}")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "adaedl"
    target: TargetSpec = field(default_factory=TargetSpec)
    draft: DraftSpec = field(default_factory=DraftSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sampling: AdjustmentSpec = field(default_factory=AdjustmentSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    prompts: PromptSpec = field(default_factory=PromptSpec)
    generation_length: int = 128
    seed: int = 0
    output_dir: str | None = None

    @property
    def cost_model(self) -> CostModel:
        return self.cost.build()


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    axes: tuple[tuple[str, tuple[Any, ...]], ...] = ()
    max_points: int = DEFAULT_MAX_POINTS

    @property
    def n_points(self) -> int:
        return math.prod(len(values) for _, values in self.axes)

    def points(self) -> list[ExperimentConfig]:
        if self.n_points > self.max_points:
            raise ConfigError(
                "axes", f"sweep has {self.n_points} points, more than max_points={self.max_points}"
            )
        names = [name for name, _ in self.axes]
        base = to_dict(self.base)
        out = []
        for combo in itertools.product(*(values for _, values in self.axes)):
            doc = _deep_copy(base)
            for name, value in zip(names, combo):
                _set_path(doc, name, value)
            out.append(from_dict(doc))
        return out


# ---------------------------------------------------------------- parsing

_SECTIONS = {
    "target": TargetSpec,
    "draft": DraftSpec,
    "policy": PolicyConfig,
    "sampling": AdjustmentSpec,
    "cost": CostSpec,
    "prompts": PromptSpec,
}
_SCALARS = {"method": str, "generation_length": int, "seed": int, "output_dir": (str, type(None))}
_TOP_KEYS = {"version", *_SECTIONS, *_SCALARS}


def _type_ok(value: Any, annotation: str) -> bool:
    optional = "None" in annotation
    if value is None:
        return optional
    if annotation.startswith("int"):
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation.startswith("float"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation.startswith("bool"):
        return isinstance(value, bool)
    if annotation.startswith("str"):
        return isinstance(value, str)
    return True


def _build_section(cls: type, doc: Any, path: str, **fixed: Any) -> Any:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    if cls is PolicyConfig:
        known.pop("kind")
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", f"unknown field (expected one of {sorted(known)})")
        if not _type_ok(value, str(known[key].type)):
            raise ConfigError(f"{path}.{key}", f"expected {known[key].type}, got {value!r}")
        if isinstance(value, int) and str(known[key].type).startswith("float"):
            value = float(value)
        # Build with this field alone so a range error is pinned to it.
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cls(**fixed, **{key: value})
        except ValueError as e:
            raise ConfigError(f"{path}.{key}", str(e)) from None
        kwargs[key] = value
    try:
        return cls(**fixed, **kwargs)
    except ValueError as e:
        raise ConfigError(path, str(e)) from None


def from_dict(doc: Any, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Validate a parsed config document."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a mapping")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(str(key), f"unknown field (expected one of {sorted(_TOP_KEYS)})")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r} (expected {CONFIG_VERSION})")

    kwargs: dict[str, Any] = {}
    for key, typ in _SCALARS.items():
        if key in doc:
            value = doc[key]
            ok = isinstance(value, typ) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(key, f"expected {typ}, got {value!r}")
            kwargs[key] = value

    method = kwargs.get("method", ExperimentConfig.method)
    if method not in METHOD_POLICY:
        raise ConfigError("method", f"unknown method {method!r}; expected one of {list(METHOD_POLICY)}")
    if kwargs.get("generation_length", 1) < 1:
        raise ConfigError("generation_length", "must be >= 1")
    if not 0 <= kwargs.get("seed", 0) < 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")

    policy_doc = doc.get("policy") or {}
    if isinstance(policy_doc, dict) and "kind" in policy_doc:
        expected = METHOD_POLICY[method]
        if policy_doc["kind"] != expected:
            raise ConfigError(
                "policy.kind", f"method {method!r} implies policy kind {expected!r}, got {policy_doc['kind']!r}"
            )
        policy_doc = {k: v for k, v in policy_doc.items() if k != "kind"}

    for name, cls in _SECTIONS.items():
        if name == "policy":
            # Autoregressive runs carry an unused static policy.
            kwargs[name] = _build_section(cls, policy_doc, name, kind=METHOD_POLICY[method] or "static")
        else:
            kwargs[name] = _build_section(cls, doc.get(name), name)

    base = Path(base_dir) if base_dir is not None else None
    target, draft = kwargs["target"], kwargs["draft"]
    if target.file is not None:
        kwargs["target"] = replace(target, file=_resolve(target.file, base, "target.file"))
    if draft.file is not None:
        kwargs["draft"] = replace(draft, file=_resolve(draft.file, base, "draft.file"))
    return ExperimentConfig(**kwargs)


def _resolve(name: str, base: Path | None, path: str) -> str:
    p = Path(name)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.is_file():
        raise ConfigError(path, f"file not found: {p}")
    return str(p)


def to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`from_dict`: ``from_dict(to_dict(c)) == c``."""
    doc: dict[str, Any] = {"version": CONFIG_VERSION}
    for key in _SCALARS:
        doc[key] = getattr(cfg, key)
    for name in _SECTIONS:
        section = getattr(cfg, name)
        doc[name] = {f.name: getattr(section, f.name) for f in fields(section) if f.name != "kind"}
    return doc


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _read_yaml(path: str | Path) -> Any:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        return yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError("", f"cannot parse {p}: {e}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return from_dict(_read_yaml(path), Path(path).parent)


def load_sweep(path: str | Path) -> SweepSpec:
    doc = _read_yaml(path)
    if not isinstance(doc, dict):
        raise ConfigError("", "sweep file must be a mapping")
    unknown = set(doc) - {"version", "base", "axes", "max_points"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field (expected base, axes, max_points)")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported sweep version {doc['version']!r}")
    base_dir = Path(path).parent
    base = from_dict(doc.get("base") or {}, base_dir)
    return sweep_from_dict(base, doc.get("axes") or {}, doc.get("max_points", DEFAULT_MAX_POINTS))


def sweep_from_dict(base: ExperimentConfig, axes: Any, max_points: Any = DEFAULT_MAX_POINTS) -> SweepSpec:
    if not isinstance(max_points, int) or isinstance(max_points, bool) or max_points < 1:
        raise ConfigError("max_points", f"expected a positive integer, got {max_points!r}")
    if not isinstance(axes, dict):
        raise ConfigError("axes", "expected a mapping of field path to list of values")
    base_doc = to_dict(base)
    parsed = []
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axes.{name}", "expected a non-empty list of values")
        try:
            current = _get_path(base_doc, name)
        except KeyError:
            raise ConfigError(f"axes.{name}", "no such scalar field") from None
        if isinstance(current, dict):
            raise ConfigError(f"axes.{name}", "axes must name scalar fields")
        for v in values:
            doc = _deep_copy(base_doc)
            _set_path(doc, name, v)
            try:
                from_dict(doc)
            except ConfigError as e:
                raise ConfigError(f"axes.{name}", f"value {v!r} is invalid ({e})") from None
        parsed.append((name, tuple(values)))
    spec = SweepSpec(base, tuple(parsed), max_points)
    if spec.n_points > max_points:
        raise ConfigError("axes", f"sweep has {spec.n_points} points, more than max_points={max_points}")
    return spec


def _get_path(doc: dict, dotted: str) -> Any:
    node: Any = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = doc
    for part in parents:
        node = node[part]
    node[leaf] = value


def _deep_copy(doc: dict) -> dict:
    return {k: _deep_copy(v) if isinstance(v, dict) else v for k, v in doc.items()}
