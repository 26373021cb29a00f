"""Core domain types: problems, answers, gold labels, pipeline configuration.

Everything downstream (reformulation, solving, voting, evaluation) builds on the
types in this module. Values that represent exact quantities (gold answers,
normalized numeric answers) are carried as ``decimal.Decimal``, never as binary
floats, so equality and rendering stay reproducible across runs.
"""

from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Mapping

try:  # 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml


class RmpotError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(RmpotError):
    """Invalid configuration value or combination."""


class ParseError(RmpotError):
    """Raw record text could not be parsed into a gold answer."""


class PreconditionError(RmpotError):
    """An operation was called with arguments violating its contract."""


class DatasetKind(enum.Enum):
    GSM8K = "gsm8k"
    AQUA = "aqua"
    SVAMP = "svamp"
    CUSTOM = "custom"


class AnswerKind(enum.Enum):
    NUMERIC = "numeric"
    CHOICE = "choice"
    INVALID = "invalid"


class InvalidReason(enum.Enum):
    EXEC_ERROR = "exec_error"
    TIMEOUT = "timeout"
    MISSING_VAR = "missing_var"
    NON_NUMERIC = "non_numeric"
    NO_CODE = "no_code"


class ReformMode(enum.Enum):
    NAIVE = "naive"
    IN_CONTEXT = "incontext"
    NONE = "none"


_CHOICE_LABELS = ("A", "B", "C", "D", "E")


@dataclass(frozen=True, slots=True)
class GoldAnswer:
    """Reference answer for a problem: exactly one of number or choice letter."""

    kind: AnswerKind
    numeric_value: Decimal | None = None
    choice_label: str | None = None

    def __post_init__(self) -> None:
        if self.kind is AnswerKind.NUMERIC:
            if self.numeric_value is None or self.choice_label is not None:
                raise ValueError("NUMERIC gold must carry a number and no label")
        elif self.kind is AnswerKind.CHOICE:
            if self.choice_label is None or self.numeric_value is not None:
                raise ValueError("CHOICE gold must carry a label and no number")
            if self.choice_label not in _CHOICE_LABELS:
                raise ValueError(f"choice label must be one of A-E, got {self.choice_label!r}")
        else:
            raise ValueError("gold answers cannot be INVALID")


@dataclass(frozen=True, slots=True)
class Answer:
    """A single path's final answer. INVALID answers carry a reason and never
    take part in numeric/choice equality."""

    kind: AnswerKind
    numeric_value: Decimal | None = None
    choice_label: str | None = None
    invalid_reason: InvalidReason | None = None

    def __post_init__(self) -> None:
        if self.kind is AnswerKind.NUMERIC:
            if self.numeric_value is None or self.choice_label is not None or self.invalid_reason is not None:
                raise ValueError("malformed NUMERIC answer")
        elif self.kind is AnswerKind.CHOICE:
            if self.choice_label is None or self.numeric_value is not None or self.invalid_reason is not None:
                raise ValueError("malformed CHOICE answer")
            if self.choice_label not in _CHOICE_LABELS:
                raise ValueError(f"choice label must be one of A-E, got {self.choice_label!r}")
        else:
            if self.invalid_reason is None:
                raise ValueError("INVALID answer needs an invalid_reason")
            if self.numeric_value is not None or self.choice_label is not None:
                raise ValueError("INVALID answer must not carry a value")

    def display(self) -> str:
        if self.kind is AnswerKind.NUMERIC:
            return format_decimal(self.numeric_value)
        if self.kind is AnswerKind.CHOICE:
            return self.choice_label or ""
        return f"INVALID({self.invalid_reason.value})"


@dataclass(slots=True)
class Problem:
    """One math word problem. ``options`` is empty for free-numeric datasets and
    holds (label, text) pairs for multiple choice."""

    id: str
    text: str
    options: tuple[tuple[str, str], ...] = ()
    gold: GoldAnswer | None = None
    dataset_kind: DatasetKind = DatasetKind.CUSTOM

    def __post_init__(self) -> None:
        labels = [lab for lab, _ in self.options]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate option labels in problem {self.id}")
        for lab in labels:
            if lab not in _CHOICE_LABELS:
                raise ValueError(f"option label must be one of A-E, got {lab!r}")


@dataclass(slots=True)
class PipelineConfig:
    """Knobs for the three-stage pipeline.

    k: surface forms per problem (reformulations); must divide n.
    n: total reasoning paths per problem, split evenly over the k forms.
    Sampling defaults (temperature/top_p/top_k) and n/k defaults follow the
    published operating point.
    """

    k: int = 4
    n: int = 16
    temperature: float = 0.7
    top_p: float = 0.8
    top_k: int = 3
    reform_mode: ReformMode = ReformMode.NAIVE
    fewshot_k: int = 5
    result_var: str = "ans"
    sandbox_timeout_s: float = 10.0
    numeric_tol: float = 1e-6
    # Runtime knobs beyond the core set.
    model: str = "default"
    embed_model: str = "default-embed"
    incontext_exemplars: int = 3
    mem_limit_mb: int = 512
    workers: int = 0  # 0 = logical cores, capped at 16
    send_top_k: bool = True
    choice_via_llm: bool = False
    shim_path: str = ""  # empty = run generated code with the in-process evaluator

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check cross-field invariants; returns the config or raises ConfigError."""
    if cfg.k < 1:
        raise ConfigError("K must be >= 1")
    if cfg.n < 1:
        raise ConfigError("N must be >= 1")
    if cfg.n % cfg.k != 0:
        raise ConfigError("K must divide N")
    if cfg.reform_mode is ReformMode.NONE and cfg.k != 1:
        raise ConfigError("K must be 1 when reformulation is disabled")
    if cfg.temperature < 0:
        raise ConfigError("temperature must be >= 0")
    if not (0 < cfg.top_p <= 1):
        raise ConfigError("top_p must be in (0, 1]")
    if cfg.top_k < 1:
        raise ConfigError("top_k must be >= 1")
    if cfg.fewshot_k < 0:
        raise ConfigError("fewshot_k must be >= 0")
    if cfg.incontext_exemplars < 1:
        raise ConfigError("incontext_exemplars must be >= 1")
    if not cfg.result_var.isidentifier():
        raise ConfigError(f"result_var must be a valid identifier, got {cfg.result_var!r}")
    if cfg.sandbox_timeout_s <= 0:
        raise ConfigError("sandbox_timeout_s must be > 0")
    if cfg.numeric_tol <= 0:
        raise ConfigError("numeric_tol must be > 0")
    if cfg.mem_limit_mb < 1:
        raise ConfigError("mem_limit_mb must be >= 1")
    if cfg.workers < 0:
        raise ConfigError("workers must be >= 0")
    return cfg


_MARKER_RE = re.compile(r"#### (.+)")


def decimal_from_text(text: str) -> Decimal:
    """Parse a human-formatted number ('70,000', '$18', '72.') into a Decimal."""
    cleaned = text.strip().replace(",", "").replace("$", "").replace(" ", "")
    cleaned = cleaned.rstrip(".")
    try:
        value = Decimal(cleaned)
    except InvalidOperation as exc:
        raise ParseError(f"not a number: {text!r}") from exc
    if not value.is_finite():
        raise ParseError(f"not a finite number: {text!r}")
    return value


def format_decimal(value: Decimal | None) -> str:
    """Canonical plain-text rendering: no exponent, no trailing zeros."""
    if value is None:
        return ""
    if value == 0:
        return "0"
    return format(value.normalize(), "f")


def parse_gold_answer(raw: str, kind: DatasetKind) -> GoldAnswer:
    """Extract the gold answer from a raw dataset field.

    GSM8K answers end in a ``#### <number>`` marker line; when a record
    contains several markers the last one wins. AQuA's field is the bare
    choice letter. SVAMP's is the number itself.
    """
    if kind is DatasetKind.GSM8K:
        markers = _MARKER_RE.findall(raw)
        if not markers:
            raise ParseError("no '#### ' answer marker found")
        return GoldAnswer(AnswerKind.NUMERIC, numeric_value=decimal_from_text(markers[-1]))
    if kind is DatasetKind.AQUA:
        letter = raw.strip().rstrip(".").upper()
        if letter not in _CHOICE_LABELS:
            raise ParseError(f"expected a choice letter A-E, got {raw!r}")
        return GoldAnswer(AnswerKind.CHOICE, choice_label=letter)
    if kind is DatasetKind.SVAMP:
        return GoldAnswer(AnswerKind.NUMERIC, numeric_value=decimal_from_text(raw))
    # CUSTOM: the raw field is already the answer; number first, letter second.
    text = raw.strip()
    try:
        return GoldAnswer(AnswerKind.NUMERIC, numeric_value=decimal_from_text(text))
    except ParseError:
        pass
    letter = text.rstrip(".").upper()
    if letter in _CHOICE_LABELS:
        return GoldAnswer(AnswerKind.CHOICE, choice_label=letter)
    raise ParseError(f"cannot interpret gold answer {raw!r}")


_MODE_NAMES = {m.value: m for m in ReformMode}

# Keys accepted in a config file, mapped to (attribute, coercion).
_CONFIG_COERCERS: dict[str, Any] = {
    "k": int,
    "n": int,
    "temperature": float,
    "top_p": float,
    "top_k": int,
    "reform_mode": lambda v: _parse_mode(v),
    "fewshot_k": int,
    "result_var": str,
    "sandbox_timeout_s": float,
    "numeric_tol": float,
    "model": str,
    "embed_model": str,
    "incontext_exemplars": int,
    "mem_limit_mb": int,
    "workers": int,
    "send_top_k": bool,
    "choice_via_llm": bool,
    "shim_path": str,
}


def _parse_mode(value: Any) -> ReformMode:
    if isinstance(value, ReformMode):
        return value
    name = str(value).strip().lower().replace("-", "").replace("_", "")
    if name in ("incontext",):
        return ReformMode.IN_CONTEXT
    if name in _MODE_NAMES:
        return _MODE_NAMES[name]
    raise ConfigError(f"unknown reform mode {value!r} (expected naive|incontext|none)")


def load_config(path: str | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional flat TOML file plus overrides.

    File keys mirror the PipelineConfig field names; override values (CLI
    flags) win over file values. Unknown keys are configuration errors, and
    the merged result is validated before being returned.
    """
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _toml.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        for key, value in raw.items():
            if key not in _CONFIG_COERCERS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in _CONFIG_COERCERS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    kwargs: dict[str, Any] = {}
    for key, value in values.items():
        coerce = _CONFIG_COERCERS[key]
        try:
            kwargs[key] = coerce(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for config key {key!r}: {value!r}") from exc
    return validate_config(PipelineConfig(**kwargs))
