"""Math word problems solved by generated programs: reformulate the statement
into K surface forms, retrieve domain-matched worked examples, sample N
programs, execute them, and majority-vote the results."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    Answer,
    AnswerKind,
    ConfigError,
    DatasetKind,
    GoldAnswer,
    ParseError,
    PipelineConfig,
    Problem,
    ReformMode,
    RmpotError,
    load_config,
    validate_config,
)
from .pipeline import SolveOutcome, solve_problem  # noqa: F401
