"""Shared helpers (error hierarchy, time constants, `key = value` text codec).

Lives at app/ level to avoid circular imports between utils/ and models/.
"""

from typing import Iterable, Mapping, Tuple

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class PipelineError(ValueError):
    """Root of every data or processing failure the CLI maps to exit code 1."""


class RecordingFormatError(PipelineError):
    pass


class SyncError(PipelineError):
    pass


class GatingError(PipelineError):
    pass


class ReconstructionError(PipelineError):
    pass


class FusionError(PipelineError):
    pass


class ExportError(PipelineError):
    pass


class EvaluationError(PipelineError):
    pass


class SimulationError(PipelineError):
    pass


class ConfigError(PipelineError):
    """Usage/configuration problem. The CLI maps this to exit code 2, not 1."""


class StageError(PipelineError):
    """A pipeline stage failed; carries the stage name and the original cause."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


def parse_key_value_text(text: str, source: str = "<text>") -> dict[str, str]:
    """
    Parse line-oriented ``key = value`` text (manifests, calibrations, configs).

    Blank lines and lines starting with ``#`` are ignored. The value is
    everything after the first ``=``, stripped. A line without ``=``, an empty
    key, or a key given twice raises ValueError naming the source and line.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def format_value(value) -> str:
    """Text form that parses back to the same value (repr for floats)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_key_value_text(items: Mapping[str, object] | Iterable[Tuple[str, object]]) -> str:
    pairs = items.items() if isinstance(items, Mapping) else items
    return "".join(
        f"{key} = {format_value(value)}\n" for key, value in pairs if value is not None
    )
