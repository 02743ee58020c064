"""Machine-readable stage log: one ``stage=<name> key=value ...`` line per record."""

import logging
from pathlib import Path
from typing import Optional

from ..common import format_value

logger = logging.getLogger(__name__)


def format_record(stage: str, **fields) -> str:
    parts = [f"stage={stage}"]
    for key, value in fields.items():
        text = format_value(value)
        if any(ch.isspace() for ch in text):
            text = '"' + text.replace('"', "'") + '"'
        parts.append(f"{key}={text}")
    return " ".join(parts)


def parse_record(line: str) -> dict[str, str]:
    """Inverse of format_record for unquoted values (what tests need)."""
    record = {}
    for token in line.split():
        key, _, value = token.partition("=")
        record[key] = value
    return record


class StageLog:
    """Appends records to ``stage_log.txt`` and echoes them through logging."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None

    def record(self, stage: str, **fields) -> None:
        line = format_record(stage, **fields)
        logger.info(line)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(line + "\n")

    def records(self, stage: Optional[str] = None) -> list[dict[str, str]]:
        if self.path is None or not self.path.exists():
            return []
        rows = [parse_record(line) for line in self.path.read_text().splitlines() if line.strip()]
        return [r for r in rows if stage is None or r.get("stage") == stage]
