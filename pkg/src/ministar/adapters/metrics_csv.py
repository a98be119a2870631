"""Append-only CSV metric logs."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Mapping, Sequence


class CsvSink:
    """Writes the header once when the file is new, then one row per `append`.

    Columns missing from a row are left empty; extra keys are an error so a
    typo never silently disappears.
    """

    def __init__(self, path: str | Path, fields: Sequence[str]):
        self.path = Path(path)
        self.fields = list(fields)
        self._ensure_header()

    def _ensure_header(self) -> None:
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.fields)
            return
        with open(self.path, "r", newline="", encoding="utf-8") as f:
            header = next(csv.reader(f), [])
        if header != self.fields:
            raise ValueError(f"{self.path} has columns {header}, expected {self.fields}")

    def append(self, row: Mapping[str, object]) -> None:
        unknown = sorted(set(row) - set(self.fields))
        if unknown:
            raise ValueError(f"unknown metric columns {unknown}")
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([_fmt(row.get(k)) for k in self.fields])


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    """Rows of a metrics CSV with every non-empty cell parsed as float."""
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for k, v in row.items():
                if v in ("", None):
                    continue
                try:
                    parsed[k] = float(v)
                except ValueError:
                    continue
            rows.append(parsed)
    return rows
