"""Plain-text replays and the on-disk replay dataset.

A replay file is a header line followed by one line per frame holding both
players' actions:

    # microrts-replay v1 seed=12 config=3f2a9c1d0b7e winner=0
    t=2 d=1 q=0 u=1 tu=- tl=3,4 | t=0 d=1 q=0 u=- tu=- tl=-

A dataset directory holds the replay files plus `dataset.txt` (generation
parameters) and `index.csv` (one row per game).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ministar.drivers.microrts import ArgsAction, Replay
from ministar.errors import FormatError

log = logging.getLogger(__name__)

REPLAY_HEADER = "# microrts-replay v1"
DATASET_HEADER = "# ministar-dataset v1"
INDEX_FIELDS = ["file", "seed", "seat", "demonstrator", "opponent", "frames", "winner"]


def format_action(a: ArgsAction) -> str:
    units = ",".join(str(u) for u in a.selected_units) or "-"
    target = "-" if a.target_unit is None else str(a.target_unit)
    loc = "-" if a.target_location is None else f"{a.target_location[0]},{a.target_location[1]}"
    return f"t={a.action_type} d={a.delay} q={int(a.queue)} u={units} tu={target} tl={loc}"


def parse_action(text: str) -> ArgsAction:
    try:
        fields = dict(part.split("=", 1) for part in text.split())
        units = () if fields["u"] == "-" else tuple(int(u) for u in fields["u"].split(","))
        target = None if fields["tu"] == "-" else int(fields["tu"])
        loc = None if fields["tl"] == "-" else tuple(int(v) for v in fields["tl"].split(","))
        return ArgsAction(int(fields["t"]), int(fields["d"]), fields["q"] == "1", units, target, loc)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad action {text!r}: {exc}") from exc


def _header_fields(line: str, prefix: str) -> dict[str, str]:
    if not line.startswith(prefix):
        raise FormatError(f"expected header {prefix!r}, got {line[:40]!r}")
    return dict(part.split("=", 1) for part in line[len(prefix):].split())


def replay_to_text(replay: Replay) -> str:
    winner = "-" if replay.winner is None else str(replay.winner)
    lines = [f"{REPLAY_HEADER} seed={replay.seed} config={replay.config_digest} winner={winner}"]
    lines += [f"{format_action(a0)} | {format_action(a1)}" for a0, a1 in replay.frames]
    return "\n".join(lines) + "\n"


def replay_from_text(text: str) -> Replay:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty replay")
    head = _header_fields(lines[0], REPLAY_HEADER)
    frames = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        left, sep, right = line.partition("|")
        if not sep:
            raise FormatError(f"line {n}: expected two actions")
        frames.append((parse_action(left), parse_action(right)))
    winner = head.get("winner", "-")
    return Replay(int(head["seed"]), head["config"], frames, None if winner == "-" else int(winner))


@dataclass(frozen=True)
class ReplayRecord:
    """A replay plus which seat holds the demonstrator."""

    file: str
    replay: Replay
    seat: int
    demonstrator: str
    opponent: str


def write_dataset(directory: str | Path, records: list[ReplayRecord], meta: dict[str, str]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        (directory / rec.file).write_text(replay_to_text(rec.replay), encoding="utf-8")
    header = " ".join(f"{k}={v}" for k, v in meta.items())
    listing = [f"{DATASET_HEADER} {header}"] + [rec.file for rec in records]
    (directory / "dataset.txt").write_text("\n".join(listing) + "\n", encoding="utf-8")
    with open(directory / "index.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(INDEX_FIELDS)
        for rec in records:
            winner = "" if rec.replay.winner is None else rec.replay.winner
            w.writerow([rec.file, rec.replay.seed, rec.seat, rec.demonstrator, rec.opponent, len(rec.replay.frames), winner])
    log.info("[replays] wrote %d games to %s", len(records), directory)
    return directory


def read_dataset(directory: str | Path) -> tuple[list[ReplayRecord], dict[str, str]]:
    directory = Path(directory)
    listing = directory / "dataset.txt"
    if not listing.exists():
        raise FileNotFoundError(f"no replay dataset at {directory} (missing dataset.txt)")
    lines = listing.read_text(encoding="utf-8").splitlines()
    meta = _header_fields(lines[0], DATASET_HEADER) if lines else {}
    rows: dict[str, dict[str, str]] = {}
    with open(directory / "index.csv", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows[row["file"]] = row
    records = []
    for name in (line.strip() for line in lines[1:]):
        if not name:
            continue
        row: Optional[dict[str, str]] = rows.get(name)
        if row is None:
            raise FormatError(f"{name} is listed in dataset.txt but missing from index.csv")
        replay = replay_from_text((directory / name).read_text(encoding="utf-8"))
        records.append(ReplayRecord(name, replay, int(row["seat"]), row["demonstrator"], row["opponent"]))
    return records, meta
