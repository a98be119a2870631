"""League state on disk.

    league/
      manifest.txt     header, config, counters, one line per player
      payoff.csv       learner,opponent,wins,draws,losses per ordered pair
      rng.json         bit-generator state of the matchmaking rng
      snapshots/       one parameter file per player
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

from ministar.domain.league import AgentType, League, LeagueConfig, LeaguePlayer
from ministar.errors import FormatError
from ministar.ndgrad.checkpoint import load_params, save_params

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# ministar-league v1"
PAYOFF_FIELDS = ["learner", "opponent", "wins", "draws", "losses"]


def _player_line(p: LeaguePlayer) -> str:
    return (
        f"player id={p.id} type={p.agent_type.value} historical={int(p.is_historical)} "
        f"parent={p.parent or '-'} steps={p.steps_trained} last={p.last_checkpoint_steps} "
        f"checkpoints={p.checkpoints} snapshot=snapshots/{p.id}.ndgc"
    )


def save_league(league: League, directory: str | Path) -> Path:
    root = Path(directory)
    (root / "snapshots").mkdir(parents=True, exist_ok=True)
    tick, cursor = league.counters
    lines = [MANIFEST_HEADER, f"config {league.cfg.model_dump_json()}", f"counters tick={tick} cursor={cursor}"]
    for p in league.players.values():
        lines.append(_player_line(p))
        save_params(root / "snapshots" / f"{p.id}.ndgc", league.params[p.id])
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    with open(root / "payoff.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(PAYOFF_FIELDS)
        w.writerows(league.payoff.rows())
    (root / "rng.json").write_text(json.dumps(league.rng.bit_generator.state), encoding="utf-8")
    log.info("[league] saved %d players to %s", len(league.players), root)
    return root


def _fields(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.split()[1:])


def load_league(directory: str | Path) -> League:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no league manifest in {root}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{manifest} is not a league manifest")
    cfg = None
    tick = cursor = 0
    players: list[LeaguePlayer] = []
    params = {}
    try:
        for line in lines[1:]:
            if line.startswith("config "):
                cfg = LeagueConfig.model_validate_json(line[len("config "):])
            elif line.startswith("counters "):
                f = _fields(line)
                tick, cursor = int(f["tick"]), int(f["cursor"])
            elif line.startswith("player "):
                f = _fields(line)
                p = LeaguePlayer(
                    f["id"], AgentType(f["type"]), f["historical"] == "1",
                    None if f["parent"] == "-" else f["parent"],
                    int(f["steps"]), int(f["last"]), int(f["checkpoints"]),
                )
                players.append(p)
                params[p.id] = load_params(root / f["snapshot"])
            elif line.strip():
                raise FormatError(f"unexpected manifest line {line[:40]!r}")
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad league manifest: {exc}") from exc
    if cfg is None:
        raise FormatError("league manifest has no config line")

    with open(root / "payoff.csv", "r", newline="", encoding="utf-8") as f:
        rows = [
            (r["learner"], r["opponent"], int(r["wins"]), int(r["draws"]), int(r["losses"]))
            for r in csv.DictReader(f)
        ]
    rng_state = json.loads((root / "rng.json").read_text(encoding="utf-8"))
    return League.restore(cfg, players, params, rows, rng_state, tick, cursor)
