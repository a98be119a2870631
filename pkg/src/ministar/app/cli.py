"""Command-line entry point: `python -m ministar <command>`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ministar.adapters.league_store import load_league, save_league
from ministar.adapters.metrics_csv import CsvSink
from ministar.adapters.plots import plot_metrics
from ministar.adapters.replay_files import write_dataset
from ministar.app.actor_learner import RL_FIELDS, run_rl
from ministar.app.config import RunConfig, build_run_config, read_config_file, substream
from ministar.app.league_loop import LEAGUE_FIELDS, run_league
from ministar.app.matches import AgentFactory, agent_factory, evaluate, policy_from_params
from ministar.domain.league import League
from ministar.domain.policy_net import HEAD_NAMES, PolicyNet
from ministar.domain.sl import ReplayDataset, generate_replays, sl_evaluate, sl_train_epoch
from ministar.drivers.scripted import LEVELS
from ministar.errors import MinistarError
from ministar.ndgrad.checkpoint import load_params, save_params
from ministar.ndgrad.optim import Adam

log = logging.getLogger(__name__)

SL_FIELDS = ["epoch", "loss", "running_loss", "grad_norm", "test_loss"] + [f"acc_{h}" for h in HEAD_NAMES] + [f"test_acc_{h}" for h in HEAD_NAMES]


# ============================ HELPERS ========================================

def _fresh_sink(path: Path, fields) -> CsvSink:
    if path.exists():
        path.unlink()
    return CsvSink(path, fields)


def _initial_policy(cfg: RunConfig, checkpoint: Optional[str]) -> PolicyNet:
    if checkpoint:
        return policy_from_params(cfg.net, load_params(checkpoint)).train()
    return PolicyNet(cfg.net, seed=substream(cfg.seed, "init"))


def _agent(cfg: RunConfig, agent: str, greedy: bool = False) -> AgentFactory:
    """A scripted level name or a checkpoint path."""
    if agent in LEVELS:
        return agent_factory(agent)
    return agent_factory("net", cfg.net, load_params(agent), greedy)


# ============================ COMMANDS =======================================

def cmd_gen_replays(cfg: RunConfig, args: argparse.Namespace) -> int:
    env = cfg.env
    records = generate_replays(env, cfg.sl.games, substream(cfg.seed, "replays"),
                               cfg.sl.demonstrator, cfg.sl.opponent, progress=sys.stderr.isatty())
    meta = {"seed": cfg.seed, "games": cfg.sl.games, "config": env.digest(),
            "demonstrator": cfg.sl.demonstrator, "opponent": cfg.sl.opponent}
    out = write_dataset(cfg.replays_dir, records, meta)
    frames = sum(len(r.replay.frames) for r in records)
    wins = sum(1 for r in records if r.replay.winner == r.seat)
    print(f"games={len(records)} frames={frames} demonstrator_wins={wins} dir={out}")
    return 0


def cmd_sl_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = ReplayDataset.from_dir(args.dataset or cfg.replays_dir, cfg.env, cfg.sl.train_split)
    policy = _initial_policy(cfg, args.checkpoint)
    optimizer = Adam(policy.parameters(), cfg.sl.lr, (cfg.sl.beta1, cfg.sl.beta2), cfg.sl.eps)
    rng = cfg.rng("policy")
    sink = _fresh_sink(cfg.metrics_dir / "sl.csv", SL_FIELDS)
    cfg.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    train, test = dataset.train, dataset.test or dataset.train
    log.info("[sl] %d train / %d test games, dataset %s", len(train), len(dataset.test), dataset.digest()[:12])

    best = None
    try:
        for epoch in range(1, cfg.sl.epochs + 1):
            m = sl_train_epoch(policy, train, optimizer, cfg.sl, rng)
            held = sl_evaluate(policy, test, cfg.sl)
            row = {"epoch": epoch, "loss": m.loss, "running_loss": m.running_loss, "grad_norm": m.grad_norm,
                   "test_loss": held.loss}
            row.update({f"acc_{h}": v for h, v in m.accuracy.items()})
            row.update({f"test_acc_{h}": v for h, v in held.accuracy.items()})
            sink.append(row)
            log.info("[sl] epoch %d loss=%.4f test=%.4f acc_type=%.3f", epoch, m.loss, held.loss,
                     m.accuracy.get("action_type", 0.0))
            if best is None or held.loss < best:
                best = held.loss
                save_params(cfg.checkpoints_dir / "sl_best.ndgc", policy.state_dict())
    except KeyboardInterrupt:
        log.warning("[sl] interrupted; writing final checkpoint")
    save_params(cfg.checkpoints_dir / "sl_final.ndgc", policy.state_dict())
    print(f"sl done: best_test_loss={best if best is not None else float('nan'):.4f} out={cfg.checkpoints_dir}")
    return 0


def cmd_rl_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    policy = _initial_policy(cfg, args.checkpoint)
    reference = None
    if args.checkpoint and cfg.rl.use_kl:
        reference = policy_from_params(cfg.net, load_params(args.checkpoint))
    opponent = _agent(cfg, args.opponent or cfg.rl.opponent)
    sink = _fresh_sink(cfg.metrics_dir / "rl.csv", RL_FIELDS)
    cfg.checkpoints_dir.mkdir(parents=True, exist_ok=True)

    run = run_rl(policy, cfg.net, cfg.env, cfg.rl, opponent, substream(cfg.seed, "env"),
                 reference=reference, sink=sink, progress=sys.stderr.isatty())
    save_params(cfg.checkpoints_dir / "rl_final.ndgc", policy.state_dict())
    print(f"rl done: updates={run.updates} version={run.learner.store.version} "
          f"interrupted={run.interrupted} actor_failures={run.actor_failures}")
    return 0


def cmd_league(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.resume:
        league = load_league(cfg.league_dir)
    else:
        init = _initial_policy(cfg, args.checkpoint)
        league = League(cfg.league, init.state_dict(), seed=substream(cfg.seed, "league"))
    reference = policy_from_params(cfg.net, load_params(args.checkpoint)) if args.checkpoint and cfg.rl.use_kl else None
    sink = _fresh_sink(cfg.metrics_dir / "league.csv", LEAGUE_FIELDS)
    run = run_league(league, cfg.net, cfg.env, cfg.rl, cfg.league.matches, substream(cfg.seed, "env"),
                     reference=reference, sink=sink, progress=sys.stderr.isatty())
    save_league(league, cfg.league_dir)
    print(f"league done: matches={run.matches} updates={run.updates} historical={len(league.historical())} "
          f"interrupted={run.interrupted}")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise MinistarError("eval needs --checkpoint (a checkpoint path or a scripted level)")
    a = _agent(cfg, args.checkpoint, greedy=args.greedy)
    b = _agent(cfg, args.opponent or cfg.rl.opponent, greedy=args.greedy)
    report = evaluate(cfg.env, a, b, args.games, substream(cfg.seed, "eval"), progress=sys.stderr.isatty())
    print(report.line())
    return 0


def cmd_plot(cfg: RunConfig, args: argparse.Namespace) -> int:
    metrics = Path(args.metrics) if args.metrics else cfg.metrics_dir / "rl.csv"
    png = Path(args.png) if args.png else metrics.with_suffix(".png")
    columns = args.columns.split(",") if args.columns else None
    print(plot_metrics(metrics, png, columns))
    return 0


COMMANDS = {
    "gen-replays": cmd_gen_replays,
    "sl-train": cmd_sl_train,
    "rl-train": cmd_rl_train,
    "league": cmd_league,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


# ============================ MAIN ===========================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (net./env./sl./rl./league. prefixes).")
    common.add_argument("--seed", type=int, help="Root seed (env MINISTAR_SEED).")
    common.add_argument("--profile", help="Network size profile: tiny or mini (env MINISTAR_PROFILE).")
    common.add_argument("--out", help="Output directory (env MINISTAR_OUT).")
    common.add_argument("--log-level", help="Logging level (env MINISTAR_LOG_LEVEL).")

    ap = argparse.ArgumentParser(prog="ministar", description="Desk-scale league training on a tiny RTS.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-replays", parents=[common], help="Record scripted demonstrator games.")
    p.add_argument("--games", type=int, help="Number of games (sl.games).")

    p = sub.add_parser("sl-train", parents=[common], help="Supervised training on recorded replays.")
    p.add_argument("--epochs", type=int, help="Training epochs (sl.epochs).")
    p.add_argument("--dataset", help="Replay dataset directory (default OUT/replays).")
    p.add_argument("--checkpoint", help="Start from these parameters.")

    p = sub.add_parser("rl-train", parents=[common], help="Actor-learner training against a fixed opponent.")
    p.add_argument("--updates", type=int, help="Learner updates (rl.updates).")
    p.add_argument("--opponent", help="Scripted level or checkpoint path (rl.opponent).")
    p.add_argument("--checkpoint", help="Initial parameters; also the KL reference policy.")

    p = sub.add_parser("league", parents=[common], help="Run the league coordinator loop.")
    p.add_argument("--matches", type=int, help="Matches to play (league.matches).")
    p.add_argument("--checkpoint", help="Initial parameters for every learner.")
    p.add_argument("--resume", action="store_true", help="Continue from OUT/league.")

    p = sub.add_parser("eval", parents=[common], help="Seeded head-to-head win rate.")
    p.add_argument("--checkpoint", help="Agent A: checkpoint path or scripted level.")
    p.add_argument("--opponent", help="Agent B: checkpoint path or scripted level.")
    p.add_argument("--games", type=int, default=200, help="Games, played in seat-swapped pairs.")
    p.add_argument("--greedy", action="store_true", help="Argmax instead of sampling for network agents.")

    p = sub.add_parser("plot", parents=[common], help="Render a metrics CSV to PNG.")
    p.add_argument("--metrics", help="Metrics CSV (default OUT/metrics/rl.csv).")
    p.add_argument("--png", help="Output image (default next to the CSV).")
    p.add_argument("--columns", help="Comma-separated columns to draw.")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    overrides = {
        "profile": args.profile,
        "seed": args.seed,
        "out": args.out,
        "log_level": args.log_level,
        "sl.epochs": getattr(args, "epochs", None),
        "rl.updates": getattr(args, "updates", None),
        "league.matches": getattr(args, "matches", None),
    }
    if args.command == "gen-replays":
        overrides["sl.games"] = args.games
    return build_run_config(values, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        logging.basicConfig(level=cfg.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s %(message)s")
        return COMMANDS[args.command](cfg, args)
    except (MinistarError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
