"""Exception hierarchy shared by every ministar package."""

from __future__ import annotations


class MinistarError(Exception):
    """Root of all errors raised on purpose by ministar."""


class DimensionError(MinistarError, ValueError):
    """Tensor shapes do not agree with what an op or layer expects."""


class NonFiniteError(MinistarError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class TargetIndexError(MinistarError, IndexError):
    """A class index is outside the logits it refers to, or masked out."""


class NoValidActionError(MinistarError):
    """A mask left nothing to choose from."""


class RejectedActionError(MinistarError):
    """The environment refused an action; `mask` names the violated mask."""

    def __init__(self, mask: str, detail: str):
        super().__init__(f"{mask}: {detail}")
        self.mask = mask
        self.detail = detail


class ConfigError(MinistarError, ValueError):
    """Bad configuration key or value; `key` names the offender when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class TrajectoryError(MinistarError, ValueError):
    """RL data with mismatched lengths or otherwise unusable."""


class LeagueError(MinistarError):
    """Registry or matchmaking misuse."""


class FormatError(MinistarError, ValueError):
    """A file or wire record could not be decoded."""
