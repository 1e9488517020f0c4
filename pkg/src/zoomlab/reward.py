"""Verifiable episode reward with a correctness-gated tool bonus.

``total = s_ok + s_fmt + [s_ok == 1] * s_tool``: the tool bonus only pays out
on correct answers, so the policy cannot farm reward by zooming without
solving the task.  Bonuses are small relative to correctness (0.5 each by
default) so correctness dominates the ordering of trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .rollout import Trajectory
from .scenegen import Scene, judge


@dataclass(frozen=True)
class RewardConfig:
    format_bonus: float = 0.5
    tool_bonus: float = 0.5

    def __post_init__(self) -> None:
        if self.format_bonus < 0 or self.tool_bonus < 0:
            raise ConfigError("reward invariant violated: bonuses must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    """Components are stored pre-gating; the gate applies in ``total``."""

    s_ok: float
    s_fmt: float
    s_tool: float
    total: float


def score(traj: Trajectory, scene: Scene, config: RewardConfig) -> RewardBreakdown:
    s_ok = float(judge(scene, traj.parsed_answer))
    s_fmt = config.format_bonus if traj.format_ok else 0.0
    s_tool = config.tool_bonus if traj.zoom_successes >= 1 else 0.0
    total = s_ok + s_fmt + (s_tool if s_ok == 1.0 else 0.0)
    return RewardBreakdown(s_ok=s_ok, s_fmt=s_fmt, s_tool=s_tool, total=total)
