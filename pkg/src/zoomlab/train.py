"""Supervised fine-tuning and group-relative policy optimization.

Both trainers share one backward path: the loss is an average over
model-role tokens, observation and prompt tokens never contribute gradient,
and every context is the same right-aligned window used during rollouts.

The policy-gradient step is group-relative: each query is answered by a
group of sampled episodes, advantages are rewards centered within the
group, and each token's surrogate is the clipped-ratio objective.  The
reference policy is refreshed every step (the recorded rollout logprobs ARE
the reference), so ratios start at exactly 1 and the optional KL penalty
starts at exactly 0 with a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import SftExample
from .errors import ConfigError, ContractError, NumericError
from .policy import (
    PolicyGrads,
    PolicyParams,
    RowsCache,
    accumulate_rows_grad,
    apply_gradient,
    forward,
    forward_rows_with_cache,
)
from .reward import RewardConfig, score
from .rng import child_rng
from .rollout import RolloutLimits, Trajectory, context_at, run_episode_batch
from .scenegen import SceneSpec, generate_scene
from .vocab import ROLE_MODEL, Vocabulary

SFT_LEARNING_RATE = 1e-2
RL_LEARNING_RATE = 1e-3

ADVANTAGE_MEAN_BASELINE = "mean_baseline"
ADVANTAGE_MEAN_STD = "mean_std_normalized"
ADVANTAGE_MODES = (ADVANTAGE_MEAN_BASELINE, ADVANTAGE_MEAN_STD)

# Floor on the group reward spread when normalizing, so an all-equal-reward
# group yields zero advantages instead of a division blow-up.
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by the policy-gradient loop."""

    learning_rate: float
    clip_delta: float = 0.2
    kl_coefficient: float = 0.0
    advantage_mode: str = ADVANTAGE_MEAN_BASELINE
    group_size: int = 8
    groups_per_step: int = 4

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("train config invariant violated: learning_rate must be positive")
        if not 0.0 < self.clip_delta < 1.0:
            raise ConfigError("train config invariant violated: clip_delta must lie in (0, 1)")
        if self.kl_coefficient < 0:
            raise ConfigError(
                "train config invariant violated: kl_coefficient must be non-negative"
            )
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ConfigError(
                f"train config invariant violated: unknown advantage_mode "
                f"{self.advantage_mode!r} (choose from {ADVANTAGE_MODES})"
            )
        if self.group_size < 2:
            raise ConfigError("train config invariant violated: group_size must be >= 2")
        if self.groups_per_step < 1:
            raise ConfigError("train config invariant violated: groups_per_step must be >= 1")


def grpo_advantages(rewards: np.ndarray, mode: str = ADVANTAGE_MEAN_BASELINE) -> np.ndarray:
    """Group-relative advantages: center on the group mean, optionally scale.

    ``mean_std_normalized`` divides by the population standard deviation
    (floored at ``STD_FLOOR``); a group with identical rewards therefore has
    all-zero advantages in both modes.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise ConfigError("advantages need a flat group of at least 2 rewards")
    centered = rewards - rewards.mean()
    if mode == ADVANTAGE_MEAN_BASELINE:
        return centered
    if mode == ADVANTAGE_MEAN_STD:
        return centered / max(float(rewards.std()), STD_FLOOR)
    raise ConfigError(f"unknown advantage_mode {mode!r}")


def teacher_forced_logprobs(
    params: PolicyParams, traj: Trajectory, vocabulary: Vocabulary
) -> np.ndarray:
    """Replay a trajectory under ``params``: logprob of each model token.

    For an episode sampled on its own (``run_episode``) this reproduces
    ``traj.logprobs`` bit for bit at the collecting parameters --
    sampling-time masking never touches the recorded distribution.  Episodes
    collected in a lockstep batch get the same guarantee from
    ``group_logprobs``, which rebuilds the batch round structure.
    """
    window = params.dims.context_window
    pad = vocabulary.pad_id
    out = np.empty(len(traj.model_positions), dtype=np.float64)
    for i, position in enumerate(traj.model_positions):
        context = context_at(traj.token_ids, int(position), window, pad)
        probs = forward(params, context)
        out[i] = np.log(probs[int(traj.token_ids[position])])
    return out


def sft_step(
    params: PolicyParams,
    batch: list[SftExample],
    vocabulary: Vocabulary,
    learning_rate: float,
) -> tuple[PolicyParams, dict]:
    """One gradient-descent step on the mean NLL of the batch's model tokens."""
    if not batch:
        raise ContractError("sft_step requires a non-empty batch")
    window = params.dims.context_window
    pad = vocabulary.pad_id

    contexts: list[np.ndarray] = []
    tokens: list[int] = []
    for example in batch:
        for position in np.flatnonzero(example.roles == ROLE_MODEL):
            contexts.append(context_at(example.token_ids, int(position), window, pad))
            tokens.append(int(example.token_ids[position]))
    total_tokens = len(tokens)
    if total_tokens == 0:
        raise ContractError("sft_step requires at least one model-role token")

    cache = forward_rows_with_cache(params, np.stack(contexts))
    rows = np.arange(total_tokens)
    token_arr = np.asarray(tokens)
    loss = -float(np.log(cache.probs[rows, token_arr]).sum()) / total_tokens

    dlogits = cache.probs / total_tokens
    dlogits[rows, token_arr] -= 1.0 / total_tokens
    grads = PolicyGrads.zeros(params.dims)
    accumulate_rows_grad(params, cache.contexts, cache.x, cache.hidden, dlogits, grads)

    return apply_gradient(params, grads, learning_rate), {
        "loss": loss,
        "model_tokens": total_tokens,
    }


@dataclass(frozen=True)
class GroupBatch:
    """One query's sampled group: episodes, rewards, and reference logprobs.

    With per-step reference refresh the recorded rollout logprobs double as
    ``ref_logprobs``, so ratios start at exactly 1.
    """

    query_id: int
    trajectories: tuple[Trajectory, ...]
    rewards: np.ndarray
    ref_logprobs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.trajectories) < 2:
            raise ConfigError("group batch invariant violated: need at least 2 episodes")
        if not (len(self.trajectories) == len(self.rewards) == len(self.ref_logprobs)):
            raise ConfigError(
                "group batch invariant violated: episodes, rewards, and reference "
                "logprobs must align"
            )
        for traj, ref in zip(self.trajectories, self.ref_logprobs):
            if len(ref) != len(traj.logprobs):
                raise ConfigError(
                    "group batch invariant violated: one reference logprob per "
                    "model token"
                )


@dataclass(frozen=True)
class _ReplayRows:
    """Flattened lockstep replay of a batch of trajectories.

    Row order is (round, trajectory): the exact batch structure used when
    the trajectories were collected, so the probabilities are bit-identical
    to the ones recorded during sampling.
    """

    cache: RowsCache
    episode: np.ndarray  # row -> flat trajectory index
    tokens: np.ndarray  # row -> sampled token id
    logprobs: np.ndarray  # row -> log p(token | context)


def _replay_trajectories(
    params: PolicyParams, trajectories: list[Trajectory], vocabulary: Vocabulary
) -> _ReplayRows:
    window = params.dims.context_window
    pad = vocabulary.pad_id
    windows: list[np.ndarray] = []
    for traj in trajectories:
        padded = np.concatenate(
            [np.full(window, pad, dtype=np.int64), np.asarray(traj.token_ids, dtype=np.int64)]
        )
        view = np.lib.stride_tricks.sliding_window_view(padded, window)
        windows.append(view[traj.model_positions])
    counts = [len(w) for w in windows]

    round_caches: list[RowsCache] = []
    episode: list[int] = []
    tokens: list[int] = []
    for t in range(max(counts, default=0)):
        alive = [i for i, count in enumerate(counts) if count > t]
        contexts = np.stack([windows[i][t] for i in alive])
        round_caches.append(forward_rows_with_cache(params, contexts))
        episode.extend(alive)
        tokens.extend(
            int(trajectories[i].token_ids[trajectories[i].model_positions[t]]) for i in alive
        )

    cache = RowsCache(
        contexts=np.concatenate([c.contexts for c in round_caches]),
        x=np.concatenate([c.x for c in round_caches]),
        hidden=np.concatenate([c.hidden for c in round_caches]),
        probs=np.concatenate([c.probs for c in round_caches]),
    )
    token_arr = np.asarray(tokens, dtype=np.int64)
    logprobs = np.log(cache.probs[np.arange(len(token_arr)), token_arr])
    if not np.all(np.isfinite(logprobs)):
        raise NumericError("teacher-forced replay produced non-finite logprobs")
    return _ReplayRows(
        cache=cache,
        episode=np.asarray(episode, dtype=np.int64),
        tokens=token_arr,
        logprobs=logprobs,
    )


def _group_replay(params: PolicyParams, group: GroupBatch, vocabulary: Vocabulary) -> _ReplayRows:
    return _replay_trajectories(params, list(group.trajectories), vocabulary)


def _rows_from_episodes(
    episode_rows: np.ndarray, per_episode: tuple[np.ndarray, ...]
) -> np.ndarray:
    """Flatten per-episode token series into (round, episode) row order."""
    cursor = [0] * len(per_episode)
    out = np.empty(len(episode_rows), dtype=np.float64)
    for row, ep in enumerate(episode_rows):
        i = int(ep)
        out[row] = per_episode[i][cursor[i]]
        cursor[i] += 1
    return out


def group_logprobs(
    params: PolicyParams, group: GroupBatch, vocabulary: Vocabulary
) -> tuple[np.ndarray, ...]:
    """Teacher-forced logprobs per trajectory, in collection batch order.

    At the parameters that collected the group this reproduces each
    trajectory's recorded logprobs bit for bit.
    """
    replay = _group_replay(params, group, vocabulary)
    out: list[list[float]] = [[] for _ in group.trajectories]
    for row, ep in enumerate(replay.episode):
        out[int(ep)].append(float(replay.logprobs[row]))
    return tuple(np.asarray(lp, dtype=np.float64) for lp in out)


def token_ratios(
    params: PolicyParams, group: GroupBatch, vocabulary: Vocabulary
) -> tuple[np.ndarray, ...]:
    """Per-model-token importance ratios against the reference logprobs."""
    current = group_logprobs(params, group, vocabulary)
    return tuple(
        np.exp(lp - ref) for lp, ref in zip(current, group.ref_logprobs)
    )


def collect_group(
    params: PolicyParams,
    vocabulary: Vocabulary,
    scene,
    limits: RolloutLimits,
    group_size: int,
    rng: np.random.Generator,
    reward_config: RewardConfig,
    allow_zoom: bool = True,
) -> GroupBatch:
    """Sample a group of episodes on one scene at the current parameters.

    Refreshing the reference every step means the recorded rollout logprobs
    double as the reference logprobs: ratios are exactly 1 at collection.
    """
    return collect_step(
        params, vocabulary, [scene], [rng], limits, group_size, reward_config, allow_zoom
    )[0]


def collect_step(
    params: PolicyParams,
    vocabulary: Vocabulary,
    scenes: list,
    rngs: list[np.random.Generator],
    limits: RolloutLimits,
    group_size: int,
    reward_config: RewardConfig,
    allow_zoom: bool = True,
) -> list[GroupBatch]:
    """Sample one group per scene, all groups batched into shared rounds.

    Group ``g`` draws every token from ``rngs[g]`` in (round, episode)
    order, so each group's stream is independent of how many other groups
    share the batch.
    """
    if len(scenes) != len(rngs):
        raise ConfigError("collect_step needs one rng per scene")
    flat_scenes = [scene for scene in scenes for _ in range(group_size)]
    flat_rngs = [rng for rng in rngs for _ in range(group_size)]
    trajectories = run_episode_batch(
        params, vocabulary, flat_scenes, flat_rngs, limits, allow_zoom=allow_zoom
    )
    batches = []
    for g, scene in enumerate(scenes):
        group = trajectories[g * group_size : (g + 1) * group_size]
        rewards = [score(traj, scene, reward_config).total for traj in group]
        batches.append(
            GroupBatch(
                query_id=scene.index,
                trajectories=tuple(group),
                rewards=np.asarray(rewards, dtype=np.float64),
                ref_logprobs=tuple(traj.logprobs for traj in group),
            )
        )
    return batches


def grpo_step(
    params: PolicyParams,
    ref_params: PolicyParams,
    groups: list[GroupBatch],
    vocabulary: Vocabulary,
    config: TrainConfig,
) -> tuple[PolicyParams, dict]:
    """One clipped policy-gradient step over a batch of groups.

    Per token the surrogate is ``min(ratio * adv, clip(ratio) * adv)``; a
    token whose ratio left the trust region on the favored side contributes
    zero gradient and is counted in ``clip_fraction``.
    """
    if not groups:
        raise ContractError("grpo_step requires at least one group")
    low, high = 1.0 - config.clip_delta, 1.0 + config.clip_delta

    total_tokens = sum(
        len(traj.logprobs) for group in groups for traj in group.trajectories
    )
    if total_tokens == 0:
        raise ContractError("grpo_step requires at least one model-role token")

    trajectories = [traj for group in groups for traj in group.trajectories]
    advantages = np.concatenate(
        [grpo_advantages(group.rewards, config.advantage_mode) for group in groups]
    )
    ref_logprobs = tuple(lp for group in groups for lp in group.ref_logprobs)
    reward_sum = float(sum(group.rewards.sum() for group in groups))
    episode_count = len(trajectories)
    tool_calls = sum(traj.tool_calls for traj in trajectories)

    replay = _replay_trajectories(params, trajectories, vocabulary)
    rows = np.arange(len(replay.tokens))
    adv = advantages[replay.episode]
    ref_lp = _rows_from_episodes(replay.episode, ref_logprobs)

    ratio = np.exp(replay.logprobs - ref_lp)
    clipped_ratio = np.clip(ratio, low, high)
    surrogate_sum = float(np.minimum(ratio * adv, clipped_ratio * adv).sum())

    gradient_clipped = ((adv > 0) & (ratio > high)) | ((adv < 0) & (ratio < low))
    clipped = int(gradient_clipped.sum())

    probs = replay.cache.probs
    dlogits = np.zeros_like(probs)
    live = ~gradient_clipped & (adv != 0.0)
    if live.any():
        scale = np.where(live, -adv * ratio / total_tokens, 0.0)
        dlogits -= probs * scale[:, None]
        dlogits[rows, replay.tokens] += scale
    kl_sum = 0.0
    if config.kl_coefficient > 0:
        ref_probs = _replay_trajectories(ref_params, trajectories, vocabulary).cache.probs
        log_ratio = np.log(probs) - np.log(ref_probs)
        kl_rows = np.sum(probs * log_ratio, axis=1)
        kl_sum = float(kl_rows.sum())
        dlogits += (config.kl_coefficient / total_tokens) * probs * (
            log_ratio - kl_rows[:, None]
        )

    grads = PolicyGrads.zeros(params.dims)
    if dlogits.any():
        accumulate_rows_grad(
            params,
            replay.cache.contexts,
            replay.cache.x,
            replay.cache.hidden,
            dlogits,
            grads,
        )

    loss = -surrogate_sum / total_tokens + config.kl_coefficient * kl_sum / total_tokens
    stats = {
        "loss": loss,
        "mean_reward": reward_sum / episode_count,
        "clip_fraction": clipped / total_tokens,
        "kl": kl_sum / total_tokens,
        "tool_call_rate": tool_calls / episode_count,
        "model_tokens": total_tokens,
    }
    return apply_gradient(params, grads, config.learning_rate), stats


def run_sft(
    params: PolicyParams,
    examples: list[SftExample],
    vocabulary: Vocabulary,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
) -> tuple[PolicyParams, list[dict]]:
    """Epochs of seeded-shuffle minibatch SFT; one metrics row per batch."""
    if not examples:
        raise ConfigError("sft stage requires a non-empty example list")
    if epochs < 0 or batch_size < 1:
        raise ConfigError("sft stage requires epochs >= 0 and batch_size >= 1")
    metrics: list[dict] = []
    for epoch in range(epochs):
        order = child_rng(seed, "sft-epoch", epoch).permutation(len(examples))
        for batch_index, start in enumerate(range(0, len(examples), batch_size)):
            batch = [examples[i] for i in order[start : start + batch_size]]
            params, stats = sft_step(params, batch, vocabulary, learning_rate)
            metrics.append({"epoch": epoch, "batch": batch_index, **stats})
    return params, metrics


def run_rl(
    params: PolicyParams,
    vocabulary: Vocabulary,
    spec: SceneSpec,
    pool_base: int,
    pool_size: int,
    limits: RolloutLimits,
    config: TrainConfig,
    steps: int,
    seed: int,
    reward_config: RewardConfig,
    allow_zoom: bool = True,
) -> tuple[PolicyParams, list[dict]]:
    """Policy-gradient steps over scenes drawn from one pool.

    Every step draws fresh scenes, samples a group per scene at the current
    parameters (which also refreshes the reference), and applies one update.
    Zero steps is a no-op stage.
    """
    if steps < 0 or pool_size < 1:
        raise ConfigError("rl stage requires steps >= 0 and pool_size >= 1")
    metrics: list[dict] = []
    for step in range(steps):
        scenes = []
        rngs = []
        for g in range(config.groups_per_step):
            rng = child_rng(seed, "rl-step", step, "group", g)
            scenes.append(generate_scene(spec, pool_base + int(rng.integers(pool_size))))
            rngs.append(rng)
        groups = collect_step(
            params,
            vocabulary,
            scenes,
            rngs,
            limits,
            config.group_size,
            reward_config,
            allow_zoom=allow_zoom,
        )
        params, stats = grpo_step(params, params, groups, vocabulary, config)
        metrics.append({"step": step, **stats})
    return params, metrics


STAGE_SFT = "sft"
STAGE_RL_PLAIN = "rl_plain"
STAGE_RL_AGENTIC = "rl_agentic"
STAGE_KINDS = (STAGE_SFT, STAGE_RL_PLAIN, STAGE_RL_AGENTIC)


def run_stage(
    kind: str,
    params: PolicyParams,
    vocabulary: Vocabulary,
    seed: int,
    *,
    examples: list[SftExample] | None = None,
    epochs: int = 1,
    batch_size: int = 8,
    learning_rate: float | None = None,
    spec: SceneSpec | None = None,
    pool_base: int = 0,
    pool_size: int = 0,
    limits: RolloutLimits | None = None,
    config: TrainConfig | None = None,
    steps: int = 0,
    reward_config: RewardConfig | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Dispatch one stage of an arm's recipe.

    ``rl_plain`` masks the zoom action out of the sampling distribution, so
    its rollouts never call the tool; ``rl_agentic`` permits it.
    """
    if kind == STAGE_SFT:
        return run_sft(
            params,
            examples or [],
            vocabulary,
            epochs,
            batch_size,
            SFT_LEARNING_RATE if learning_rate is None else learning_rate,
            seed,
        )
    if kind in (STAGE_RL_PLAIN, STAGE_RL_AGENTIC):
        if spec is None or limits is None or config is None or reward_config is None:
            raise ConfigError(f"{kind} stage requires scene, rollout, train, reward configs")
        return run_rl(
            params,
            vocabulary,
            spec,
            pool_base,
            pool_size,
            limits,
            config,
            steps,
            seed,
            reward_config,
            allow_zoom=(kind == STAGE_RL_AGENTIC),
        )
    raise ConfigError(f"unknown stage kind {kind!r} (choose from {STAGE_KINDS})")
