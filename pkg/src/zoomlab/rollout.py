"""Tool-augmented episodes: interleaved model tokens and observations.

An episode starts from a prompt (question tokens plus the coarse scene
observation), then alternates model-sampled tokens with in-band tool
observations.  Emitting a ``zoom_i`` token triggers the zoom tool: the tile's
cells are appended as observation tokens (or ``invalid_tile`` /
``budget_exceeded``).  Observation tokens condition the policy but carry no
learning signal; only model-role tokens have recorded log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scenegen import Scene, coarse_observation, zoom
from .policy import PolicyParams, _forward_rows, forward, sample
from .vocab import ROLE_MODEL, ROLE_OBSERVATION, ROLE_PROMPT, ROLE_NAMES, Vocabulary


@dataclass(frozen=True)
class RolloutLimits:
    tool_budget: int = 4
    max_model_tokens: int = 64
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.tool_budget < 0:
            raise ConfigError("rollout limits invariant violated: tool_budget must be >= 0")
        if self.max_model_tokens < 3:
            raise ConfigError(
                "rollout limits invariant violated: max_model_tokens must be >= 3 "
                "(an answer span needs open, content, close)"
            )
        if self.temperature < 0:
            raise ConfigError("rollout limits invariant violated: temperature must be >= 0")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One finished episode.

    ``token_ids``/``roles`` cover the whole interleaved sequence; ``logprobs``
    has one entry per model-role token, in order.
    """

    token_ids: np.ndarray
    roles: np.ndarray
    logprobs: np.ndarray
    tool_calls: int
    zoom_successes: int
    parsed_answer: str | None
    format_ok: bool
    truncated: bool

    def __post_init__(self) -> None:
        for array in (self.token_ids, self.roles, self.logprobs):
            array.setflags(write=False)
        if int(np.sum(self.roles == ROLE_MODEL)) != len(self.logprobs):
            raise ConfigError(
                "trajectory invariant violated: one logprob per model-role token"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.roles, other.roles)
            and np.array_equal(self.logprobs, other.logprobs)
            and self.tool_calls == other.tool_calls
            and self.zoom_successes == other.zoom_successes
            and self.parsed_answer == other.parsed_answer
            and self.format_ok == other.format_ok
            and self.truncated == other.truncated
        )

    @property
    def model_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == ROLE_MODEL)


def context_at(token_ids: np.ndarray, position: int, window: int, pad_id: int) -> np.ndarray:
    """Last ``window`` ids before ``position``, left-padded with ``pad_id``."""
    start = max(0, position - window)
    tail = token_ids[start:position]
    if len(tail) == window:
        return np.asarray(tail, dtype=np.int64)
    context = np.full(window, pad_id, dtype=np.int64)
    if len(tail):
        context[window - len(tail):] = tail
    return context


def parse_answer(traj: Trajectory, vocabulary: Vocabulary) -> tuple[str | None, bool]:
    """Extract the answer span and its well-formedness flag.

    Well-formed means: exactly one ``answer_open`` and one ``answer_close``
    in the whole sequence, open before close, a non-empty span, and no zoom
    token inside the span.  Malformed sequences still yield the first
    complete span (best effort) with the flag false.
    """
    ids = list(map(int, traj.token_ids))
    open_id, close_id = vocabulary.answer_open_id, vocabulary.answer_close_id
    opens = [i for i, t in enumerate(ids) if t == open_id]
    closes = [i for i, t in enumerate(ids) if t == close_id]

    span: list[int] | None = None
    for start in opens:
        ends = [j for j in closes if j > start]
        if ends:
            span = ids[start + 1 : ends[0]]
            break
    if span is None:
        return None, False

    zoom_ids = set(vocabulary.zoom_ids)
    well_formed = (
        len(opens) == 1
        and len(closes) == 1
        and len(span) > 0
        and not any(t in zoom_ids for t in span)
    )
    answer = vocabulary.decode_text(span) if span else None
    return answer, well_formed


def loss_mask(traj: Trajectory) -> np.ndarray:
    """1 for model-role tokens, 0 for prompt and observation tokens."""
    return (traj.roles == ROLE_MODEL).astype(np.int8)


def finalize_trajectory(
    token_ids: list[int],
    roles: list[int],
    logprobs: list[float],
    vocabulary: Vocabulary,
    tool_calls: int,
    zoom_successes: int,
    truncated: bool,
) -> Trajectory:
    """Freeze arrays and attach the parsed answer."""
    draft = Trajectory(
        token_ids=np.asarray(token_ids, dtype=np.int32),
        roles=np.asarray(roles, dtype=np.int8),
        logprobs=np.asarray(logprobs, dtype=np.float64),
        tool_calls=tool_calls,
        zoom_successes=zoom_successes,
        parsed_answer=None,
        format_ok=False,
        truncated=truncated,
    )
    answer, ok = parse_answer(draft, vocabulary)
    return Trajectory(
        token_ids=draft.token_ids,
        roles=draft.roles,
        logprobs=draft.logprobs,
        tool_calls=tool_calls,
        zoom_successes=zoom_successes,
        parsed_answer=answer,
        format_ok=ok,
        truncated=truncated,
    )


def run_episode(
    params: PolicyParams,
    vocabulary: Vocabulary,
    scene: Scene,
    limits: RolloutLimits,
    rng: np.random.Generator,
    allow_zoom: bool = True,
) -> Trajectory:
    """Sample one episode; deterministic given the rng state.

    ``allow_zoom=False`` masks zoom logits to -inf before sampling (the
    tool-less control condition); recorded log-probabilities always come from
    the unmasked distribution so teacher-forced replay reproduces them.
    """
    window = params.dims.context_window
    pad_id = vocabulary.pad_id
    zoom_ids = vocabulary.zoom_ids
    zoom_lo, zoom_hi = zoom_ids[0], zoom_ids[-1]

    token_ids: list[int] = []
    roles: list[int] = []
    for tok in scene.question.surface_text:
        token_ids.append(vocabulary.id_of(tok))
        roles.append(ROLE_PROMPT)
    for tok in coarse_observation(scene):
        token_ids.append(vocabulary.id_of(tok))
        roles.append(ROLE_PROMPT)

    logprobs: list[float] = []
    tool_calls = 0
    zoom_successes = 0
    truncated = False
    model_tokens = 0

    while True:
        if model_tokens >= limits.max_model_tokens:
            truncated = True
            break
        ids_arr = np.asarray(token_ids, dtype=np.int64)
        context = context_at(ids_arr, len(token_ids), window, pad_id)
        probs = forward(params, context)
        if allow_zoom:
            sample_probs = probs
        else:
            sample_probs = probs.copy()
            sample_probs[zoom_lo : zoom_hi + 1] = 0.0
            sample_probs /= sample_probs.sum()
        token = sample(sample_probs, limits.temperature, rng)
        token_ids.append(token)
        roles.append(ROLE_MODEL)
        logprobs.append(float(np.log(probs[token])))
        model_tokens += 1

        if token == vocabulary.end_id or token == vocabulary.answer_close_id:
            break
        if zoom_lo <= token <= zoom_hi:
            tool_calls += 1
            if zoom_successes >= limits.tool_budget:
                token_ids.append(vocabulary.budget_exceeded_id)
                roles.append(ROLE_OBSERVATION)
            else:
                observed = zoom(scene, token - zoom_lo)
                obs_ids = vocabulary.encode(observed)
                if obs_ids == [vocabulary.invalid_tile_id]:
                    token_ids.append(vocabulary.invalid_tile_id)
                    roles.append(ROLE_OBSERVATION)
                else:
                    token_ids.extend(obs_ids)
                    roles.extend([ROLE_OBSERVATION] * len(obs_ids))
                    zoom_successes += 1

    return finalize_trajectory(
        token_ids, roles, logprobs, vocabulary, tool_calls, zoom_successes, truncated
    )


def sample_rows(
    probs_rows: np.ndarray,
    temperature: float,
    rngs: list[np.random.Generator],
) -> np.ndarray:
    """Draw one token per row; same semantics as ``sample`` row-wise.

    Row ``r`` draws from ``rngs[r]``; rows are consumed in ascending order,
    so a generator shared by several rows yields a deterministic sequence.
    """
    if temperature < 0:
        raise ConfigError("temperature must be non-negative")
    p = np.asarray(probs_rows, dtype=np.float64)
    if temperature == 0.0:
        return np.argmax(p, axis=1)
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            z = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        z /= temperature
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
    cumulative = np.cumsum(p, axis=1)
    out = np.empty(len(p), dtype=np.int64)
    top = p.shape[1] - 1
    for r in range(len(p)):
        draw = rngs[r].random() * cumulative[r, -1]
        out[r] = min(np.searchsorted(cumulative[r], draw, side="right"), top)
    return out


def prompt_ids(scene: Scene, vocabulary: Vocabulary) -> list[int]:
    """Episode prompt: question surface tokens plus the coarse observation."""
    ids = [vocabulary.id_of(tok) for tok in scene.question.surface_text]
    ids += [vocabulary.id_of(tok) for tok in coarse_observation(scene)]
    return ids


def run_episode_batch(
    params: PolicyParams,
    vocabulary: Vocabulary,
    scenes: list[Scene],
    rngs: list[np.random.Generator],
    limits: RolloutLimits,
    allow_zoom: bool = True,
) -> list[Trajectory]:
    """Sample one episode per (scene, rng) slot, all slots in lockstep.

    Episode semantics match ``run_episode``; running the batch turns the
    per-token forward passes into one matrix product per round.  Each round
    draws tokens for the still-active slots in ascending slot order, each
    from its own generator (slots may share a generator object).
    Teacher-forced replay with the same round structure (see
    train.group_logprobs) reproduces the recorded log-probabilities bit for
    bit.
    """
    if len(scenes) != len(rngs):
        raise ConfigError("run_episode_batch needs one rng per scene slot")
    count = len(scenes)
    window = params.dims.context_window
    pad_id = vocabulary.pad_id
    zoom_ids = vocabulary.zoom_ids
    zoom_lo, zoom_hi = zoom_ids[0], zoom_ids[-1]

    token_ids: list[list[int]] = []
    roles: list[list[int]] = []
    context = np.full((count, window), pad_id, dtype=np.int64)
    prompt_cache: dict[int, list[int]] = {}
    for i, scene in enumerate(scenes):
        prompt = prompt_cache.get(id(scene))
        if prompt is None:
            prompt = prompt_ids(scene, vocabulary)
            prompt_cache[id(scene)] = prompt
        token_ids.append(list(prompt))
        roles.append([ROLE_PROMPT] * len(prompt))
        tail = prompt[-window:]
        context[i, window - len(tail):] = tail

    logprobs: list[list[float]] = [[] for _ in range(count)]
    tool_calls = [0] * count
    zoom_successes = [0] * count
    truncated = [False] * count
    active = list(range(count))

    for _round in range(limits.max_model_tokens):
        if not active:
            break
        rows = np.asarray(active)
        probs = _forward_rows(params, context[rows])[2]
        if allow_zoom:
            sample_probs = probs
        else:
            sample_probs = probs.copy()
            sample_probs[:, zoom_lo : zoom_hi + 1] = 0.0
        tokens = sample_rows(sample_probs, limits.temperature, [rngs[i] for i in active])

        context[rows, :-1] = context[rows, 1:]
        context[rows, -1] = tokens
        still_active = []
        for r, i in enumerate(active):
            token = int(tokens[r])
            token_ids[i].append(token)
            roles[i].append(ROLE_MODEL)
            logprobs[i].append(float(np.log(probs[r, token])))
            if token == vocabulary.end_id or token == vocabulary.answer_close_id:
                continue
            if zoom_lo <= token <= zoom_hi:
                tool_calls[i] += 1
                if zoom_successes[i] >= limits.tool_budget:
                    obs_ids = [vocabulary.budget_exceeded_id]
                else:
                    observed = zoom(scenes[i], token - zoom_lo)
                    obs_ids = vocabulary.encode(observed)
                    if obs_ids != [vocabulary.invalid_tile_id]:
                        zoom_successes[i] += 1
                token_ids[i].extend(obs_ids)
                roles[i].extend([ROLE_OBSERVATION] * len(obs_ids))
                keep = window - min(len(obs_ids), window)
                context[i, :keep] = context[i, window - keep:]
                context[i, keep:] = obs_ids[-(window - keep):] if keep < window else obs_ids[-window:]
            still_active.append(i)
        active = still_active
    for i in active:
        truncated[i] = True

    return [
        finalize_trajectory(
            token_ids[i],
            roles[i],
            logprobs[i],
            vocabulary,
            tool_calls[i],
            zoom_successes[i],
            truncated[i],
        )
        for i in range(count)
    ]


def run_episode_group(
    params: PolicyParams,
    vocabulary: Vocabulary,
    scene: Scene,
    limits: RolloutLimits,
    rng: np.random.Generator,
    group_size: int,
    allow_zoom: bool = True,
) -> list[Trajectory]:
    """Sample ``group_size`` lockstep episodes of one scene (shared rng)."""
    return run_episode_batch(
        params, vocabulary, [scene] * group_size, [rng] * group_size, limits, allow_zoom
    )


def trajectory_to_json(traj: Trajectory, vocabulary: Vocabulary) -> dict:
    """Human-inspectable dict for debug logs (format not stability-guaranteed)."""
    return {
        "tokens": [vocabulary.decode(int(t)) for t in traj.token_ids],
        "roles": [ROLE_NAMES[int(r)] for r in traj.roles],
        "logprobs": [float(lp) for lp in traj.logprobs],
        "tool_calls": traj.tool_calls,
        "zoom_successes": traj.zoom_successes,
        "parsed_answer": traj.parsed_answer,
        "format_ok": traj.format_ok,
        "truncated": traj.truncated,
    }
