"""Token inventory shared by scenes, forged text QA, and the policy.

Token ids are dense from 0 and the ordering is a deterministic function of
the scene spec and rulebase, so every component of an experiment agrees on
the same ids.  Action tokens (``zoom_*``) are disjoint from every answer
vocabulary; zoom tokens also appear in question prompts to communicate the
marked tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .rules import RuleBase
from .scenegen import SceneSpec, TOKEN_INVALID_TILE, TOKEN_NONE, zoom_token

TOKEN_PAD = "pad"
TOKEN_ANSWER_OPEN = "answer_open"
TOKEN_ANSWER_CLOSE = "answer_close"
TOKEN_END = "end"
TOKEN_BUDGET_EXCEEDED = "budget_exceeded"

# Text-QA question markers and option machinery.
TOKEN_Q_MCQ = "q_mcq"
TOKEN_Q_FILL = "q_fill"
TOKEN_Q_TF = "q_tf"
TOKEN_Q_FREE = "q_free"
OPTION_MARKERS = ("opt_a", "opt_b", "opt_c", "opt_d")
OPTION_LETTERS = ("a", "b", "c", "d")
TOKEN_TRUE = "true"
TOKEN_FALSE = "false"

ROLE_PROMPT = 0
ROLE_MODEL = 1
ROLE_OBSERVATION = 2

ROLE_NAMES = {ROLE_PROMPT: "prompt", ROLE_MODEL: "model", ROLE_OBSERVATION: "observation"}


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token table with dense ids."""

    tokens: tuple[str, ...]
    zoom_ids: tuple[int, ...]
    _index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary invariant violated: duplicate token strings")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ConfigError(f"token not in vocabulary: {token!r}") from None

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]

    def decode_text(self, token_ids) -> str:
        return " ".join(self.tokens[i] for i in token_ids)

    @property
    def pad_id(self) -> int:
        return self._index[TOKEN_PAD]

    @property
    def answer_open_id(self) -> int:
        return self._index[TOKEN_ANSWER_OPEN]

    @property
    def answer_close_id(self) -> int:
        return self._index[TOKEN_ANSWER_CLOSE]

    @property
    def end_id(self) -> int:
        return self._index[TOKEN_END]

    @property
    def budget_exceeded_id(self) -> int:
        return self._index[TOKEN_BUDGET_EXCEEDED]

    @property
    def invalid_tile_id(self) -> int:
        return self._index[TOKEN_INVALID_TILE]

    def zoom_tile(self, token_id: int) -> int | None:
        """Tile index if the token is a zoom action, else None."""
        token = self.tokens[token_id]
        if token.startswith("zoom_"):
            return int(token.split("_", 1)[1])
        return None


def build_vocabulary(spec: SceneSpec, rulebase: RuleBase) -> Vocabulary:
    """Deterministic token ordering for one (spec, rulebase) pair."""
    tokens: list[str] = [
        TOKEN_PAD,
        TOKEN_ANSWER_OPEN,
        TOKEN_ANSWER_CLOSE,
        TOKEN_END,
        TOKEN_INVALID_TILE,
        TOKEN_BUDGET_EXCEEDED,
        "q_glyph",
        "q_count",
        "q_dominant",
        "q_rule",
        TOKEN_Q_MCQ,
        TOKEN_Q_FILL,
        TOKEN_Q_TF,
        TOKEN_Q_FREE,
        "kind_of",
        "group_of",
        TOKEN_TRUE,
        TOKEN_FALSE,
        TOKEN_NONE,
        *OPTION_MARKERS,
        *OPTION_LETTERS,
    ]
    tokens.extend(f"class_{c}" for c in range(spec.glyph_alphabet_size))
    tokens.extend(sorted(rulebase.kind_tokens))
    tokens.extend(sorted(rulebase.group_tokens))
    tokens.extend(sorted(rulebase.label_tokens))
    tokens.extend(f"rule_{k}" for k in range(spec.rule_count))
    tokens.extend(str(i) for i in range(spec.cells_per_tile + 1))
    zoom_start = len(tokens)
    tokens.extend(zoom_token(t) for t in range(spec.tile_count))
    zoom_ids = tuple(range(zoom_start, zoom_start + spec.tile_count))
    return Vocabulary(tokens=tuple(tokens), zoom_ids=zoom_ids)
