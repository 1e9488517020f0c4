"""Synthetic glyph-grid scenes with lossy coarse views and a zoom tool.

A scene is a ``grid_side x grid_side`` grid of glyph identifiers (0 is
background) partitioned into ``tile_side x tile_side`` coarse tiles.  The
coarse observation summarizes each tile by its majority glyph, so answering
most questions requires zooming into the marked tile.  Question types:

* ``glyph-at-mark``  -- glyph class at the marked tile's central cell;
* ``count-class``    -- occurrences of a given class inside the marked tile;
* ``dominant-class`` -- most frequent non-background class in the marked tile
  (asked only on tiles whose coarse summary is background, so the coarse view
  never determines the answer);
* ``rule-apply``     -- decision-rule label for the glyph at the marked cell;
  requires domain knowledge shared with the text-QA forge.

For the first three types the coarse observation is provably insufficient:
any tile with at least 2x2 cells admits multiple fillings that share a
majority summary yet differ in the answer.  ``SceneSpec`` therefore requires
at least two cells per tile side.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import child_rng
from .rules import RuleBase, build_default_rulebase, class_token, rule_answer, rule_token

QTYPE_GLYPH_AT_MARK = "glyph-at-mark"
QTYPE_COUNT_CLASS = "count-class"
QTYPE_DOMINANT_CLASS = "dominant-class"
QTYPE_RULE_APPLY = "rule-apply"

QTYPES = (
    QTYPE_GLYPH_AT_MARK,
    QTYPE_COUNT_CLASS,
    QTYPE_DOMINANT_CLASS,
    QTYPE_RULE_APPLY,
)

# Question-marker tokens used in surface text.
Q_TOKEN = {
    QTYPE_GLYPH_AT_MARK: "q_glyph",
    QTYPE_COUNT_CLASS: "q_count",
    QTYPE_DOMINANT_CLASS: "q_dominant",
    QTYPE_RULE_APPLY: "q_rule",
}

TOKEN_INVALID_TILE = "invalid_tile"
TOKEN_NONE = "none"

_WHITESPACE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Trim, lowercase, and collapse internal whitespace."""
    return _WHITESPACE.sub(" ", text.strip().lower())


def zoom_token(tile_index: int) -> str:
    return f"zoom_{tile_index}"


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the scene distribution."""

    grid_side: int = 64
    tile_side: int = 8
    glyph_alphabet_size: int = 6
    target_density: float = 0.15
    rule_count: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_side < 1:
            raise ConfigError("scene spec invariant violated: grid_side must be positive")
        if self.tile_side < 1:
            raise ConfigError("scene spec invariant violated: tile_side must be positive")
        if self.grid_side % self.tile_side != 0:
            raise ConfigError(
                "scene spec invariant violated: tile_side must divide grid_side "
                f"({self.tile_side} does not divide {self.grid_side})"
            )
        if self.grid_side // self.tile_side < 2:
            raise ConfigError(
                "scene spec invariant violated: tiles need at least 2x2 cells so the "
                "coarse view is lossy (grid_side must be >= 2 * tile_side)"
            )
        if self.glyph_alphabet_size < 2:
            raise ConfigError(
                "scene spec invariant violated: glyph_alphabet_size must be >= 2"
            )
        if not 0.0 <= self.target_density <= 1.0:
            raise ConfigError(
                "scene spec invariant violated: target_density must lie in [0, 1]"
            )
        if self.rule_count < 1:
            raise ConfigError("scene spec invariant violated: rule_count must be positive")

    @property
    def tile_count(self) -> int:
        return self.tile_side * self.tile_side

    @property
    def cells_per_tile_side(self) -> int:
        return self.grid_side // self.tile_side

    @property
    def cells_per_tile(self) -> int:
        return self.cells_per_tile_side * self.cells_per_tile_side


@dataclass(frozen=True)
class Question:
    qtype: str
    surface_text: tuple[str, ...]
    answer_vocabulary: tuple[str, ...]
    rule_id: str | None = None


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    index: int
    cells: np.ndarray
    marked_region: int
    question: Question
    answer_key: str

    def __post_init__(self) -> None:
        self.cells.setflags(write=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.index == other.index
            and self.marked_region == other.marked_region
            and self.question == other.question
            and self.answer_key == other.answer_key
            and np.array_equal(self.cells, other.cells)
        )


_RULEBASE_CACHE: dict[tuple[int, int, int], RuleBase] = {}


def scene_rulebase(spec: SceneSpec) -> RuleBase:
    """Rulebase shared by this spec's scenes and the text-QA forge."""
    key = (spec.glyph_alphabet_size, spec.rule_count, spec.seed)
    if key not in _RULEBASE_CACHE:
        _RULEBASE_CACHE[key] = build_default_rulebase(
            spec.glyph_alphabet_size, spec.rule_count, spec.seed
        )
    return _RULEBASE_CACHE[key]


def _tile_block(cells: np.ndarray, spec: SceneSpec, tile_index: int) -> np.ndarray:
    side = spec.cells_per_tile_side
    row, col = divmod(tile_index, spec.tile_side)
    return cells[row * side : (row + 1) * side, col * side : (col + 1) * side]


def _tile_majority(block: np.ndarray, alphabet: int) -> int:
    counts = np.bincount(block.ravel(), minlength=alphabet)
    return int(np.argmax(counts))  # argmax takes the lowest id on ties


def _center_cell(block: np.ndarray) -> int:
    mid = block.shape[0] // 2
    return int(block[mid, mid])


def _number_vocabulary(spec: SceneSpec) -> tuple[str, ...]:
    return tuple(str(i) for i in range(spec.cells_per_tile + 1))


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """Deterministic scene for ``(spec.seed, index)``.

    The answer key is computed directly from the raw cells, and marked tiles
    are chosen so the coarse observation never determines the answer for the
    non-rule question types.
    """
    if index < 0:
        raise ConfigError("scene index must be non-negative")
    rng = child_rng(spec.seed, "scene", index)
    grid = spec.grid_side
    alphabet = spec.glyph_alphabet_size

    occupied = rng.random((grid, grid)) < spec.target_density
    classes = rng.integers(1, alphabet, size=(grid, grid))
    cells = np.where(occupied, classes, 0).astype(np.int16)

    summaries = [
        _tile_majority(_tile_block(cells, spec, t), alphabet) for t in range(spec.tile_count)
    ]
    background_tiles = [t for t, m in enumerate(summaries) if m == 0]

    if spec.target_density == 0.0:
        qtype = QTYPE_COUNT_CLASS
    else:
        feasible = [QTYPE_GLYPH_AT_MARK, QTYPE_COUNT_CLASS]
        if background_tiles:
            feasible.append(QTYPE_DOMINANT_CLASS)
        feasible.append(QTYPE_RULE_APPLY)
        qtype = feasible[int(rng.integers(len(feasible)))]

    class_tokens = tuple(class_token(c) for c in range(alphabet))
    rulebase = scene_rulebase(spec)

    if qtype == QTYPE_GLYPH_AT_MARK:
        mark = int(rng.integers(spec.tile_count))
        answer = class_tokens[_center_cell(_tile_block(cells, spec, mark))]
        question = Question(
            qtype=qtype,
            surface_text=(Q_TOKEN[qtype], zoom_token(mark)),
            answer_vocabulary=class_tokens,
        )
    elif qtype == QTYPE_COUNT_CLASS:
        target = 1 + int(rng.integers(alphabet - 1))
        mark = int(rng.integers(spec.tile_count))
        count = int(np.count_nonzero(_tile_block(cells, spec, mark) == target))
        answer = str(count)
        question = Question(
            qtype=qtype,
            surface_text=(Q_TOKEN[qtype], class_tokens[target], zoom_token(mark)),
            answer_vocabulary=_number_vocabulary(spec),
        )
    elif qtype == QTYPE_DOMINANT_CLASS:
        mark = background_tiles[int(rng.integers(len(background_tiles)))]
        block = _tile_block(cells, spec, mark)
        counts = np.bincount(block.ravel(), minlength=alphabet)[1:]
        answer = TOKEN_NONE if counts.max(initial=0) == 0 else class_tokens[1 + int(np.argmax(counts))]
        question = Question(
            qtype=qtype,
            surface_text=(Q_TOKEN[qtype], zoom_token(mark)),
            answer_vocabulary=(TOKEN_NONE,) + class_tokens[1:],
        )
    else:  # rule-apply
        rule = rule_token(int(rng.integers(spec.rule_count)))
        mark = int(rng.integers(spec.tile_count))
        center = _center_cell(_tile_block(cells, spec, mark))
        answer = rule_answer(rulebase, rule, center)
        question = Question(
            qtype=qtype,
            surface_text=(Q_TOKEN[qtype], rule, zoom_token(mark)),
            answer_vocabulary=rulebase.label_tokens,
            rule_id=rule,
        )

    return Scene(
        spec=spec,
        index=index,
        cells=cells,
        marked_region=mark,
        question=question,
        answer_key=normalize_answer(answer),
    )


def marked_center_class(scene: Scene) -> int:
    """Glyph class at the central cell of the marked tile."""
    return _center_cell(_tile_block(scene.cells, scene.spec, scene.marked_region))


def coarse_observation(scene: Scene) -> tuple[str, ...]:
    """One majority-glyph token per tile, row-major."""
    spec = scene.spec
    return tuple(
        class_token(_tile_majority(_tile_block(scene.cells, spec, t), spec.glyph_alphabet_size))
        for t in range(spec.tile_count)
    )


def zoom(scene: Scene, tile_index: int) -> tuple[str, ...]:
    """Full-resolution view of one tile; out-of-range stays in-band.

    An invalid tile index yields the single ``invalid_tile`` token rather than
    an exception, so the policy can observe and recover from its own bad zoom
    arguments.
    """
    if not 0 <= tile_index < scene.spec.tile_count:
        return (TOKEN_INVALID_TILE,)
    block = _tile_block(scene.cells, scene.spec, tile_index)
    return tuple(class_token(int(v)) for v in block.ravel())


def judge(scene: Scene, answer_text: str | None) -> int:
    """1 iff the normalized answer text equals the scene's answer key."""
    if answer_text is None:
        return 0
    return int(normalize_answer(answer_text) == scene.answer_key)
