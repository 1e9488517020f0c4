"""Token-level training examples.

Two sources feed supervised fine-tuning:

* ``text_qa`` -- forged corpus records; the prompt is the question, the
  model target is the chain-of-thought steps (when enabled) followed by the
  answer span.  No observation tokens ever appear.
* ``vqa_demo`` -- scripted expert demonstrations on scenes: zoom into the
  marked tile, then answer.  Rule-application demos restate the decision
  chain between the zoom result and the answer span, binding the visual
  evidence to the rule knowledge that text QA teaches.

Both sources funnel into the same right-aligned context windows, so the
decisive token patterns (e.g. ``... kind_j rule_k -> label``) occupy the
same context slots during text SFT and during scene rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rules import RuleBase, class_token, domain_chain
from .scenegen import (
    QTYPE_RULE_APPLY,
    Scene,
    coarse_observation,
    marked_center_class,
    zoom,
    zoom_token,
)
from .vocab import (
    ROLE_MODEL,
    ROLE_OBSERVATION,
    ROLE_PROMPT,
    TOKEN_ANSWER_CLOSE,
    TOKEN_ANSWER_OPEN,
    TOKEN_END,
    Vocabulary,
)

SOURCE_TEXT_QA = "text_qa"
SOURCE_VQA_DEMO = "vqa_demo"


@dataclass(frozen=True, eq=False)
class SftExample:
    token_ids: np.ndarray
    roles: np.ndarray
    source: str

    def __post_init__(self) -> None:
        self.token_ids.setflags(write=False)
        self.roles.setflags(write=False)
        if len(self.token_ids) != len(self.roles):
            raise ConfigError("sft example invariant violated: ids/roles length mismatch")
        if not np.any(self.roles == ROLE_MODEL):
            raise ConfigError("sft example invariant violated: needs at least one model token")
        if self.source == SOURCE_TEXT_QA and np.any(self.roles == ROLE_OBSERVATION):
            raise ConfigError(
                "sft example invariant violated: text_qa examples cannot contain "
                "observation tokens"
            )


def _example(segments: list[tuple[list[str], int]], vocabulary: Vocabulary, source: str) -> SftExample:
    ids: list[int] = []
    roles: list[int] = []
    for tokens, role in segments:
        ids.extend(vocabulary.encode(tokens))
        roles.extend([role] * len(tokens))
    return SftExample(
        token_ids=np.asarray(ids, dtype=np.int32),
        roles=np.asarray(roles, dtype=np.int8),
        source=source,
    )


def answer_span_tokens(answer: str) -> list[str]:
    return [TOKEN_ANSWER_OPEN, *answer.split(), TOKEN_ANSWER_CLOSE, TOKEN_END]


def encode_text_record(record: dict, vocabulary: Vocabulary) -> SftExample:
    """Corpus record -> SFT example (prompt question, model answer)."""
    model_tokens: list[str] = []
    if record.get("cot_enabled", True):
        for step in record["cot_steps"]:
            model_tokens.extend(step.split())
    model_tokens.extend(answer_span_tokens(record["answer"]))
    return _example(
        [(list(record["question"]), ROLE_PROMPT), (model_tokens, ROLE_MODEL)],
        vocabulary,
        SOURCE_TEXT_QA,
    )


def build_vqa_demo(
    scene: Scene,
    vocabulary: Vocabulary,
    rulebase: RuleBase,
    chain_in_demo: bool = True,
) -> SftExample:
    """Scripted expert demonstration: zoom at the mark, then answer.

    For rule-application questions the expert restates the decision chain
    after seeing the tile (when ``chain_in_demo``), mirroring the layout of
    forged text answers.
    """
    prompt = list(scene.question.surface_text) + list(coarse_observation(scene))
    segments: list[tuple[list[str], int]] = [(prompt, ROLE_PROMPT)]
    segments.append(([zoom_token(scene.marked_region)], ROLE_MODEL))
    segments.append((list(zoom(scene, scene.marked_region)), ROLE_OBSERVATION))

    model_tail: list[str] = []
    if scene.question.qtype == QTYPE_RULE_APPLY and chain_in_demo:
        chain = domain_chain(
            rulebase, scene.question.rule_id, class_token(marked_center_class(scene))
        )
        for step in chain.steps:
            model_tail.extend(step)
    model_tail.extend(answer_span_tokens(scene.answer_key))
    segments.append((model_tail, ROLE_MODEL))
    return _example(segments, vocabulary, SOURCE_VQA_DEMO)
