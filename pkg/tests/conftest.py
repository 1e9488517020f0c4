"""Shared fixtures: small scene worlds and a hand-built lookup policy.

The lookup policy maps "last context token -> next token" through exactly
the production MLP shapes (identity embedding, a selector block in the
first layer, a saturated table in the second), so rollout and evaluation
tests can exercise the real sampling path with fully predictable output.
"""

from __future__ import annotations

import numpy as np
import pytest

from zoomlab.policy import PolicyDims, PolicyParams
from zoomlab.scenegen import SceneSpec, scene_rulebase
from zoomlab.vocab import Vocabulary, build_vocabulary

# Logit assigned to the table's chosen token; e**-TABLE_LOGIT is far below
# any samplable probability, so draws are deterministic in practice.
TABLE_LOGIT = 60.0


@pytest.fixture(scope="session")
def small_spec() -> SceneSpec:
    return SceneSpec(
        grid_side=4,
        tile_side=2,
        glyph_alphabet_size=5,
        target_density=0.45,
        rule_count=3,
        seed=0,
    )


@pytest.fixture(scope="session")
def small_rulebase(small_spec):
    return scene_rulebase(small_spec)


@pytest.fixture(scope="session")
def small_vocab(small_spec, small_rulebase) -> Vocabulary:
    return build_vocabulary(small_spec, small_rulebase)


@pytest.fixture(scope="session")
def small_dims(small_vocab) -> PolicyDims:
    return PolicyDims(
        vocab_size=len(small_vocab), embed_dim=8, hidden_dim=16, context_window=8
    )


@pytest.fixture(scope="session")
def empty_spec() -> SceneSpec:
    """All-background scenes: every question is count-class with answer "0"."""
    return SceneSpec(
        grid_side=4,
        tile_side=2,
        glyph_alphabet_size=5,
        target_density=0.0,
        rule_count=3,
        seed=0,
    )


@pytest.fixture(scope="session")
def empty_vocab(empty_spec) -> Vocabulary:
    return build_vocabulary(empty_spec, scene_rulebase(empty_spec))


def lookup_policy(
    vocabulary: Vocabulary,
    table: dict[str, str],
    default: str = "end",
    context_window: int = 8,
) -> PolicyParams:
    """Policy whose next token is a pure function of the last context token.

    ``table`` maps token strings to token strings; unlisted tokens fall back
    to ``default``.  The construction uses the ordinary forward pass: a
    one-hot embedding, a first layer that reads only the final window slot,
    and a second layer holding the transition table at saturation scale.
    """
    size = len(vocabulary)
    dims = PolicyDims(
        vocab_size=size, embed_dim=size, hidden_dim=size, context_window=context_window
    )
    embedding = np.eye(size)
    w1 = np.zeros((dims.input_dim, size))
    last_slot = (context_window - 1) * size
    for t in range(size):
        w1[last_slot + t, t] = 4.0
    w2 = np.zeros((size, size))
    gain = TABLE_LOGIT / np.tanh(4.0)
    default_id = vocabulary.id_of(default)
    for t in range(size):
        w2[t, default_id] = gain
    for src, dst in table.items():
        row = vocabulary.id_of(src)
        w2[row, :] = 0.0
        w2[row, vocabulary.id_of(dst)] = gain
    return PolicyParams(
        dims=dims,
        embedding=embedding,
        w1=w1,
        b1=np.zeros(size),
        w2=w2,
        b2=np.zeros(size),
    )


def perfect_empty_scene_policy(vocabulary: Vocabulary) -> PolicyParams:
    """Always-correct answers on all-background scenes (answer key "0")."""
    return lookup_policy(
        vocabulary,
        {
            "class_0": "answer_open",
            "answer_open": "0",
            "0": "answer_close",
            "answer_close": "end",
        },
    )


@pytest.fixture(scope="session")
def empty_scene_policy(empty_vocab) -> PolicyParams:
    return perfect_empty_scene_policy(empty_vocab)
