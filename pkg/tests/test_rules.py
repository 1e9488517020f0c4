"""Horn-rule closure and the layered synthetic domain."""

from __future__ import annotations

import itertools

import pytest

from zoomlab.errors import ConfigError
from zoomlab.rules import (
    RELATION_GROUP_OF,
    RELATION_KIND_OF,
    Rule,
    RuleBase,
    build_default_rulebase,
    class_token,
    domain_chain,
    forward_closure,
    is_entity_like,
    rule_answer,
    rule_token,
)

TRANSITIVE = Rule(
    rule_id="reach",
    premises=(("?a", "edge", "?b"), ("?b", "edge", "?c")),
    conclusion=("?a", "edge", "?c"),
)


def _reachability_oracle(edges: set[tuple[str, str]]) -> set[tuple[str, str]]:
    """Path-existence by Floyd-Warshall, independent of the rule engine."""
    nodes = sorted({n for e in edges for n in e})
    reach = {(a, b): (a, b) in edges for a in nodes for b in nodes}
    for mid, src, dst in itertools.product(nodes, repeat=3):
        if reach[(src, mid)] and reach[(mid, dst)]:
            reach[(src, dst)] = True
    return {pair for pair, ok in reach.items() if ok}


def test_forward_closure_matches_reachability_oracle():
    edges = {("a", "b"), ("b", "c"), ("c", "d"), ("d", "b"), ("e", "a")}
    base = {(h, "edge", t) for h, t in edges}
    closure, provenance = forward_closure(base, (TRANSITIVE,))
    expected = {(h, "edge", t) for h, t in _reachability_oracle(edges)}
    assert closure == expected
    for triple in base:
        assert provenance[triple] == "base"
    for triple in closure - base:
        assert provenance[triple] == "reach"


def test_forward_closure_no_rules_is_identity():
    base = {("x", "r", "y")}
    closure, provenance = forward_closure(base, ())
    assert closure == base
    assert provenance == {("x", "r", "y"): "base"}


def test_rule_variable_join_must_be_consistent():
    # ?b must bind to the same entity in both premises.
    base = {("a", "edge", "b"), ("c", "edge", "d")}
    closure, _ = forward_closure(base, (TRANSITIVE,))
    assert closure == base


@pytest.mark.parametrize("alphabet,rule_count", [(2, 1), (5, 3), (6, 4), (3, 7)])
def test_default_rulebase_layers(alphabet, rule_count):
    rb = build_default_rulebase(alphabet, rule_count, seed=11)
    facts = rb.relation_universe
    for c in range(alphabet):
        kinds = [t for h, r, t in facts if h == class_token(c) and r == RELATION_KIND_OF]
        assert len(kinds) == 1
        assert kinds[0] in rb.kind_tokens
    for kind in rb.kind_tokens:
        groups = [t for h, r, t in facts if h == kind and r == RELATION_GROUP_OF]
        assert len(groups) == 1
        assert groups[0] in rb.group_tokens
    assert len(rb.rules) == rule_count


@pytest.mark.parametrize("alphabet,rule_count", [(5, 4), (2, 3)])
def test_domain_chain_depth_alternates(alphabet, rule_count):
    # Even rules resolve at the kind layer (2 steps), odd ones chain through
    # the group layer (3 steps).
    rb = build_default_rulebase(alphabet, rule_count, seed=3)
    for k in range(rule_count):
        chain = domain_chain(rb, rule_token(k), class_token(1))
        assert len(chain.steps) == 2 + (k % 2)
        assert chain.steps[0] == next(
            t for t in rb.relation_universe
            if t[0] == class_token(1) and t[1] == RELATION_KIND_OF
        )
        assert chain.label in rb.label_tokens


def test_domain_chain_steps_link_up():
    rb = build_default_rulebase(5, 3, seed=9)
    for k, c in itertools.product(range(3), range(5)):
        chain = domain_chain(rb, rule_token(k), class_token(c))
        for prev, nxt in zip(chain.steps, chain.steps[1:]):
            assert prev[2] == nxt[0]
        assert chain.steps[-1][1] == rule_token(k)
        assert chain.label == chain.steps[-1][2]


def test_rule_answer_agrees_with_closure():
    rb = build_default_rulebase(5, 3, seed=0)
    closure, _ = forward_closure(rb.relation_universe, rb.rules)
    for k, c in itertools.product(range(3), range(5)):
        answer = rule_answer(rb, rule_token(k), c)
        assert (class_token(c), rule_token(k), answer) in closure


def test_rule_answer_deterministic_across_builds():
    a = build_default_rulebase(5, 3, seed=21)
    b = build_default_rulebase(5, 3, seed=21)
    assert a == b
    assert [rule_answer(a, rule_token(k), 2) for k in range(3)] == [
        rule_answer(b, rule_token(k), 2) for k in range(3)
    ]


def test_rulebase_rejects_duplicate_rule_ids():
    with pytest.raises(ConfigError):
        RuleBase(
            rules=(TRANSITIVE, TRANSITIVE),
            entity_universe=frozenset({"a", "b", "c"}),
            relation_universe=frozenset({("a", "edge", "b"), ("b", "edge", "c")}),
        )


def test_rulebase_rejects_foreign_endpoints():
    with pytest.raises(ConfigError):
        RuleBase(
            rules=(),
            entity_universe=frozenset({"a"}),
            relation_universe=frozenset({("a", "edge", "ghost")}),
        )


def test_rulebase_rejects_rule_that_never_fires():
    dormant = Rule(
        rule_id="dormant",
        premises=(("?a", "missing", "?b"),),
        conclusion=("?a", "edge", "?b"),
    )
    with pytest.raises(ConfigError):
        RuleBase(
            rules=(dormant,),
            entity_universe=frozenset({"a", "b"}),
            relation_universe=frozenset({("a", "edge", "b")}),
        )


def test_build_rejects_degenerate_sizes():
    with pytest.raises(ConfigError):
        build_default_rulebase(1, 3, seed=0)
    with pytest.raises(ConfigError):
        build_default_rulebase(5, 0, seed=0)


def test_entity_like_prefixes():
    assert is_entity_like("class_3")
    assert is_entity_like("label_0")
    assert not is_entity_like("edge")
    assert not is_entity_like("answer_open")
