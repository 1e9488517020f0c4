"""Shared decision-rule substrate.

The synthetic domain links glyph classes to answer labels through a small
fact base plus forward-chaining rules:

* every glyph class belongs to a kind: ``(class_c, kind_of, kind_j)``;
* every kind belongs to a group: ``(kind_j, group_of, group_g)``;
* each decision rule maps either kinds (2-premise chain) or groups
  (3-premise chain) to labels, e.g. ``(kind_j, rule_1, label_l)``;
* a chaining rule per decision rule concludes ``(class_c, rule_k, label_l)``.

The same rulebase drives rule-application scene questions and the text-QA
forge, so knowledge learned from text transfers to the visual task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .rng import child_rng

Triple = tuple[str, str, str]

RELATION_KIND_OF = "kind_of"
RELATION_GROUP_OF = "group_of"

# Prefixes of tokens that denote entities in question/answer text.  "alien_"
# is the namespace used for injected out-of-domain mentions.
ENTITY_PREFIXES = ("class_", "kind_", "group_", "label_", "alien_")


def is_entity_like(token: str) -> bool:
    return any(token.startswith(prefix) for prefix in ENTITY_PREFIXES)


def class_token(class_id: int) -> str:
    return f"class_{class_id}"


def rule_token(rule_id: int) -> str:
    return f"rule_{rule_id}"


@dataclass(frozen=True)
class Rule:
    """Horn-style rule: premises entail the conclusion.

    Patterns are triples of constants and variables; variables start with
    ``?`` and may appear in any slot.
    """

    rule_id: str
    premises: tuple[Triple, ...]
    conclusion: Triple

    def variables(self) -> set[str]:
        out = set()
        for pattern in self.premises + (self.conclusion,):
            out.update(term for term in pattern if term.startswith("?"))
        return out


@dataclass(frozen=True)
class RuleBase:
    """Entities, base facts, and rules of the synthetic domain."""

    rules: tuple[Rule, ...]
    entity_universe: frozenset[str]
    relation_universe: frozenset[Triple]
    label_tokens: tuple[str, ...] = ()
    kind_tokens: tuple[str, ...] = ()
    group_tokens: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        rule_ids = [rule.rule_id for rule in self.rules]
        if len(set(rule_ids)) != len(rule_ids):
            raise ConfigError("rulebase invariant violated: duplicate rule identifiers")
        for head, _, tail in self.relation_universe:
            for endpoint in (head, tail):
                if endpoint not in self.entity_universe:
                    raise ConfigError(
                        "rulebase invariant violated: triple endpoint outside "
                        f"entity universe: ({head!r} .. {tail!r})"
                    )
        closure, _ = forward_closure(self.relation_universe, self.rules)
        for rule in self.rules:
            if not _rule_fires(rule, closure):
                raise ConfigError(
                    "rulebase invariant violated: conclusion of rule "
                    f"{rule.rule_id!r} is not derivable by forward application"
                )


def _match_pattern(pattern: Triple, triple: Triple, binding: dict[str, str]) -> dict[str, str] | None:
    out = dict(binding)
    for term, value in zip(pattern, triple):
        if term.startswith("?"):
            bound = out.get(term)
            if bound is None:
                out[term] = value
            elif bound != value:
                return None
        elif term != value:
            return None
    return out


def _instantiate(pattern: Triple, binding: dict[str, str]) -> Triple:
    return tuple(binding.get(term, term) for term in pattern)  # type: ignore[return-value]


def _rule_matches(rule: Rule, triples: set[Triple]) -> list[Triple]:
    """All conclusions whose premises jointly match ``triples``."""
    bindings: list[dict[str, str]] = [{}]
    for pattern in rule.premises:
        step: list[dict[str, str]] = []
        for binding in bindings:
            for triple in triples:
                extended = _match_pattern(pattern, triple, binding)
                if extended is not None:
                    step.append(extended)
        bindings = step
        if not bindings:
            return []
    return [_instantiate(rule.conclusion, b) for b in bindings]


def _rule_fires(rule: Rule, closure: set[Triple]) -> bool:
    return any(conclusion in closure for conclusion in _rule_matches(rule, closure))


def forward_closure(
    base: frozenset[Triple] | set[Triple], rules: tuple[Rule, ...]
) -> tuple[set[Triple], dict[Triple, str]]:
    """Fixpoint of forward rule application.

    Returns the closed triple set and a provenance map: ``"base"`` for input
    facts, otherwise the identifier of the first rule that derived the fact.
    """
    closure = set(base)
    provenance: dict[Triple, str] = {triple: "base" for triple in sorted(closure)}
    changed = True
    while changed:
        changed = False
        for rule in rules:
            for conclusion in _rule_matches(rule, closure):
                if conclusion not in closure:
                    closure.add(conclusion)
                    provenance[conclusion] = rule.rule_id
                    changed = True
    return closure, provenance


@dataclass(frozen=True)
class DomainChain:
    """Base-fact chain that derives ``(class, rule) -> label``."""

    rule_id: str
    class_entity: str
    steps: tuple[Triple, ...] = field(default_factory=tuple)

    @property
    def label(self) -> str:
        return self.steps[-1][2]


# Entity-layer sizes of the default domain.  Four kinds and four labels keep
# multiple-choice questions well-posed (four distinct options).
DEFAULT_KIND_COUNT = 4
DEFAULT_GROUP_COUNT = 2
DEFAULT_LABEL_COUNT = 4


def build_default_rulebase(
    glyph_alphabet_size: int,
    rule_count: int,
    seed: int,
    kind_count: int = DEFAULT_KIND_COUNT,
    group_count: int = DEFAULT_GROUP_COUNT,
    label_count: int = DEFAULT_LABEL_COUNT,
) -> RuleBase:
    """Deterministic rulebase over the glyph alphabet.

    Odd-numbered decision rules chain through groups (3 premises), even ones
    stop at kinds (2 premises), so the forged corpus naturally mixes proof
    depths.
    """
    if glyph_alphabet_size < 2:
        raise ConfigError("rulebase requires glyph_alphabet_size >= 2")
    if rule_count < 1:
        raise ConfigError("rulebase requires rule_count >= 1")
    rng = child_rng(seed, "rulebase", glyph_alphabet_size, rule_count)

    classes = [class_token(c) for c in range(glyph_alphabet_size)]
    kinds = [f"kind_{j}" for j in range(kind_count)]
    groups = [f"group_{g}" for g in range(group_count)]
    labels = [f"label_{l}" for l in range(label_count)]

    triples: set[Triple] = set()
    for c, cls in enumerate(classes):
        kind = kinds[int(rng.integers(kind_count))]
        triples.add((cls, RELATION_KIND_OF, kind))
    for j, kind in enumerate(kinds):
        group = groups[int(rng.integers(group_count))]
        triples.add((kind, RELATION_GROUP_OF, group))

    rules: list[Rule] = []
    for k in range(rule_count):
        rel = rule_token(k)
        if k % 2 == 0:
            for kind in kinds:
                triples.add((kind, rel, labels[int(rng.integers(label_count))]))
            rules.append(
                Rule(
                    rule_id=rel,
                    premises=(("?x", RELATION_KIND_OF, "?m"), ("?m", rel, "?a")),
                    conclusion=("?x", rel, "?a"),
                )
            )
        else:
            for group in groups:
                triples.add((group, rel, labels[int(rng.integers(label_count))]))
            rules.append(
                Rule(
                    rule_id=rel,
                    premises=(
                        ("?x", RELATION_KIND_OF, "?m"),
                        ("?m", RELATION_GROUP_OF, "?g"),
                        ("?g", rel, "?a"),
                    ),
                    conclusion=("?x", rel, "?a"),
                )
            )

    entities = frozenset(classes + kinds + groups + labels)
    return RuleBase(
        rules=tuple(rules),
        entity_universe=entities,
        relation_universe=frozenset(triples),
        label_tokens=tuple(labels),
        kind_tokens=tuple(kinds),
        group_tokens=tuple(groups),
    )


def domain_chain(rulebase: RuleBase, rule_id: str, class_entity: str) -> DomainChain:
    """Base-fact proof chain for one (class, rule) pair."""
    facts = rulebase.relation_universe
    kind = _functional_tail(facts, class_entity, RELATION_KIND_OF)
    if kind is None:
        raise ConfigError(f"no kind fact for entity {class_entity!r}")
    direct = _functional_tail(facts, kind, rule_id)
    if direct is not None:
        steps = ((class_entity, RELATION_KIND_OF, kind), (kind, rule_id, direct))
        return DomainChain(rule_id=rule_id, class_entity=class_entity, steps=steps)
    group = _functional_tail(facts, kind, RELATION_GROUP_OF)
    if group is not None:
        via_group = _functional_tail(facts, group, rule_id)
        if via_group is not None:
            steps = (
                (class_entity, RELATION_KIND_OF, kind),
                (kind, RELATION_GROUP_OF, group),
                (group, rule_id, via_group),
            )
            return DomainChain(rule_id=rule_id, class_entity=class_entity, steps=steps)
    raise ConfigError(f"rule {rule_id!r} has no base facts reachable from {class_entity!r}")


def _functional_tail(facts: frozenset[Triple], head: str, relation: str) -> str | None:
    tails = sorted(t for h, r, t in facts if h == head and r == relation)
    return tails[0] if tails else None


def rule_answer(rulebase: RuleBase, rule_id: str, class_id: int) -> str:
    """Label assigned to a glyph class by a decision rule."""
    return domain_chain(rulebase, rule_id, class_token(class_id)).label
