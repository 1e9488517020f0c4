"""Knowledge-graph-verified text-QA forging.

Candidates are templated from the rulebase's fact chains (question, chain-of
-thought steps, answer), optionally corrupted with labeled noise, then
screened against the knowledge graph:

* two-tier evidence retrieval -- tier 1 collects triples within ``hop_bound``
  of the answer's entities, tier 2 collects the neighborhoods of every entity
  mentioned in the question;
* a relevance score (share of mentioned entities found in the graph) below
  the threshold, or empty evidence, rejects the candidate as off-domain;
* chain-of-thought steps that assert a triple contradicting the graph earn
  one revision; a candidate still contradicting after its single revision is
  rejected.

Accepted candidates become corpus records whose answer text renders the
steps as ``Step i: ...`` sentences followed by
``Therefore, the final answer is: <answer>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import ConfigError, ContractError
from .rng import child_rng
from .rules import (
    RELATION_GROUP_OF,
    RELATION_KIND_OF,
    Rule,
    RuleBase,
    Triple,
    forward_closure,
    is_entity_like,
)
from .vocab import (
    OPTION_LETTERS,
    OPTION_MARKERS,
    TOKEN_FALSE,
    TOKEN_Q_FILL,
    TOKEN_Q_FREE,
    TOKEN_Q_MCQ,
    TOKEN_Q_TF,
    TOKEN_TRUE,
)

QTYPE_MCQ = "mcq"
QTYPE_FILL = "fill"
QTYPE_TF = "tf"
QTYPE_FREE = "free"
QTYPES = (QTYPE_MCQ, QTYPE_FILL, QTYPE_TF, QTYPE_FREE)

Q_MARKER = {
    QTYPE_MCQ: TOKEN_Q_MCQ,
    QTYPE_FILL: TOKEN_Q_FILL,
    QTYPE_TF: TOKEN_Q_TF,
    QTYPE_FREE: TOKEN_Q_FREE,
}

CORRUPTION_ENTITY_SWAP = "entity-swap"
CORRUPTION_RELATION_CONTRADICTION = "relation-contradiction"
CORRUPTION_OFF_DOMAIN = "off-domain"
CORRUPTIONS = (
    CORRUPTION_ENTITY_SWAP,
    CORRUPTION_RELATION_CONTRADICTION,
    CORRUPTION_OFF_DOMAIN,
)

VERDICT_ACCEPT = "accept"
VERDICT_REVISE = "revise"
VERDICT_REJECT = "reject"

CAUSE_OFF_DOMAIN = "off_domain"
CAUSE_UNSUPPORTED_ANSWER = "unsupported_answer"
CAUSE_CONTRADICTION = "contradiction"
CAUSE_CONTRADICTION_REPEAT = "contradiction_repeat"

FINAL_SENTENCE_PREFIX = "Therefore, the final answer is:"


@dataclass(frozen=True)
class KnowledgeGraph:
    """Closure of a rulebase's facts under its rules, with provenance."""

    entities: frozenset[str]
    relations: frozenset[Triple]
    provenance: dict[Triple, str]
    hop_bound: int = 2
    _adjacency: dict[str, set[str]] = field(default_factory=dict, compare=False, repr=False)
    _incident: dict[str, set[Triple]] = field(default_factory=dict, compare=False, repr=False)
    _head_rel: dict[tuple[str, str], set[str]] = field(
        default_factory=dict, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.hop_bound < 1:
            raise ConfigError("knowledge graph invariant violated: hop_bound must be >= 1")
        adjacency: dict[str, set[str]] = {}
        incident: dict[str, set[Triple]] = {}
        head_rel: dict[tuple[str, str], set[str]] = {}
        for triple in self.relations:
            head, rel, tail = triple
            for endpoint in (head, tail):
                if endpoint not in self.entities:
                    raise ConfigError(
                        f"knowledge graph construction error: triple {triple!r} "
                        "references an entity outside the entity universe"
                    )
            adjacency.setdefault(head, set()).add(tail)
            adjacency.setdefault(tail, set()).add(head)
            incident.setdefault(head, set()).add(triple)
            incident.setdefault(tail, set()).add(triple)
            head_rel.setdefault((head, rel), set()).add(tail)
        object.__setattr__(self, "_adjacency", adjacency)
        object.__setattr__(self, "_incident", incident)
        object.__setattr__(self, "_head_rel", head_rel)

    def neighborhood_triples(self, entity: str, hops: int) -> set[Triple]:
        """Triples with an endpoint within ``hops - 1`` edges of ``entity``."""
        if entity not in self.entities:
            return set()
        frontier = {entity}
        reached = {entity}
        for _ in range(max(hops - 1, 0)):
            frontier = {
                n for e in frontier for n in self._adjacency.get(e, ()) if n not in reached
            }
            reached |= frontier
        out: set[Triple] = set()
        for e in reached:
            out |= self._incident.get(e, set())
        return out

    def contradicts(self, triple: Triple) -> bool:
        """True iff the graph holds a different tail for the triple's head-relation."""
        head, rel, tail = triple
        if triple in self.relations:
            return False
        others = self._head_rel.get((head, rel))
        return bool(others)


def build_knowledge_graph(rulebase: RuleBase, hop_bound: int = 2) -> KnowledgeGraph:
    """Forward-close the rulebase's facts; provenance marks derived triples."""
    closure, provenance = forward_closure(rulebase.relation_universe, rulebase.rules)
    return KnowledgeGraph(
        entities=rulebase.entity_universe,
        relations=frozenset(closure),
        provenance=provenance,
        hop_bound=hop_bound,
    )


@dataclass(frozen=True)
class ForgeConfig:
    corpus_size: int = 1000
    type_ratio: tuple[float, float, float, float] = (0.24, 0.07, 0.04, 0.65)
    relevance_threshold: float = 0.5
    corruption_rate: float = 0.0
    cot_enabled: bool = True
    cot_steps_mean: float = 2.6
    hop_bound: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.corpus_size < 0:
            raise ConfigError("forge config invariant violated: corpus_size must be >= 0")
        if len(self.type_ratio) != 4 or any(r < 0 for r in self.type_ratio):
            raise ConfigError(
                "forge config invariant violated: type_ratio needs four non-negative entries"
            )
        if abs(sum(self.type_ratio) - 1.0) > 1e-9:
            raise ConfigError(
                "forge config invariant violated: type_ratio must sum to 1 within 1e-9"
            )
        if not 0.0 <= self.relevance_threshold <= 1.0:
            raise ConfigError(
                "forge config invariant violated: relevance_threshold must lie in [0, 1]"
            )
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError(
                "forge config invariant violated: corruption_rate must lie in [0, 1]"
            )
        if not 1.0 <= self.cot_steps_mean <= 3.0:
            raise ConfigError(
                "forge config invariant violated: cot_steps_mean must lie in [1, 3]"
            )


@dataclass(frozen=True)
class QaCandidate:
    question_text: tuple[str, ...]
    qtype: str
    proposed_answer: str
    cot_steps: tuple[str, ...]
    corruption_tag: str | None = None
    revision_count: int = 0

    def __post_init__(self) -> None:
        if self.qtype not in QTYPES:
            raise ConfigError(f"unknown question type {self.qtype!r}")
        if not self.cot_steps:
            raise ConfigError("candidate invariant violated: cot_steps must be non-empty")
        if self.revision_count not in (0, 1):
            raise ConfigError("candidate invariant violated: revision_count must be 0 or 1")


@dataclass(frozen=True)
class VerificationResult:
    verdict: str
    cause: str | None
    relevance_score: float
    tier1: tuple[Triple, ...]
    tier2: tuple[Triple, ...]

    @property
    def evidence(self) -> tuple[Triple, ...]:
        return tuple(sorted(set(self.tier1) | set(self.tier2)))


@dataclass(frozen=True)
class ScreenOutcome:
    candidate: QaCandidate
    result: VerificationResult
    revised: bool


def _step_string(triple: Triple) -> str:
    return " ".join(triple)


def _parse_step(step: str) -> Triple | None:
    parts = step.split()
    return (parts[0], parts[1], parts[2]) if len(parts) == 3 else None


def _mentioned_entities(question_text: tuple[str, ...]) -> list[str]:
    seen: list[str] = []
    for token in question_text:
        if is_entity_like(token) and token not in seen:
            seen.append(token)
    return seen


def _chain_for(kg: KnowledgeGraph, relation: str, subject: str, depth: int) -> tuple[Triple, ...]:
    """Base-fact chain subject -> ... -> label for a rule relation."""

    def tail(head: str, rel: str) -> str | None:
        tails = sorted(kg._head_rel.get((head, rel), ()))
        return tails[0] if tails else None

    kind = tail(subject, RELATION_KIND_OF)
    if kind is None:
        raise ConfigError(f"no kind fact for {subject!r}")
    if depth == 2:
        label = tail(kind, relation)
        if label is None:
            raise ConfigError(f"rule {relation!r} lacks a kind-level fact for {kind!r}")
        return ((subject, RELATION_KIND_OF, kind), (kind, relation, label))
    group = tail(kind, RELATION_GROUP_OF)
    if group is None:
        raise ConfigError(f"no group fact for {kind!r}")
    label = tail(group, relation)
    if label is None:
        raise ConfigError(f"rule {relation!r} lacks a group-level fact for {group!r}")
    return (
        (subject, RELATION_KIND_OF, kind),
        (kind, RELATION_GROUP_OF, group),
        (group, relation, label),
    )


def _topic_weights(target_mean: float, have_depth2: bool, have_depth3: bool) -> list[float]:
    """Probabilities over (fact, 2-step rule, 3-step rule) hitting the mean."""
    if have_depth2 and have_depth3:
        p2 = 0.2
        p3 = min(max((target_mean - 1.0 - p2) / 2.0, 0.0), 1.0 - p2)
        p1 = 1.0 - p2 - p3
    elif have_depth2:
        p2 = min(max(target_mean - 1.0, 0.0), 1.0)
        p3 = 0.0
        p1 = 1.0 - p2
    elif have_depth3:
        p3 = min(max((target_mean - 1.0) / 2.0, 0.0), 1.0)
        p2 = 0.0
        p1 = 1.0 - p3
    else:
        return [1.0, 0.0, 0.0]
    return [p1, p2, p3]


def _family_members(kg: KnowledgeGraph, prefix: str) -> list[str]:
    return sorted(e for e in kg.entities if e.startswith(prefix))


def _rule_relations(kg: KnowledgeGraph) -> tuple[list[str], list[str]]:
    """Rule relations with kind-level base facts vs. group-level base facts."""
    depth2: set[str] = set()
    depth3: set[str] = set()
    for (head, rel), _tails in kg._head_rel.items():
        if rel in (RELATION_KIND_OF, RELATION_GROUP_OF) or head.startswith("class_"):
            continue
        if head.startswith("kind_"):
            depth2.add(rel)
        elif head.startswith("group_"):
            depth3.add(rel)
    return sorted(depth2), sorted(depth3)


def generate_candidates(kg: KnowledgeGraph, config: ForgeConfig) -> list[QaCandidate]:
    """Templated candidates; ``corruption_rate`` of them carry labeled noise."""
    classes = _family_members(kg, "class_")
    kinds = _family_members(kg, "kind_")
    labels = _family_members(kg, "label_")
    if not classes or not kinds:
        raise ConfigError("knowledge graph lacks the class/kind entities needed for forging")
    rules2, rules3 = _rule_relations(kg)
    topic_weights = _topic_weights(config.cot_steps_mean, bool(rules2), bool(rules3))

    candidates: list[QaCandidate] = []
    for i in range(config.corpus_size):
        rng = child_rng(config.seed, "candidate", i)
        qtype = QTYPES[int(rng.choice(4, p=list(config.type_ratio)))]
        topic = int(rng.choice(3, p=topic_weights))
        subject = classes[int(rng.integers(len(classes)))]

        if topic == 0:
            relation = RELATION_KIND_OF
            kind_tails = sorted(kg._head_rel.get((subject, RELATION_KIND_OF), ()))
            if not kind_tails:
                raise ConfigError(f"no kind fact for {subject!r}")
            chain = ((subject, RELATION_KIND_OF, kind_tails[0]),)
            family = kinds
        elif topic == 1:
            relation = rules2[int(rng.integers(len(rules2)))]
            chain = _chain_for(kg, relation, subject, 2)
            family = labels
        else:
            relation = rules3[int(rng.integers(len(rules3)))]
            chain = _chain_for(kg, relation, subject, 3)
            family = labels
        correct = chain[-1][2]

        if qtype == QTYPE_FILL or qtype == QTYPE_FREE:
            question = (Q_MARKER[qtype], relation, subject)
            answer = correct
        elif qtype == QTYPE_TF:
            truthful = bool(rng.random() < 0.5)
            if truthful:
                claim = correct
            else:
                others = [m for m in family if m != correct] or [correct]
                claim = others[int(rng.integers(len(others)))]
            question = (Q_MARKER[qtype], relation, subject, claim)
            answer = TOKEN_TRUE if claim == correct else TOKEN_FALSE
        else:  # MCQ
            distractor_pool = [m for m in family if m != correct]
            order = rng.permutation(len(distractor_pool))
            options = [correct] + [distractor_pool[int(j)] for j in order[:3]]
            while len(options) < 4:  # degenerate families: pad with repeats
                options.append(distractor_pool[0] if distractor_pool else correct)
            slots = rng.permutation(4)
            placed = [options[int(j)] for j in slots]
            question_parts = [Q_MARKER[qtype], relation, subject]
            for marker, option in zip(OPTION_MARKERS, placed):
                question_parts.extend((marker, option))
            question = tuple(question_parts)
            answer = OPTION_LETTERS[placed.index(correct)]

        candidate = QaCandidate(
            question_text=question,
            qtype=qtype,
            proposed_answer=answer,
            cot_steps=tuple(_step_string(t) for t in chain),
        )
        if config.corruption_rate > 0 and rng.random() < config.corruption_rate:
            kind = CORRUPTIONS[int(rng.integers(len(CORRUPTIONS)))]
            candidate = _corrupt(kg, candidate, kind, rng, config.relevance_threshold, i)
        candidates.append(candidate)
    return candidates


def _corrupt(
    kg: KnowledgeGraph,
    candidate: QaCandidate,
    kind: str,
    rng,
    threshold: float,
    index: int,
) -> QaCandidate:
    steps = [_parse_step(s) for s in candidate.cot_steps]
    if kind == CORRUPTION_ENTITY_SWAP:
        # Swap the first step's tail for a wrong same-family entity.  The
        # resulting triple contradicts the graph but the forger can repair it
        # on revision, so these candidates exercise the revise path.
        head, rel, tail = steps[0]
        family = _family_members(kg, tail.split("_")[0] + "_")
        wrong = [m for m in family if m != tail]
        swapped = wrong[int(rng.integers(len(wrong)))] if wrong else tail
        new_steps = list(candidate.cot_steps)
        new_steps[0] = _step_string((head, rel, swapped))
        return replace(candidate, cot_steps=tuple(new_steps), corruption_tag=kind)
    if kind == CORRUPTION_RELATION_CONTRADICTION:
        # Hallucinate a wrong final fact and stand by it: the answer moves
        # with the wrong tail where the answer is the tail itself, and the
        # forger's revision re-asserts the same contradiction.
        head, rel, tail = steps[-1]
        family = _family_members(kg, tail.split("_")[0] + "_")
        wrong = [m for m in family if m != tail]
        bad = wrong[int(rng.integers(len(wrong)))] if wrong else tail
        new_steps = list(candidate.cot_steps)
        new_steps[-1] = _step_string((head, rel, bad))
        answer = bad if candidate.proposed_answer == tail else candidate.proposed_answer
        return replace(
            candidate,
            cot_steps=tuple(new_steps),
            proposed_answer=answer,
            corruption_tag=kind,
        )
    # Off-domain: alias mentioned entities until the relevance score drops
    # below the threshold.
    question = list(candidate.question_text)
    alias_count = 0
    while True:
        mentions = _mentioned_entities(tuple(question))
        found = [m for m in mentions if m in kg.entities]
        if mentions and len(found) / len(mentions) < threshold:
            break
        if not found:
            break
        target = found[0]
        alias = f"alien_{index}_{alias_count}"
        alias_count += 1
        question = [alias if tok == target else tok for tok in question]
    return replace(candidate, question_text=tuple(question), corruption_tag=kind)


def verify_candidate(
    kg: KnowledgeGraph, candidate: QaCandidate, threshold: float
) -> VerificationResult:
    """Screen one candidate against the graph.

    Decision order: off-domain relevance first, then answer grounding, then
    chain-of-thought contradictions (one revision allowed, tracked by the
    candidate's ``revision_count``).
    """
    mentions = _mentioned_entities(candidate.question_text)
    found = [m for m in mentions if m in kg.entities]
    score = len(found) / len(mentions) if mentions else 0.0

    tier2: set[Triple] = set()
    for entity in found:
        tier2 |= kg.neighborhood_triples(entity, 1)

    answer_entities = [t for t in candidate.proposed_answer.split() if is_entity_like(t)]
    if not answer_entities:
        final = _parse_step(candidate.cot_steps[-1])
        if final is not None:
            answer_entities = [t for t in (final[0], final[2]) if is_entity_like(t)]
    answer_found = [e for e in answer_entities if e in kg.entities]

    tier1: set[Triple] = set()
    for entity in answer_found:
        tier1 |= kg.neighborhood_triples(entity, kg.hop_bound)

    tier1_sorted = tuple(sorted(tier1))
    tier2_sorted = tuple(sorted(tier2))

    if not mentions or score < threshold:
        return VerificationResult(
            VERDICT_REJECT, CAUSE_OFF_DOMAIN, score, tier1_sorted, tier2_sorted
        )
    if not answer_found or not tier1:
        return VerificationResult(
            VERDICT_REJECT, CAUSE_UNSUPPORTED_ANSWER, score, tier1_sorted, tier2_sorted
        )

    contradiction = False
    for step in candidate.cot_steps:
        triple = _parse_step(step)
        if triple is not None and kg.contradicts(triple):
            contradiction = True
            break
    if contradiction:
        if candidate.revision_count == 0:
            return VerificationResult(
                VERDICT_REVISE, CAUSE_CONTRADICTION, score, tier1_sorted, tier2_sorted
            )
        return VerificationResult(
            VERDICT_REJECT, CAUSE_CONTRADICTION_REPEAT, score, tier1_sorted, tier2_sorted
        )
    return VerificationResult(VERDICT_ACCEPT, None, score, tier1_sorted, tier2_sorted)


def _revise(kg: KnowledgeGraph, candidate: QaCandidate) -> QaCandidate:
    """The forger's single rewrite attempt.

    Ordinary slips (e.g. a swapped entity) are repaired from the graph; a
    hallucinated relation is the forger's sincere belief, so the rewrite
    re-asserts it and the candidate fails verification again.
    """
    if candidate.corruption_tag == CORRUPTION_RELATION_CONTRADICTION:
        return replace(candidate, revision_count=1)
    new_steps = []
    for step in candidate.cot_steps:
        triple = _parse_step(step)
        if triple is not None and kg.contradicts(triple):
            head, rel, _ = triple
            tails = sorted(kg._head_rel.get((head, rel), ()))
            if tails:
                triple = (head, rel, tails[0])
            new_steps.append(_step_string(triple))
        else:
            new_steps.append(step)
    return replace(candidate, cot_steps=tuple(new_steps), revision_count=1)


def screen_candidates(
    kg: KnowledgeGraph, candidates: list[QaCandidate], threshold: float
) -> list[ScreenOutcome]:
    """Verify every candidate, applying at most one revision each."""
    outcomes: list[ScreenOutcome] = []
    for candidate in candidates:
        result = verify_candidate(kg, candidate, threshold)
        revised = False
        if result.verdict == VERDICT_REVISE:
            candidate = _revise(kg, candidate)
            result = verify_candidate(kg, candidate, threshold)
            revised = True
            if result.verdict == VERDICT_REVISE:
                raise ContractError("verification requested a second revision")
        outcomes.append(ScreenOutcome(candidate=candidate, result=result, revised=revised))
    return outcomes


def assemble_record(
    candidate: QaCandidate,
    result: VerificationResult,
    cot_enabled: bool,
    record_id: int,
) -> dict:
    """Corpus record for an accepted candidate; rejects are a contract error."""
    if result.verdict != VERDICT_ACCEPT:
        raise ContractError("assemble_record requires an accepted candidate")
    sentences = []
    if cot_enabled:
        for i, step in enumerate(candidate.cot_steps, start=1):
            sentences.append(f"Step {i}: {step}.")
    sentences.append(f"{FINAL_SENTENCE_PREFIX} {candidate.proposed_answer}")
    return {
        "id": record_id,
        "qtype": candidate.qtype,
        "question": list(candidate.question_text),
        "answer": candidate.proposed_answer,
        "cot_steps": list(candidate.cot_steps),
        "cot_enabled": bool(cot_enabled),
        "answer_text": " ".join(sentences),
        "relevance_score": result.relevance_score,
        "revision_count": candidate.revision_count,
    }


@dataclass(frozen=True)
class ForgeResult:
    records: list[dict]
    report: dict
    outcomes: list[ScreenOutcome]


def forge_corpus(rulebase: RuleBase, config: ForgeConfig) -> ForgeResult:
    """Full pipeline: template, corrupt, screen, assemble, summarize."""
    kg = build_knowledge_graph(rulebase, config.hop_bound)
    candidates = generate_candidates(kg, config)
    outcomes = screen_candidates(kg, candidates, config.relevance_threshold)

    records: list[dict] = []
    rejections: dict[str, int] = {}
    revised_accepted = 0
    for outcome in outcomes:
        if outcome.result.verdict == VERDICT_ACCEPT:
            record = assemble_record(
                outcome.candidate, outcome.result, config.cot_enabled, len(records)
            )
            records.append(record)
            revised_accepted += int(outcome.revised)
        else:
            cause = outcome.result.cause or "unknown"
            rejections[cause] = rejections.get(cause, 0) + 1

    per_type = {q: 0 for q in QTYPES}
    step_counts = []
    question_lengths = []
    for record in records:
        per_type[record["qtype"]] += 1
        step_counts.append(len(record["cot_steps"]))
        question_lengths.append(len(record["question"]))
    total = len(records)
    report = {
        "candidates": len(candidates),
        "total_pairs": total,
        **{f"count_{q}": per_type[q] for q in QTYPES},
        **{
            f"proportion_{q}": (per_type[q] / total if total else 0.0) for q in QTYPES
        },
        "mean_cot_steps": (sum(step_counts) / total if total else 0.0),
        "max_cot_steps": (max(step_counts) if step_counts else 0),
        "mean_question_tokens": (sum(question_lengths) / total if total else 0.0),
        "revised_accepted": revised_accepted,
        **{f"rejected_{cause}": count for cause, count in sorted(rejections.items())},
        "rejected_total": sum(rejections.values()),
    }
    return ForgeResult(records=records, report=report, outcomes=outcomes)


def write_corpus(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def load_corpus(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in report.items():
            fh.write(f"{key}: {value}\n")
