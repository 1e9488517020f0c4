"""Text-QA forging: graph closure, templating, two-tier screening, assembly."""

import pytest

from zoomlab.errors import ConfigError, ContractError
from zoomlab.qaforge import (
    CAUSE_CONTRADICTION,
    CAUSE_CONTRADICTION_REPEAT,
    CAUSE_OFF_DOMAIN,
    CAUSE_UNSUPPORTED_ANSWER,
    CORRUPTION_ENTITY_SWAP,
    CORRUPTION_OFF_DOMAIN,
    CORRUPTION_RELATION_CONTRADICTION,
    CORRUPTIONS,
    FINAL_SENTENCE_PREFIX,
    ForgeConfig,
    KnowledgeGraph,
    QTYPE_FILL,
    QTYPE_FREE,
    QTYPE_MCQ,
    QTYPE_TF,
    QTYPES,
    QaCandidate,
    VERDICT_ACCEPT,
    VERDICT_REJECT,
    VERDICT_REVISE,
    assemble_record,
    build_knowledge_graph,
    forge_corpus,
    generate_candidates,
    load_corpus,
    screen_candidates,
    verify_candidate,
    write_corpus,
    write_report,
)
from zoomlab.rules import RELATION_KIND_OF, Rule, RuleBase
from zoomlab.vocab import (
    OPTION_LETTERS,
    OPTION_MARKERS,
    TOKEN_FALSE,
    TOKEN_Q_FILL,
    TOKEN_Q_FREE,
    TOKEN_Q_MCQ,
    TOKEN_Q_TF,
    TOKEN_TRUE,
)

TRANSITIVE_R = Rule(
    rule_id="trans",
    premises=(("?x", "r", "?y"), ("?y", "r", "?z")),
    conclusion=("?x", "r", "?z"),
)


def chain_rulebase(*names: str) -> RuleBase:
    """Line graph n0 -r-> n1 -r-> ... with a transitivity rule on r."""
    facts = {(a, "r", b) for a, b in zip(names, names[1:])}
    return RuleBase(
        rules=(TRANSITIVE_R,),
        entity_universe=frozenset(names),
        relation_universe=frozenset(facts),
    )


def first_accept(kg, outcomes, predicate):
    for outcome in outcomes:
        if outcome.result.verdict == VERDICT_ACCEPT and predicate(outcome.candidate):
            return outcome
    raise AssertionError("no accepted candidate matched the predicate")


@pytest.fixture(scope="module")
def small_kg(small_rulebase):
    return build_knowledge_graph(small_rulebase)


@pytest.fixture(scope="module")
def noisy_outcomes(small_kg):
    """Screened candidates with a high corruption rate, for QC properties."""
    config = ForgeConfig(corpus_size=300, corruption_rate=0.9, seed=7)
    candidates = generate_candidates(small_kg, config)
    outcomes = screen_candidates(small_kg, candidates, config.relevance_threshold)
    return config, candidates, outcomes


# --- knowledge-graph construction ---


def test_empty_rulebase_builds_empty_graph():
    empty = RuleBase(rules=(), entity_universe=frozenset(), relation_universe=frozenset())
    kg = build_knowledge_graph(empty)
    assert kg.entities == frozenset()
    assert kg.relations == frozenset()
    assert kg.provenance == {}


def test_transitive_rule_derives_composed_fact():
    kg = build_knowledge_graph(chain_rulebase("a", "b", "c"))
    assert ("a", "r", "c") in kg.relations
    assert kg.provenance[("a", "r", "c")] == "trans"
    assert kg.provenance[("a", "r", "b")] == "base"


def test_closure_matches_hand_enumerated_fixpoint():
    kg = build_knowledge_graph(chain_rulebase("a", "b", "c", "d"))
    expected = {
        ("a", "r", "b"),
        ("b", "r", "c"),
        ("c", "r", "d"),
        ("a", "r", "c"),
        ("b", "r", "d"),
        ("a", "r", "d"),
    }
    assert kg.relations == frozenset(expected)


def test_rebuilding_graph_is_deterministic(small_rulebase):
    first = build_knowledge_graph(small_rulebase)
    second = build_knowledge_graph(small_rulebase)
    assert first.entities == second.entities
    assert first.relations == second.relations
    assert first.provenance == second.provenance


def test_dangling_triple_is_named_in_error():
    with pytest.raises(ConfigError, match="ghost"):
        KnowledgeGraph(
            entities=frozenset({"a"}),
            relations=frozenset({("a", "r", "ghost")}),
            provenance={},
        )


def test_neighborhood_hop_semantics():
    kg = build_knowledge_graph(chain_rulebase("a", "b", "c", "d"))
    direct = kg.neighborhood_triples("a", 1)
    assert direct == {t for t in kg.relations if "a" in (t[0], t[2])}
    within_two = kg.neighborhood_triples("a", 2)
    assert direct < within_two
    assert within_two == {t for t in kg.relations if {t[0], t[2]} & {"a", "b", "c", "d"}}
    assert kg.neighborhood_triples("nowhere", 3) == set()


def test_contradiction_is_a_different_tail_for_known_head_relation():
    kg = build_knowledge_graph(chain_rulebase("a", "b", "c"))
    assert not kg.contradicts(("a", "r", "b"))  # asserted fact
    assert not kg.contradicts(("a", "r", "c"))  # derived fact
    assert kg.contradicts(("a", "r", "a"))  # known head-relation, new tail
    assert not kg.contradicts(("c", "r", "a"))  # head-relation never asserted


# --- config and candidate validation ---


@pytest.mark.parametrize(
    "kwargs",
    [
        {"corpus_size": -1},
        {"type_ratio": (0.5, 0.5, 0.0, 0.1)},
        {"type_ratio": (1.2, -0.2, 0.0, 0.0)},
        {"relevance_threshold": 1.5},
        {"corruption_rate": -0.1},
        {"cot_steps_mean": 0.5},
        {"cot_steps_mean": 3.5},
    ],
)
def test_forge_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        ForgeConfig(**kwargs)


def test_candidate_rejects_bad_fields():
    with pytest.raises(ConfigError):
        QaCandidate(("q",), "essay", "x", ("s",))
    with pytest.raises(ConfigError):
        QaCandidate(("q",), QTYPE_FREE, "x", ())
    with pytest.raises(ConfigError):
        QaCandidate(("q",), QTYPE_FREE, "x", ("s",), revision_count=2)


# --- candidate generation ---


def test_zero_corpus_size_yields_empty_list(small_kg):
    assert generate_candidates(small_kg, ForgeConfig(corpus_size=0)) == []


def test_generation_is_deterministic(small_kg):
    config = ForgeConfig(corpus_size=60, corruption_rate=0.3, seed=11)
    assert generate_candidates(small_kg, config) == generate_candidates(small_kg, config)


def test_clean_generation_carries_no_corruption_tags(small_kg):
    candidates = generate_candidates(small_kg, ForgeConfig(corpus_size=80, seed=3))
    assert all(c.corruption_tag is None for c in candidates)
    assert all(c.revision_count == 0 for c in candidates)


def test_type_counts_match_ratio_at_scale(small_kg):
    config = ForgeConfig(corpus_size=10_000)
    candidates = generate_candidates(small_kg, config)
    counts = {q: 0 for q in QTYPES}
    for candidate in candidates:
        counts[candidate.qtype] += 1
    assert 2200 <= counts[QTYPE_MCQ] <= 2600
    for qtype, target in zip(QTYPES, config.type_ratio):
        assert abs(counts[qtype] / len(candidates) - target) < 0.02


def test_corruption_tags_are_truthful_and_rate_bounded(small_kg):
    rate = 0.5
    config = ForgeConfig(corpus_size=600, corruption_rate=rate, seed=5)
    candidates = generate_candidates(small_kg, config)
    tagged = [c for c in candidates if c.corruption_tag is not None]
    assert all(c.corruption_tag in CORRUPTIONS for c in tagged)
    # Binomial(600, 0.5): keep the observed rate within three standard errors.
    sigma = (rate * (1 - rate) / len(candidates)) ** 0.5
    assert abs(len(tagged) / len(candidates) - rate) < 3 * sigma


def test_question_layout_per_type(small_kg):
    candidates = generate_candidates(small_kg, ForgeConfig(corpus_size=400, seed=9))
    seen = set()
    for candidate in candidates:
        marker = candidate.question_text[0]
        chain_tail = candidate.cot_steps[-1].split()[2]
        if candidate.qtype in (QTYPE_FILL, QTYPE_FREE):
            expected_marker = TOKEN_Q_FILL if candidate.qtype == QTYPE_FILL else TOKEN_Q_FREE
            assert marker == expected_marker
            assert len(candidate.question_text) == 3
            assert candidate.proposed_answer == chain_tail
        elif candidate.qtype == QTYPE_TF:
            assert marker == TOKEN_Q_TF
            claim = candidate.question_text[3]
            expected = TOKEN_TRUE if claim == chain_tail else TOKEN_FALSE
            assert candidate.proposed_answer == expected
        else:
            assert marker == TOKEN_Q_MCQ
            options = dict(zip(candidate.question_text[3::2], candidate.question_text[4::2]))
            assert tuple(options) == OPTION_MARKERS
            letter = candidate.proposed_answer
            assert letter in OPTION_LETTERS
            slot = OPTION_MARKERS[OPTION_LETTERS.index(letter)]
            assert options[slot] == chain_tail
        seen.add(candidate.qtype)
    assert seen == set(QTYPES)


# --- verification ---


def test_clean_candidate_accepts_with_evidence(small_kg):
    candidates = generate_candidates(small_kg, ForgeConfig(corpus_size=20, seed=1))
    for candidate in candidates:
        result = verify_candidate(small_kg, candidate, 0.5)
        assert result.verdict == VERDICT_ACCEPT
        assert result.cause is None
        assert result.relevance_score == 1.0
        assert result.tier1 and result.tier2
        assert result.evidence


def test_unsupported_answer_rejects_with_empty_fine_evidence(small_kg):
    candidate = QaCandidate(
        question_text=(TOKEN_Q_FILL, RELATION_KIND_OF, "class_0"),
        qtype=QTYPE_FILL,
        proposed_answer="alien_unknown",
        cot_steps=(f"class_0 {RELATION_KIND_OF} alien_unknown",),
    )
    result = verify_candidate(small_kg, candidate, 0.5)
    assert result.verdict == VERDICT_REJECT
    assert result.cause == CAUSE_UNSUPPORTED_ANSWER
    assert result.tier1 == ()


def test_low_relevance_rejects_as_off_domain(small_kg):
    candidate = QaCandidate(
        question_text=(TOKEN_Q_FREE, "rule_0", "alien_a", "alien_b", "class_0"),
        qtype=QTYPE_FREE,
        proposed_answer="label_0",
        cot_steps=("class_0 rule_0 label_0",),
    )
    result = verify_candidate(small_kg, candidate, 0.5)
    assert result.verdict == VERDICT_REJECT
    assert result.cause == CAUSE_OFF_DOMAIN
    assert result.relevance_score == pytest.approx(1 / 3)

    # Off-domain wins over answer grounding, and no mentions at all is
    # off-domain even at threshold zero.
    bare = QaCandidate(
        question_text=(TOKEN_Q_FREE, "rule_0"),
        qtype=QTYPE_FREE,
        proposed_answer="alien_x",
        cot_steps=("alien_x rule_0 alien_x",),
    )
    result = verify_candidate(small_kg, bare, 0.0)
    assert result.verdict == VERDICT_REJECT
    assert result.cause == CAUSE_OFF_DOMAIN


def test_contradicting_step_revises_once_then_rejects(small_kg):
    true_kind = next(t for h, r, t in small_kg.relations if h == "class_0" and r == RELATION_KIND_OF)
    wrong_kind = next(k for k in sorted(small_kg.entities) if k.startswith("kind_") and k != true_kind)
    fresh = QaCandidate(
        question_text=(TOKEN_Q_FILL, RELATION_KIND_OF, "class_0"),
        qtype=QTYPE_FILL,
        proposed_answer=wrong_kind,
        cot_steps=(f"class_0 {RELATION_KIND_OF} {wrong_kind}",),
    )
    first = verify_candidate(small_kg, fresh, 0.5)
    assert first.verdict == VERDICT_REVISE
    assert first.cause == CAUSE_CONTRADICTION

    stubborn = QaCandidate(
        question_text=fresh.question_text,
        qtype=fresh.qtype,
        proposed_answer=fresh.proposed_answer,
        cot_steps=fresh.cot_steps,
        revision_count=1,
    )
    second = verify_candidate(small_kg, stubborn, 0.5)
    assert second.verdict == VERDICT_REJECT
    assert second.cause == CAUSE_CONTRADICTION_REPEAT


def test_screening_partitions_by_corruption_kind(small_kg, noisy_outcomes):
    _config, candidates, outcomes = noisy_outcomes
    assert len(outcomes) == len(candidates)
    kinds_seen = set()
    for original, outcome in zip(candidates, outcomes):
        tag = original.corruption_tag
        verdict, cause = outcome.result.verdict, outcome.result.cause
        kinds_seen.add(tag)
        if tag is None:
            assert (verdict, outcome.revised) == (VERDICT_ACCEPT, False)
        elif tag == CORRUPTION_ENTITY_SWAP:
            # A slip repairable from the graph: accepted after one revision.
            assert (verdict, outcome.revised) == (VERDICT_ACCEPT, True)
            assert outcome.candidate.revision_count == 1
            assert outcome.candidate.cot_steps != original.cot_steps
        elif tag == CORRUPTION_RELATION_CONTRADICTION:
            # Always rejected.  Usually the re-asserted contradiction; when
            # the hallucinated answer lands on an entity with no incident
            # evidence, grounding catches it before the contradiction check.
            assert verdict == VERDICT_REJECT
            assert cause in (CAUSE_CONTRADICTION_REPEAT, CAUSE_UNSUPPORTED_ANSWER)
            assert outcome.revised == (cause == CAUSE_CONTRADICTION_REPEAT)
        else:
            assert tag == CORRUPTION_OFF_DOMAIN
            assert (verdict, cause) == (VERDICT_REJECT, CAUSE_OFF_DOMAIN)
            assert not outcome.revised
    assert kinds_seen == {None, *CORRUPTIONS}


def test_single_revision_bound_holds(noisy_outcomes):
    _config, _candidates, outcomes = noisy_outcomes
    assert all(outcome.candidate.revision_count <= 1 for outcome in outcomes)


def test_off_domain_verdict_iff_score_below_threshold(small_kg, noisy_outcomes):
    config, _candidates, outcomes = noisy_outcomes
    for outcome in outcomes:
        below = outcome.result.relevance_score < config.relevance_threshold
        assert below == (outcome.result.cause == CAUSE_OFF_DOMAIN)


def test_accepted_steps_assert_only_graph_triples(small_kg, noisy_outcomes):
    _config, _candidates, outcomes = noisy_outcomes
    accepted = [o for o in outcomes if o.result.verdict == VERDICT_ACCEPT]
    assert accepted
    for outcome in accepted:
        for step in outcome.candidate.cot_steps:
            assert tuple(step.split()) in small_kg.relations


def test_verification_is_idempotent_on_accepts(small_kg, noisy_outcomes):
    config, _candidates, outcomes = noisy_outcomes
    for outcome in outcomes:
        if outcome.result.verdict == VERDICT_ACCEPT:
            again = verify_candidate(small_kg, outcome.candidate, config.relevance_threshold)
            assert again.verdict == VERDICT_ACCEPT


# --- record assembly ---


def test_record_without_cot_is_single_sentence(small_kg):
    candidate = generate_candidates(small_kg, ForgeConfig(corpus_size=1, seed=2))[0]
    result = verify_candidate(small_kg, candidate, 0.5)
    record = assemble_record(candidate, result, cot_enabled=False, record_id=0)
    assert record["answer_text"] == f"{FINAL_SENTENCE_PREFIX} {candidate.proposed_answer}"
    assert "Step" not in record["answer_text"]
    assert record["cot_enabled"] is False


def test_three_premise_chain_renders_three_step_lines(small_kg):
    config = ForgeConfig(corpus_size=200, seed=4)
    candidates = generate_candidates(small_kg, config)
    outcomes = screen_candidates(small_kg, candidates, config.relevance_threshold)
    outcome = first_accept(small_kg, outcomes, lambda c: len(c.cot_steps) == 3)
    record = assemble_record(outcome.candidate, outcome.result, cot_enabled=True, record_id=0)
    text = record["answer_text"]
    assert [f"Step {i}:" in text for i in (1, 2, 3)] == [True, True, True]
    assert "Step 4:" not in text
    assert text.index("Step 1:") < text.index("Step 2:") < text.index("Step 3:")
    assert text.endswith(f"{FINAL_SENTENCE_PREFIX} {record['answer']}")
    # The step lines mirror the two-hop proof: class -> kind -> group -> label.
    first, second, third = (tuple(s.split()) for s in outcome.candidate.cot_steps)
    assert first[2] == second[0] and second[2] == third[0]
    assert all(s in small_kg.relations for s in (first, second, third))


def test_tf_record_final_sentence_names_truth_value(small_kg):
    config = ForgeConfig(corpus_size=300, seed=6)
    candidates = generate_candidates(small_kg, config)
    outcomes = screen_candidates(small_kg, candidates, config.relevance_threshold)
    for wanted in (TOKEN_TRUE, TOKEN_FALSE):
        outcome = first_accept(
            small_kg,
            outcomes,
            lambda c: c.qtype == QTYPE_TF and c.proposed_answer == wanted,
        )
        record = assemble_record(outcome.candidate, outcome.result, cot_enabled=True, record_id=0)
        assert record["answer_text"].endswith(f"{FINAL_SENTENCE_PREFIX} {wanted}")


def test_assembling_a_rejected_candidate_is_a_contract_error(small_kg):
    candidate = QaCandidate(
        question_text=(TOKEN_Q_FREE, "rule_0"),
        qtype=QTYPE_FREE,
        proposed_answer="alien_x",
        cot_steps=("alien_x rule_0 alien_x",),
    )
    result = verify_candidate(small_kg, candidate, 0.5)
    assert result.verdict == VERDICT_REJECT
    with pytest.raises(ContractError):
        assemble_record(candidate, result, cot_enabled=True, record_id=0)


# --- end-to-end forging ---


def test_empty_forge_produces_zeroed_report(small_rulebase):
    result = forge_corpus(small_rulebase, ForgeConfig(corpus_size=0))
    assert result.records == []
    assert result.report["total_pairs"] == 0
    assert result.report["rejected_total"] == 0
    assert result.report["mean_cot_steps"] == 0.0


def test_forged_ids_are_dense_and_report_matches_records(small_rulebase):
    config = ForgeConfig(corpus_size=500, corruption_rate=0.2, seed=13)
    result = forge_corpus(small_rulebase, config)
    report = result.report

    assert [r["id"] for r in result.records] == list(range(len(result.records)))
    assert report["candidates"] == config.corpus_size
    assert report["total_pairs"] == len(result.records)
    rejected = sum(v for k, v in report.items() if k.startswith("rejected_") and k != "rejected_total")
    assert report["rejected_total"] == rejected == config.corpus_size - len(result.records)

    counts = {q: 0 for q in QTYPES}
    steps = []
    for record in result.records:
        counts[record["qtype"]] += 1
        steps.append(len(record["cot_steps"]))
        assert record["answer_text"].endswith(f"{FINAL_SENTENCE_PREFIX} {record['answer']}")
    for qtype in QTYPES:
        assert report[f"count_{qtype}"] == counts[qtype]
        assert report[f"proportion_{qtype}"] == pytest.approx(counts[qtype] / len(result.records))
    assert report["mean_cot_steps"] == pytest.approx(sum(steps) / len(steps))
    assert report["max_cot_steps"] == max(steps)


def test_clean_forge_mean_steps_near_configured_target(small_rulebase):
    config = ForgeConfig(corpus_size=2000, cot_steps_mean=2.6, seed=0)
    result = forge_corpus(small_rulebase, config)
    assert len(result.records) == 2000  # nothing clean is rejected
    assert result.report["mean_cot_steps"] == pytest.approx(2.6, abs=0.1)


def test_corpus_roundtrip_and_report_file(small_rulebase, tmp_path):
    result = forge_corpus(small_rulebase, ForgeConfig(corpus_size=40, seed=21))
    corpus_path = tmp_path / "corpus.jsonl"
    report_path = tmp_path / "report.txt"
    write_corpus(result.records, corpus_path)
    write_report(result.report, report_path)

    assert load_corpus(corpus_path) == result.records
    lines = report_path.read_text(encoding="utf-8").splitlines()
    assert lines == [f"{k}: {v}" for k, v in result.report.items()]
    # Rewriting is byte-stable.
    before = corpus_path.read_bytes()
    write_corpus(result.records, corpus_path)
    assert corpus_path.read_bytes() == before
