import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recurformer.tasks import (
    CharTokenizer,
    HashHopInstance,
    InputError,
    MQARInstance,
    MQARVocab,
    TaskConfigError,
    echo_oracle,
    generate_hashhop,
    generate_mqar,
    hashhop_corpus,
    mqar_batch,
    score_hashhop,
    score_mqar,
)

CHAIN = [("01", "02"), ("02", "03"), ("03", "04"), ("04", "05"), ("05", "06")]
DISTRACT = [("10", "17"), ("62", "23"), ("99", "85"), ("21", "34"), ("42", "73")]


def worked_hashhop():
    pairs = [CHAIN[2], DISTRACT[0], CHAIN[0], DISTRACT[1], CHAIN[4], DISTRACT[2], CHAIN[1], DISTRACT[3], CHAIN[3], DISTRACT[4]]
    return HashHopInstance.from_pairs(pairs, "01")


def test_worked_hashhop_instance_is_legal():
    inst = worked_hashhop()
    assert inst.target_chain == ("01", "02", "03", "04", "05", "06")
    assert inst.h_p == 5 and inst.h_e == 2
    assert score_hashhop(inst, "01 -> 02 -> 03 -> 04 -> 05 -> 06") == 1.0
    assert score_hashhop(inst, echo_oracle(inst)) == 1.0


def test_hashhop_rejects_broken_instances():
    with pytest.raises(InputError):
        HashHopInstance.from_pairs(CHAIN + [("06", "99")] + [("99", "07")], "01", h_l=10)
    with pytest.raises(InputError):
        # distractor pointing into the chain
        HashHopInstance.from_pairs(CHAIN + [("10", "03")], "01")
    with pytest.raises(InputError):
        # repeated element among distractors
        HashHopInstance.from_pairs(CHAIN + [("10", "17"), ("17", "23")], "01")
    with pytest.raises(InputError):
        HashHopInstance.from_pairs([("0A", "02")], "0A")


def test_hashhop_scoring_examples():
    inst = worked_hashhop()
    assert score_hashhop(inst, "") == 0.0
    assert score_hashhop(inst, "garbage ~~") == 0.0
    assert score_hashhop(inst, ["01", "02", "03", "77", "05", "06"]) == 0.5
    assert score_hashhop(inst, ["02", "03"]) == 0.0


def test_hashhop_single_link():
    inst = generate_hashhop(3, 4, 1, 64)
    inst.validate()
    assert len(inst.target_chain) == 2
    assert inst.target_chain[:2] in [tuple(p) for p in inst.pairs]
    assert len(inst.pairs) >= 2


def test_hashhop_determinism_appendix_config():
    a = generate_hashhop(42, 8, 16, 6144)
    b = generate_hashhop(42, 8, 16, 6144)
    assert a.to_text() == b.to_text()
    assert a.to_text() != generate_hashhop(43, 8, 16, 6144).to_text()
    a.validate()
    assert len(a.render()) <= 6144 and len(a.target_chain) == 17
    assert all(len(e) == 8 for e in a.target_chain)


def test_hashhop_infeasible_budget():
    with pytest.raises(TaskConfigError):
        generate_hashhop(0, 8, 16, 100)
    with pytest.raises(TaskConfigError):
        generate_hashhop(0, 0, 4, 1000)


def test_hashhop_text_roundtrip():
    a = generate_hashhop(5, 4, 6, 400)
    assert HashHopInstance.from_text(a.to_text()) == a
    with pytest.raises(InputError):
        HashHopInstance.from_text('{"task": "mqar"}\n')


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**40), st.integers(1, 6), st.integers(1, 12))
def test_generated_hashhop_has_unique_chain(seed, h_e, h_p):
    h_e = max(h_e, 2)
    line = 2 * h_e + 5
    h_l = (h_p + 3) * line + 20
    inst = generate_hashhop(seed, h_e, h_p, h_l)
    inst.validate()
    assert echo_oracle(inst) == list(inst.target_chain)
    assert score_hashhop(inst, inst.render().split("\n")[-1] + inst.answer()) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**40), st.integers(0, 9))
def test_hashhop_score_monotone_in_prefix(seed, cut):
    inst = generate_hashhop(seed, 3, 8, 400)
    chain = list(inst.target_chain)
    wrong = ["zzzz"]
    scores = [score_hashhop(inst, chain[:n] + wrong) for n in range(len(chain) + 1)]
    assert scores == sorted(scores)
    assert scores[-1] == 1.0
    assert score_hashhop(inst, chain[:cut]) == cut / len(chain)


def test_corpus_tokenizes_and_is_deterministic():
    tok = CharTokenizer()
    text = hashhop_corpus(1, 3, h_l=128)
    assert tok.decode(tok.encode(text)) == text
    assert text == hashhop_corpus(1, 3, h_l=128)
    with pytest.raises(InputError):
        tok.encode("A")


# ---------------------------------------------------------------- MQAR


def test_mqar_appendix_example():
    pairs = [("A", 4), ("F", 1), ("B", 3), ("C", 6)]
    inst = MQARInstance.from_pairs(pairs, ["A", "C", "F"])
    assert inst.answers == (4, 6, 1)
    assert score_mqar(inst, [4, 6, 1]) == 1.0
    assert score_mqar(inst, [4, 6, 2]) == pytest.approx(2 / 3)
    assert inst.tokens() == ["A", 4, "F", 1, "B", 3, "C", 6, "A", 4, "C", 6, "F", 1]


def test_mqar_scoring_examples():
    inst = MQARInstance.from_pairs([(1, 11), (2, 12), (3, 13), (4, 14)], [4, 3, 2, 1])
    assert score_mqar(inst, [14, 13, 12, 11]) == 1.0
    assert score_mqar(inst, [0, 0, 0, 0]) == 0.0
    assert score_mqar(inst, [14, 13, 12, 0]) == 0.75
    with pytest.raises(InputError):
        score_mqar(inst, [14])
    one = generate_mqar(0, 1, 8, range(1, 5), range(5, 9))
    assert score_mqar(one, list(one.answers)) == 1.0


def test_mqar_rejects_bad_instances():
    with pytest.raises(InputError):
        MQARInstance.from_pairs([(1, 2), (1, 3)], [1])
    with pytest.raises(InputError):
        MQARInstance.from_pairs([(1, 2)], [5])
    with pytest.raises(InputError):
        MQARInstance.from_pairs([(1, 2), (3, 4)], [1, 3], length=6).tokens()


def test_mqar_generation_determinism_and_shape():
    v = MQARVocab()
    a = generate_mqar(7, 64, 256, v.keys, v.values)
    assert a.to_text() == generate_mqar(7, 64, 256, v.keys, v.values).to_text()
    assert len(a.tokens()) == 256 and a.n_pairs == 64
    assert sorted(a.queries) == sorted(k for k, _ in a.kv_pairs)
    assert MQARInstance.from_text(a.to_text()) == a
    assert all(t in v.keys for t in a.queries) and all(t in v.values for t in a.answers)


def test_mqar_config_errors():
    with pytest.raises(TaskConfigError):
        generate_mqar(0, 4, 64, range(1, 10), range(5, 20))
    with pytest.raises(TaskConfigError):
        generate_mqar(0, 4, 64, range(1, 10), range(10, 20), pad=3)
    with pytest.raises(TaskConfigError):
        generate_mqar(0, 11, 64, range(1, 10), range(10, 20))
    with pytest.raises(TaskConfigError):
        generate_mqar(0, 8, 20, range(1, 10), range(10, 20))


def test_mqar_batch_targets_at_query_positions():
    v = MQARVocab(16, 16)
    insts = [generate_mqar(s, 4, 32, v.keys, v.values) for s in range(3)]
    b = mqar_batch(insts)
    assert b.tokens.shape == (3, 32) and int(b.mask.sum()) == 12
    for i, inst in enumerate(insts):
        pos = inst.query_positions()
        assert b.tokens[i, pos].tolist() == list(inst.queries)
        assert b.targets[i, pos].tolist() == list(inst.answers)
        # the answer follows its query in the stream
        assert b.tokens[i, [p + 1 for p in pos]].tolist() == list(inst.answers)
