import math

import numpy as np
import pytest

from medtune.data import DataError
from medtune.evaluate import (
    MMLU_CLINICAL_TOPICS,
    BenchmarkItem,
    ItemResult,
    aggregate,
    argmax_first,
    evaluate_item,
    format_table,
    read_benchmark,
    run_benchmark,
    score_choice,
    write_benchmark,
)
from medtune.synthetic import rigged_model, synthetic_benchmark, tokenizer, uniform_model

TOK = tokenizer()
FAVORED = ord("a")


@pytest.fixture(scope="module")
def rigged():
    return rigged_model(FAVORED)


@pytest.fixture(scope="module")
def uniform():
    return uniform_model()


def test_rigged_choice_loglik_near_zero(rigged):
    s = score_choice(rigged, TOK, "Q?", "aaaa")
    assert s.n_tokens == 4
    assert -1e-6 < s.raw_loglik <= 0.0
    assert score_choice(rigged, TOK, "Q?", "abcd").raw_loglik < -80


@pytest.mark.parametrize("choice", ["x", "yes", "maybe not"])
def test_uniform_loglik_is_k_log_v(uniform, choice):
    s = score_choice(uniform, TOK, "Is it?", choice)
    k = len(choice.encode())
    assert s.raw_loglik == pytest.approx(-k * math.log(261), rel=1e-6)
    assert s.normalized_loglik == pytest.approx(-math.log(261), rel=1e-6)


def test_normalized_is_raw_over_bytes(rigged):
    s = score_choice(rigged, TOK, "Q?", "abcdefghij")
    assert s.normalized_loglik == pytest.approx(s.raw_loglik / 10)


def test_argmax_first():
    assert argmax_first([-1.2, -0.5, -3.0]) == (1, False)
    assert argmax_first([-2.0, -1.0, -1.0]) == (1, True)
    assert argmax_first([0.0, 0.0, 0.0, 0.0]) == (0, True)


def test_argmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(size=rng.integers(2, 6))
        c = float(rng.normal() * 10)
        assert argmax_first(list(s))[0] == argmax_first(list(s + c))[0]


def test_uniform_ties_recorded(uniform):
    item = BenchmarkItem("t", "Q", ("aaaa", "bbbb", "cccc"), 2, "medqa")
    res = evaluate_item(uniform, TOK, item)
    assert res.predicted == 0 and res.tie and not res.correct


def test_pubmedqa_three_way(rigged):
    item = BenchmarkItem("p", "Does X cause Y?", ("yes", "no", "maybe"), 2, "pubmedqa")
    res = evaluate_item(rigged, TOK, item, mode="normalized")
    assert len(res.scores) == 3
    # "maybe" holds the favoured byte once in five; "yes"/"no" never
    assert res.predicted == 2 and res.correct


def test_image_item_rejected(rigged):
    item = BenchmarkItem("i", "Look at the picture", ("a", "b"), 0, "medqa", has_image=True)
    with pytest.raises(ValueError):
        evaluate_item(rigged, TOK, item)


def test_rigged_model_scores_full_marks(rigged):
    items = synthetic_benchmark(50)
    rep = run_benchmark(rigged, TOK, items)
    assert set(rep.accuracy.values()) == {100.0}
    assert rep.mmlu_average == 100.0 and rep.usmle_average == 100.0
    assert not rep.absent
    assert "100.0" in format_table(rep)


def _result(i, bench, correct):
    return ItemResult(f"x{i}", bench, 0, 0 if correct else 1, correct)


def test_aggregate_arithmetic():
    rep = aggregate([_result(i, "medqa", i < 7) for i in range(10)], "raw")
    assert rep.accuracy["medqa"] == 70.0 and rep.counts["medqa"] == (7, 10)


def test_exclusions_applied_before_scoring(rigged):
    items = []
    for i in range(10):
        # items 0-1 excluded; of the other 8, six have the favoured answer as key
        answer = 0 if i < 8 else 1
        items.append(BenchmarkItem(f"h{i}", f"Q{i}", ("aaaa", "zzzz"), answer, "headqa"))
    rep = run_benchmark(rigged, TOK, items, exclusions={"h0", "h1"})
    assert rep.accuracy["headqa"] == 75.0
    assert rep.counts["headqa"] == (6, 8)
    assert rep.excluded == ["h0", "h1"]
    assert {r.id for r in rep.items} == {f"h{i}" for i in range(2, 10)}


def test_empty_benchmark_is_absent(rigged):
    items = [
        BenchmarkItem("a1", "Q", ("aaaa", "zzzz"), 0, "medqa"),
        BenchmarkItem("b1", "Q", ("aaaa", "zzzz"), 0, "headqa"),
        BenchmarkItem("b2", "Q", ("aaaa", "zzzz"), 0, "headqa", has_image=True),
    ]
    rep = run_benchmark(rigged, TOK, items, exclusions={"b1"})
    assert "headqa" not in rep.accuracy and rep.absent == ["headqa"]
    assert "headqa" in format_table(rep) and "absent" in format_table(rep)


def test_averages():
    topic_acc = [50, 60, 70, 80, 90, 100]
    results = []
    for t, acc in zip(MMLU_CLINICAL_TOPICS, topic_acc):
        results += [_result(f"{t}{i}", f"mmlu.{t}", i < acc // 10) for i in range(10)]
    results += [_result(f"s{i}", "usmle.self_assessment", i < 3) for i in range(4)]
    results += [_result(f"e{i}", "usmle.sample_exam", i < 1) for i in range(2)]
    rep = aggregate(results, "raw")
    assert rep.mmlu_average == pytest.approx(75.0)
    assert rep.usmle_average == pytest.approx((75.0 + 50.0) / 2)


def test_report_recomputes_from_item_log(rigged):
    items = synthetic_benchmark(40, seed=3)
    items[5] = BenchmarkItem(items[5].id, items[5].question, ("zzzz", "aaaa", "yyyy", "xxxx"), 0, items[5].benchmark)
    rep = run_benchmark(rigged, TOK, items)
    by_bench = {}
    for r in rep.items:
        assert r.correct == (int(np.argmax(r.scores)) == r.answer)
        by_bench.setdefault(r.benchmark, []).append(r.correct)
    assert {b: 100.0 * sum(v) / len(v) for b, v in by_bench.items()} == rep.accuracy
    assert rep.accuracy[items[5].benchmark] < 100.0


def test_context_overflow_skipped_and_recorded():
    small = rigged_model(FAVORED, context_length=128)
    items = [
        BenchmarkItem("ok", "Q", ("aaaa", "zzzz"), 0, "medqa"),
        BenchmarkItem("long", "Q" * 200, ("aaaa", "zzzz"), 0, "medqa"),
    ]
    rep = run_benchmark(small, TOK, items)
    skipped = [r for r in rep.items if r.skipped]
    assert [r.id for r in skipped] == ["long"] and "context" in skipped[0].skipped
    assert rep.counts["medqa"] == (1, 1)
    assert "1 item(s) skipped" in format_table(rep)


def test_determinism(uniform):
    items = synthetic_benchmark(12, seed=1)
    assert run_benchmark(uniform, TOK, items).to_dict() == run_benchmark(uniform, TOK, items).to_dict()


def test_benchmark_file_round_trip(tmp_path):
    items = synthetic_benchmark(9)
    write_benchmark(tmp_path / "b.jsonl", items)
    assert read_benchmark(tmp_path / "b.jsonl") == items
    (tmp_path / "bad.jsonl").write_text('{"id": 1, "question": "q", "choices": ["a", "b"], "answer": 5, "benchmark": "m"}\n')
    with pytest.raises(DataError) as err:
        read_benchmark(tmp_path / "bad.jsonl")
    assert err.value.line == 1
