import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beef.metrics import (
    MetricReport,
    accuracy,
    average_precision,
    bleu4,
    cider_d,
    corpus_bleu4,
    mae,
    mean_ap,
    mse,
    per_class_ap,
    spearman,
)


def brute_force_ap(scores, labels):
    """Precision at each positive's rank; stable descending order breaks ties."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions, hits = [], 0
    for rank, i in enumerate(idx, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else None


def ap_instances(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        size = int(rng.integers(1, 40))
        scores = np.round(rng.random(size), int(rng.integers(1, 4)))
        labels = rng.random(size) < rng.random()
        yield scores, labels


def hand_bleu_unsmoothed(hyp, ref):
    """Clipped n-gram precision by explicit enumeration, single reference."""
    hyp, ref = hyp.split(), ref.split()
    logs = 0.0
    for n in range(1, 5):
        hg = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        matched = sum(min(hg.count(g), rg.count(g)) for g in set(hg))
        logs += math.log(matched / len(hg)) / 4
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return bp * math.exp(logs)


class TestAveragePrecision:
    def test_brute_force_1000(self):
        worst = 0.0
        for scores, labels in ap_instances(1000):
            want = brute_force_ap(list(scores), list(labels))
            got = average_precision(scores, labels)
            if want is None:
                assert got is None
            else:
                worst = max(worst, abs(got - want))
        assert worst < 1e-9

    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_worst_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [0, 0, 1]) == pytest.approx(1 / 3)

    def test_no_positive_skipped(self):
        assert average_precision([0.1, 0.2], [0, 0]) is None

    def test_ties_keep_original_order(self):
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0

    @given(st.integers(0, 10_000))
    def test_bounded_and_monotone_invariant(self, seed):
        rng = np.random.default_rng(seed)
        s, y = rng.random(20), rng.random(20) < 0.3
        y[0] = True
        ap = average_precision(s, y)
        assert 0 < ap <= 1
        assert average_precision(np.exp(3 * s), y) == pytest.approx(ap, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            average_precision([0.1, 0.2], [1])
        with pytest.raises(ValueError):
            average_precision([np.nan], [1])

    def test_per_class_and_mean(self):
        scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
        labels = np.array([0, 1, 0])
        aps = per_class_ap(scores, labels, [0, 1, 2], names=["a", "b", "c"])
        assert aps == {"a": 1.0, "b": 1.0, "c": None}
        assert mean_ap(aps) == 1.0
        with pytest.raises(ValueError):
            mean_ap({"c": None})


class TestBleu:
    def test_identity(self):
        assert bleu4("because the light is red", ["because the light is red"]) == 1.0

    def test_one_word_substitution(self):
        got = bleu4("because the light is red", ["since the light is red"])
        want = hand_bleu_unsmoothed("because the light is red", "since the light is red")
        assert got == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx((4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25, abs=1e-12)
        assert round(got, 4) == 0.6687

    def test_empty_hypothesis(self):
        assert bleu4("", ["the light is red"]) == 0.0

    def test_brevity_penalty(self):
        got = bleu4("the light is red", ["the light is red now"])
        assert got == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)

    def test_smoothing_keeps_partial_credit(self):
        assert 0 < bleu4("red light", ["the light is red"]) < 0.5

    def test_clipping(self):
        assert bleu4("the the the the", ["the light is red"]) < bleu4("the light is red", ["the light is red"])

    def test_needs_reference(self):
        with pytest.raises(ValueError):
            bleu4("a", [])

    @given(st.permutations(list(range(4))))
    def test_corpus_permutation_invariant(self, perm):
        hyps = ["the light is red", "a car crosses the road", "stop sign", "traffic is slow ahead now"]
        refs = [["the light is red"], ["a car is crossing the road"], ["there is a stop sign"], ["traffic is slow"]]
        base = corpus_bleu4(hyps, refs)
        assert corpus_bleu4([hyps[i] for i in perm], [refs[i] for i in perm]) == pytest.approx(base, abs=1e-15)
        assert 0 <= base <= 1

    def test_removing_matching_4gram_does_not_increase(self):
        ref = ["we stop because the light is red"]
        assert bleu4("we stop because the light is", ref) <= bleu4("we stop because the light is red", ref)

    def test_corpus_identity(self):
        assert corpus_bleu4(["a b c d"], [["a b c d"]]) == 1.0
        with pytest.raises(ValueError):
            corpus_bleu4(["a"], [])


class TestCider:
    REFS = [["we stop because the light is red"], ["a car is crossing the road"], ["slow down for the parked truck"]]

    def test_identity_unique_reference(self):
        hyps = [r[0] for r in self.REFS]
        assert cider_d(hyps, self.REFS) == pytest.approx(10.0, abs=1e-9)

    def test_disjoint_is_zero(self):
        assert cider_d(["zebra zebra zebra zebra"] * 3, self.REFS) == 0.0

    def test_length_gap_penalized(self):
        hyps = ["we stop because the light is red and we wait"] + [r[0] for r in self.REFS[1:]]
        assert cider_d(hyps, self.REFS) < 10.0

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            cider_d([], [])


class TestSpearman:
    def test_identical(self):
        assert spearman([3, 1, 2, 5], [3, 1, 2, 5]) == pytest.approx(1.0)

    def test_reversed(self):
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_swap_oracle(self):
        x, y = [1, 2, 3], [1, 3, 2]
        n = 3
        d2 = sum((a - b) ** 2 for a, b in zip(x, y))
        assert spearman(x, y) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12) == 0.5

    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=12, unique=True))
    def test_monotone_transform_invariant(self, xs):
        y = np.random.default_rng(len(xs)).permutation(len(xs)).astype(float)
        a = spearman(xs, y)
        assert spearman(np.asarray(xs, dtype=float) ** 3 + 5, y) == pytest.approx(a, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1], [1])


class TestRegression:
    def test_mse_mae(self):
        assert mse(np.zeros(4), np.ones(4)) == 1.0
        assert mae([0, 0], [1, -3]) == 2.0
        with pytest.raises(ValueError):
            mse([1], [1, 2])

    def test_accuracy(self):
        assert accuracy([[0.9, 0.1], [0.3, 0.7]], [0, 0]) == 0.5
        with pytest.raises(ValueError):
            accuracy(np.zeros((0, 2)), [])


class TestMetricReport:
    def test_json_roundtrip(self):
        r = MetricReport(per_class_ap={"red_light": 0.5, "stop_sign": None}, mAP=0.5, drive_mse=0.25)
        d = json.loads(r.to_json())
        assert d["meteor"] is None
        assert MetricReport.from_dict(d) == r

    def test_csv(self):
        r = MetricReport(per_class_ap={"a": 0.25, "b": None}, mAP=0.25)
        assert r.to_csv() == "class,ap\na,0.25\nb,\n"

    def test_validation(self):
        with pytest.raises(ValueError):
            MetricReport(mAP=1.5)
        with pytest.raises(ValueError):
            MetricReport(drive_mse=float("nan"))
