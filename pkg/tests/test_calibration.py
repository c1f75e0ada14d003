import numpy as np
import pytest

from lingfuse.calibration import (
    CalibrationConfig,
    PredictionSet,
    ace,
    ece,
    ece_from_table,
    range_sizes,
    read_predictions_csv,
    reliability_table,
    summary,
    write_predictions_csv,
    write_reliability_csv,
)
from lingfuse.errors import DimensionError, ValidationError

from oracles import brute_ace, brute_ece, random_prediction_set


def hand_set():
    """Confidences 0.9, 0.8, 0.3 with the first two correct (K = 4 so 0.3 can be a maximum)."""
    probs = np.array([
        [0.9, 0.1, 0.0, 0.0],
        [0.2, 0.8, 0.0, 0.0],
        [0.3, 0.25, 0.25, 0.2],
    ])
    return PredictionSet.from_probs(probs, [0, 1, 2])


class TestPredictionSet:
    def test_argmax_ties_to_lowest(self):
        p = PredictionSet.from_probs([[0.5, 0.5], [0.25, 0.75]], [1, 1])
        np.testing.assert_array_equal(p.predicted_labels, [0, 1])
        np.testing.assert_array_equal(p.confidences, [0.5, 0.75])
        np.testing.assert_array_equal(p.correct, [False, True])

    @pytest.mark.parametrize("probs,labels,err", [
        ([[0.5, 0.6]], [0], ValidationError),
        ([[1.2, -0.2]], [0], ValidationError),
        ([[0.5, 0.5]], [2], ValidationError),
        ([[0.5, 0.5]], [0, 1], DimensionError),
        ([[1.0]], [0], DimensionError),
        ([[0.5, 0.5]], [0.5], ValidationError),
    ])
    def test_invalid(self, probs, labels, err):
        with pytest.raises(err):
            PredictionSet.from_probs(probs, labels)


class TestEce:
    def test_hand_example(self):
        value, bins = ece(hand_set(), CalibrationConfig(num_bins=2))
        assert value == pytest.approx(0.2, abs=1e-15)
        assert [b.count for b in bins] == [1, 2]
        assert bins[0].accuracy == 0.0 and bins[0].confidence == pytest.approx(0.3)
        assert bins[1].accuracy == 1.0 and bins[1].confidence == pytest.approx(0.85)

    def test_perfect_point_mass(self):
        p = PredictionSet.from_probs(np.eye(3)[[0, 2, 1, 1]], [0, 2, 1, 1])
        assert ece(p)[0] == 0.0

    def test_upper_edge_belongs_to_lower_bin(self):
        p = PredictionSet.from_probs([[0.5, 0.5], [0.0, 1.0]], [0, 1])
        _, bins = ece(p, CalibrationConfig(num_bins=2))
        assert [b.count for b in bins] == [1, 1]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            probs, labels = random_prediction_set(rng)
            m = int(rng.integers(1, 11))
            value = ece(PredictionSet.from_probs(probs, labels), CalibrationConfig(num_bins=m))[0]
            assert abs(value - brute_ece(probs, labels, m)) <= 1e-12
            assert 0.0 <= value <= 1.0

    def test_invariant_to_permutation_and_relabeling(self):
        rng = np.random.default_rng(1)
        probs, labels = rng.dirichlet(np.ones(4), size=40), rng.integers(4, size=40)
        base = ece(PredictionSet.from_probs(probs, labels))[0]
        perm = rng.permutation(40)
        assert ece(PredictionSet.from_probs(probs[perm], labels[perm]))[0] == pytest.approx(base, abs=1e-15)
        relabel = np.array([2, 0, 3, 1])
        swapped = np.empty_like(probs)
        swapped[:, relabel] = probs
        assert ece(PredictionSet.from_probs(swapped, relabel[labels]))[0] == pytest.approx(base, abs=1e-15)

    def test_calibrated_bins_give_zero(self):
        # bin (0.5, 1]: confidences 0.75 with three of four correct
        probs = np.array([[0.75, 0.25]] * 4)
        assert ece(PredictionSet.from_probs(probs, [0, 0, 0, 1]))[0] == 0.0


class TestAce:
    def test_uniform_calibrated(self):
        probs = np.full((20, 2), 0.5)
        labels = np.tile([0, 1], 10)
        assert ace(PredictionSet.from_probs(probs, labels), CalibrationConfig(num_ranges=5))[0] == 0.0

    def test_group_sizes(self):
        np.testing.assert_array_equal(range_sizes(10, 3), [3, 3, 4])
        np.testing.assert_array_equal(range_sizes(11, 4), [2, 3, 3, 3])
        for n in range(1, 60):
            for r in range(1, min(n, 10) + 1):
                sizes = range_sizes(n, r)
                assert sizes.sum() == n and sizes.max() - sizes.min() <= 1

    def test_returned_groups(self):
        rng = np.random.default_rng(2)
        p = PredictionSet.from_probs(rng.dirichlet(np.ones(3), size=23), rng.integers(3, size=23))
        _, per_class = ace(p, CalibrationConfig(num_ranges=4))
        assert len(per_class) == 3
        for groups in per_class:
            assert [g.count for g in groups] == [5, 6, 6, 6]
            assert all(groups[i].hi <= groups[i + 1].lo for i in range(3))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        probs, labels = rng.dirichlet(np.ones(3), size=30), rng.integers(3, size=30)
        base = ace(PredictionSet.from_probs(probs, labels))[0]
        perm = rng.permutation(30)
        assert ace(PredictionSet.from_probs(probs[perm], labels[perm]))[0] == pytest.approx(base, abs=1e-15)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 300:
            probs, labels = random_prediction_set(rng)
            r = int(rng.integers(1, 11))
            if len(labels) < r:
                continue
            value = ace(PredictionSet.from_probs(probs, labels), CalibrationConfig(num_ranges=r))[0]
            assert abs(value - brute_ace(probs, labels, r)) <= 1e-12
            assert 0.0 <= value <= 1.0
            checked += 1

    def test_needs_enough_predictions(self):
        with pytest.raises(ValidationError):
            ace(PredictionSet.from_probs([[0.5, 0.5]] * 3, [0, 1, 0]), CalibrationConfig(num_ranges=4))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            CalibrationConfig(num_bins=0)


class TestReliabilityTable:
    def test_single_bin(self):
        rng = np.random.default_rng(5)
        p = PredictionSet.from_probs(rng.dirichlet(np.ones(3), size=25), rng.integers(3, size=25))
        (row,) = reliability_table(p, CalibrationConfig(num_bins=1))
        assert (row.lo, row.hi, row.count) == (0.0, 1.0, 25)
        assert row.accuracy == pytest.approx(p.correct.mean(), abs=1e-15)
        assert row.confidence == pytest.approx(p.confidences.mean(), abs=1e-15)

    def test_counts_and_consistency(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            probs, labels = random_prediction_set(rng)
            p = PredictionSet.from_probs(probs, labels)
            rows = reliability_table(p, CalibrationConfig(num_bins=7))
            assert sum(r.count for r in rows) == p.n
            assert abs(ece_from_table(rows) - ece(p, CalibrationConfig(num_bins=7))[0]) <= 1e-12

    def test_csv(self, tmp_path):
        path = tmp_path / "rel.csv"
        write_reliability_csv(path, reliability_table(hand_set(), CalibrationConfig(num_bins=2)))
        lines = path.read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,accuracy,confidence"
        assert lines[1].startswith("0.0,0.5,1,0.0,")
        assert len(lines) == 3


class TestPredictionFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        p = PredictionSet.from_probs(rng.dirichlet(np.ones(3), size=12), rng.integers(3, size=12))
        path = tmp_path / "preds.csv"
        write_predictions_csv(path, [f"x{i}" for i in range(12)], p)
        ids, back = read_predictions_csv(path)
        assert ids[0] == "x0" and len(ids) == 12
        assert back.probs.tobytes() == p.probs.tobytes()
        np.testing.assert_array_equal(back.true_labels, p.true_labels)

    @pytest.mark.parametrize("body", [
        "id,label,p0,p1\na,0,0.5,0.5\n",
        "id,true_label,p0,p2\na,0,0.5,0.5\n",
        "id,true_label,p0,p1\na,zero,0.5,0.5\n",
        "id,true_label,p0,p1\n",
        "id,true_label,p0,p1\na,0,0.6,0.6\n",
    ])
    def test_malformed(self, tmp_path, body):
        path = tmp_path / "preds.csv"
        path.write_text(body)
        with pytest.raises(ValidationError):
            read_predictions_csv(path)

    def test_summary_fields(self):
        s = summary(hand_set(), CalibrationConfig(2, 3))
        assert set(s) == {"ece", "ace", "M", "R", "N", "K"}
        assert (s["M"], s["R"], s["N"], s["K"]) == (2, 3, 3, 4)
