import numpy as np
import pytest

from detcal.errors import (
    DataError,
    DimensionalityError,
    EmptyMetricError,
    UsageError,
    ValidationError,
)
from detcal.features import FeatureSet
from detcal.metrics import (
    BinningSpec,
    bin_index,
    bin_indices,
    binned_stats,
    compute_d_ece,
    default_eval_spec,
    heatmap,
    reliability_curve,
    require_dimensionality_match,
)
from oracles import brute_force_dece, classification_ece, make_sample, random_matched_samples

CONF = FeatureSet(members=("confidence",))
FULL = FeatureSet(members=("confidence", "cx", "cy", "w", "h"))


def four_sample_dataset():
    return [
        make_sample(0.9, True),
        make_sample(0.9, False),
        make_sample(0.1, False),
        make_sample(0.1, False),
    ]


class TestBinIndex:
    def test_zero(self):
        assert bin_index(0.0, 10) == 0

    def test_right_edge_goes_to_top_bin(self):
        assert bin_index(1.0, 10) == 9

    def test_interior(self):
        assert bin_index(0.55, 10) == 5

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            bin_index(-0.1, 10)
        with pytest.raises(UsageError):
            bin_index(1.1, 10)

    def test_bad_bin_count(self):
        with pytest.raises(UsageError):
            bin_index(0.5, 0)

    def test_vectorized_agrees_with_scalar(self):
        rng = np.random.default_rng(0)
        values = rng.random(1000)
        values[:5] = [0.0, 1.0, 0.5, 0.999999, 1e-9]
        for n in (1, 2, 7, 20):
            assert bin_indices(values, n).tolist() == [bin_index(v, n) for v in values]


class TestBinningSpec:
    def test_total_bins(self):
        spec = BinningSpec(dims=("confidence", "cx"), counts=(4, 5), min_samples=0)
        assert spec.total_bins == 20

    def test_validation(self):
        with pytest.raises(ValidationError):
            BinningSpec(dims=(), counts=())
        with pytest.raises(ValidationError):
            BinningSpec(dims=("confidence",), counts=(0,))
        with pytest.raises(ValidationError):
            BinningSpec(dims=("confidence",), counts=(2, 3))
        with pytest.raises(ValidationError):
            BinningSpec(dims=("confidence",), counts=(2,), min_samples=-1)
        with pytest.raises(ValidationError):
            BinningSpec(dims=("confidence", "confidence"), counts=(2, 2))

    def test_default_eval_spec(self):
        assert default_eval_spec(("confidence",)).counts == (20,)
        assert default_eval_spec(("confidence", "cx", "cy")).counts == (8, 8, 8)
        assert default_eval_spec(("confidence", "cx", "cy", "w", "h")).counts == (5,) * 5
        with pytest.raises(UsageError):
            default_eval_spec(("confidence", "cx"))


class TestComputeDece:
    def test_perfectly_calibrated_is_zero(self):
        # Each bin's mean score equals its empirical precision exactly.
        samples = (
            [make_sample(0.75, True)] * 3
            + [make_sample(0.75, False)]
            + [make_sample(0.25, True)]
            + [make_sample(0.25, False)] * 3
        )
        spec = BinningSpec(dims=("confidence",), counts=(2,), min_samples=0)
        value, _ = compute_d_ece(samples, CONF, spec)
        assert value == 0.0

    def test_four_sample_hand_example(self):
        spec = BinningSpec(dims=("confidence",), counts=(2,), min_samples=0)
        value, stats = compute_d_ece(four_sample_dataset(), CONF, spec)
        assert value == pytest.approx(0.25, abs=1e-15)
        assert stats.bin_counts.tolist() == [2, 2]

    def test_matches_brute_force_on_random_datasets(self):
        rng = np.random.default_rng(42)
        members = ("confidence", "cx", "cy", "w", "h")
        for trial in range(30):
            n = int(rng.integers(30, 800))
            samples = random_matched_samples(rng, n)
            k = int(rng.integers(1, 6))
            dims = members[:k]
            counts = tuple(int(c) for c in rng.integers(1, 9, k))
            min_samples = int(rng.choice([0, 1, 4, 8]))
            renorm = bool(trial % 2)
            spec = BinningSpec(dims=dims, counts=counts, min_samples=min_samples)
            expected = brute_force_dece(samples, dims, counts, min_samples, renorm)
            if expected is None:
                with pytest.raises(EmptyMetricError):
                    compute_d_ece(samples, FULL, spec, renormalize=renorm)
                continue
            value, _ = compute_d_ece(samples, FULL, spec, renormalize=renorm)
            assert abs(value - expected) <= 1e-12

    def test_reduces_to_classification_ece(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            samples = random_matched_samples(rng, int(rng.integers(20, 500)))
            n_bins = int(rng.integers(2, 30))
            spec = BinningSpec(dims=("confidence",), counts=(n_bins,), min_samples=0)
            value, _ = compute_d_ece(samples, CONF, spec)
            expected = classification_ece(
                [s.detection.score for s in samples], [s.matched for s in samples], n_bins
            )
            assert value == expected

    def test_value_always_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            samples = random_matched_samples(rng, 200)
            spec = BinningSpec(dims=("confidence", "w"), counts=(5, 4), min_samples=0)
            value, _ = compute_d_ece(samples, FULL, spec)
            assert 0.0 <= value <= 1.0

    def test_weights_sum_to_one_without_threshold(self):
        rng = np.random.default_rng(4)
        samples = random_matched_samples(rng, 300)
        spec = BinningSpec(dims=("confidence",), counts=(10,), min_samples=0)
        _, stats = compute_d_ece(samples, CONF, spec)
        assert stats.retained_samples == stats.total_samples == 300

    def test_min_samples_drops_and_renormalizes(self):
        samples = [make_sample(0.1, False)] * 9 + [make_sample(0.9, True)]
        spec = BinningSpec(dims=("confidence",), counts=(2,), min_samples=5)
        value, stats = compute_d_ece(samples, CONF, spec)
        assert stats.retained_samples == 9 and stats.dropped_bins == 1
        assert value == pytest.approx(0.1, abs=1e-15)
        value_raw, _ = compute_d_ece(samples, CONF, spec, renormalize=False)
        assert value_raw == pytest.approx(0.09, abs=1e-15)

    def test_all_bins_dropped_raises_with_histogram(self):
        samples = [make_sample(0.2, False), make_sample(0.8, True)]
        spec = BinningSpec(dims=("confidence",), counts=(2,), min_samples=5)
        with pytest.raises(EmptyMetricError) as excinfo:
            compute_d_ece(samples, CONF, spec)
        assert excinfo.value.bin_histogram == {1: 2}

    def test_dims_must_be_subset_of_feature_set(self):
        spec = BinningSpec(dims=("confidence", "cx"), counts=(2, 2), min_samples=0)
        with pytest.raises(UsageError):
            compute_d_ece(four_sample_dataset(), CONF, spec)

    def test_empty_samples_rejected(self):
        spec = BinningSpec(dims=("confidence",), counts=(2,), min_samples=0)
        with pytest.raises(DataError):
            compute_d_ece([], CONF, spec)


class TestReliabilityCurve:
    def test_all_ones_matched(self):
        samples = [make_sample(1.0, True)] * 5
        assert reliability_curve(samples, CONF, 10) == [(1.0, 1.0, 5)]

    def test_all_ones_unmatched(self):
        samples = [make_sample(1.0, False)] * 5
        assert reliability_curve(samples, CONF, 10) == [(1.0, 0.0, 5)]

    def test_four_sample_example(self):
        curve = reliability_curve(four_sample_dataset(), CONF, 2)
        assert curve == [
            (pytest.approx(0.1), pytest.approx(0.0), 2),
            (pytest.approx(0.9), pytest.approx(0.5), 2),
        ]


class TestHeatmap:
    def _spec(self, min_samples=0):
        return BinningSpec(
            dims=("confidence", "cx", "cy"), counts=(4, 5, 5), min_samples=min_samples
        )

    def test_perfectly_calibrated_grid_is_zero(self):
        rng = np.random.default_rng(5)
        samples = []
        for _ in range(400):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            samples.append(make_sample(1.0, True, box=(cx, cy, 0.1, 0.1)))
        grid = heatmap(samples, FULL, self._spec(), ("cx", "cy"))
        occupied = grid.count > 0
        assert np.all(grid.contrib[occupied] == 0.0)

    def test_miscalibration_localized_to_right_half(self):
        rng = np.random.default_rng(6)
        samples = []
        for _ in range(4000):
            cx, cy = rng.uniform(0.05, 0.95, 2)
            score = 0.8
            matched = rng.random() < (0.8 if cx <= 0.5 else 0.3)
            samples.append(make_sample(score, matched, box=(cx, cy, 0.05, 0.05)))
        grid = heatmap(samples, FULL, self._spec(), ("cx", "cy"))
        left = np.nanmean(grid.contrib[:2, :])
        right = np.nanmean(grid.contrib[3:, :])
        assert left < 0.1 and right > 0.3

    def test_marginalization_conserves_mass(self):
        rng = np.random.default_rng(8)
        samples = random_matched_samples(rng, 2000)
        spec = self._spec(min_samples=3)
        value, stats = compute_d_ece(samples, FULL, spec)
        grid = heatmap(samples, FULL, spec, ("cx", "cy"))
        assert grid.count.sum() == stats.retained_samples
        occupied = grid.count > 0
        total = float(
            np.sum(grid.contrib[occupied] * grid.count[occupied] / grid.retained_samples)
        )
        assert abs(total - value) <= 1e-12

    def test_axes_validation(self):
        samples = random_matched_samples(np.random.default_rng(9), 50)
        with pytest.raises(UsageError):
            heatmap(samples, FULL, self._spec(), ("cx",))
        with pytest.raises(UsageError):
            heatmap(samples, FULL, self._spec(), ("cx", "w"))

    def test_rows_enumerate_occupied_cells(self):
        samples = random_matched_samples(np.random.default_rng(10), 500)
        grid = heatmap(samples, FULL, self._spec(), ("cx", "cy"))
        rows = list(grid.rows())
        assert sum(r[3] for r in rows) == grid.retained_samples
        assert all(0.0 <= r[2] <= 1.0 for r in rows)


class TestDimensionalityRule:
    def test_lower_dimensional_evaluation_refused(self):
        with pytest.raises(DimensionalityError):
            require_dimensionality_match(("confidence", "cx", "cy"), ("confidence",))
        with pytest.raises(DimensionalityError):
            require_dimensionality_match(("confidence", "w", "h"), ("confidence", "cx", "cy"))

    def test_equal_or_higher_dimensional_allowed(self):
        require_dimensionality_match(("confidence",), ("confidence",))
        require_dimensionality_match(("confidence",), ("confidence", "cx", "cy"))
        require_dimensionality_match(
            ("confidence", "cx", "cy"), ("confidence", "cx", "cy", "w", "h")
        )


class TestBinnedStats:
    def test_counts_sum_to_total(self):
        rng = np.random.default_rng(11)
        samples = random_matched_samples(rng, 700)
        spec = BinningSpec(dims=("confidence", "h"), counts=(6, 4), min_samples=0)
        stats = binned_stats(samples, spec)
        assert stats.bin_counts.sum() == 700
        assert np.all((stats.prec >= 0) & (stats.prec <= 1))
        assert np.all((stats.conf >= 0) & (stats.conf <= 1))
