import math

import numpy as np
import pytest

from detcal import calibrators, synth
from detcal.calibrators import (
    BetaDepParams,
    BetaIndepParams,
    CalibrationModel,
    FitMetadata,
    HistBinningParams,
    LogisticDepParams,
    LogisticIndepParams,
    apply,
    fit,
    fit_hist_binning,
    fit_parametric,
    fit_per_class,
    identity_theta,
    load_model,
    loglik_ratio,
    model_from_json,
    model_to_json,
    nll_objective,
    pack_params,
    save_model,
    theta_size,
    unpack_params,
)
from detcal.errors import (
    DegenerateDataError,
    UnsupportedOperationError,
    UsageError,
    ValidationError,
)
from detcal.features import FeatureSet, build_feature_matrix, labels
from oracles import (
    generalized_beta_log_density,
    log_multivariate_beta,
    make_sample,
    random_matched_samples,
)


def logit_fs(members=("confidence",)):
    return FeatureSet(members=members, confidence_encoding="logit")


def prob_fs(members=("confidence",)):
    return FeatureSet(members=members, confidence_encoding="probability")


def four_sample_dataset():
    return [
        make_sample(0.9, True),
        make_sample(0.9, False),
        make_sample(0.1, False),
        make_sample(0.1, False),
    ]


class TestLogLikRatio:
    def test_zero_parameters_give_zero(self):
        model = CalibrationModel(
            "logistic_indep", logit_fs(), LogisticIndepParams(w=np.zeros(1), c=0.0)
        )
        assert loglik_ratio(model, np.array([3.7])) == 0.0

    def test_unit_weight_is_identity_calibration(self):
        model = CalibrationModel(
            "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
        )
        for p in (0.2, 0.5, 0.9):
            z = math.log(p / (1 - p))
            assert loglik_ratio(model, np.array([z])) == pytest.approx(z, abs=1e-15)
        samples = [make_sample(p, True) for p in (0.2, 0.5, 0.9)]
        q = apply(model, samples)
        assert np.max(np.abs(q - [0.2, 0.5, 0.9])) < 1e-12

    def test_beta_indep_symmetric_point(self):
        model = CalibrationModel(
            "beta_indep", prob_fs(), BetaIndepParams(a=np.ones(1), b=np.ones(1), c=0.0)
        )
        assert loglik_ratio(model, np.array([0.5])) == pytest.approx(0.0, abs=1e-15)

    def test_hist_binning_unsupported(self):
        model = fit_hist_binning(four_sample_dataset(), ("confidence",), 2)
        with pytest.raises(UnsupportedOperationError):
            loglik_ratio(model, np.array([0.5]))

    def test_dimension_mismatch(self):
        model = CalibrationModel(
            "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
        )
        with pytest.raises(UsageError):
            loglik_ratio(model, np.array([0.5, 0.5]))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        params = LogisticDepParams(
            mu_pos=rng.normal(size=3),
            mu_neg=rng.normal(size=3),
            vinv_pos=rng.normal(size=(3, 3)),
            vinv_neg=rng.normal(size=(3, 3)),
            c=0.3,
        )
        model = CalibrationModel("logistic_dep", logit_fs(("confidence", "cx", "cy")), params)
        batch = rng.normal(size=(10, 3))
        z = loglik_ratio(model, batch)
        assert z.shape == (10,)
        for i in range(10):
            assert loglik_ratio(model, batch[i]) == pytest.approx(float(z[i]), abs=1e-12)


class TestApply:
    def test_sigmoid_of_zero(self):
        model = CalibrationModel(
            "logistic_indep", logit_fs(), LogisticIndepParams(w=np.zeros(1), c=0.0)
        )
        q = apply(model, [make_sample(0.3, True)])
        assert q[0] == 0.5

    def test_hist_binning_returns_stored_precision(self):
        samples = [make_sample(0.9, True), make_sample(0.9, True), make_sample(0.1, False)]
        model = fit_hist_binning(samples, ("confidence",), 2)
        q = apply(model, [make_sample(0.85, False)])
        assert q[0] == 1.0

    def test_logistic_dep_symmetric_classes_give_half(self):
        rng = np.random.default_rng(1)
        mu = rng.normal(size=3)
        vinv = rng.normal(size=(3, 3))
        params = LogisticDepParams(mu_pos=mu, mu_neg=mu, vinv_pos=vinv, vinv_neg=vinv, c=0.0)
        model = CalibrationModel("logistic_dep", logit_fs(("confidence", "cx", "cy")), params)
        samples = random_matched_samples(rng, 50)
        q = apply(model, samples)
        assert np.max(np.abs(q - 0.5)) < 1e-12

    def test_output_range_for_all_methods(self):
        samples = synth.generate(synth.make_scenario("uniform_overconfident", 10000, seed=2))
        probe = random_matched_samples(np.random.default_rng(3), 100)
        for method in calibrators.METHODS:
            model = fit(method, samples, ("confidence", "cx", "cy"))
            q = apply(model, probe)
            assert q.shape == (100,)
            assert np.all((q >= 0.0) & (q <= 1.0))


class TestParameterCounts:
    @pytest.mark.parametrize("k,members", [
        (1, ("confidence",)),
        (3, ("confidence", "cx", "cy")),
        (5, ("confidence", "cx", "cy", "w", "h")),
    ])
    def test_formulas(self, k, members):
        samples = synth.generate(synth.make_scenario("perfectly_calibrated", 20000, seed=4))
        expected = {
            "logistic_indep": k + 1,
            "beta_indep": 2 * k + 1,
            "logistic_dep": 2 * (k * k + k) + 1,
            "beta_dep": 4 * (k + 1) + 1,
        }
        for method, count in expected.items():
            model = fit_parametric(method, samples, members)
            assert model.n_params == count
            assert theta_size(method, k) == count
            assert pack_params(method, model.params).size == count

    def test_hist_binning_table_size(self):
        samples = random_matched_samples(np.random.default_rng(5), 200)
        model = fit_hist_binning(samples, ("confidence", "cx", "cy"), (3, 4, 5))
        assert model.n_params == 60


class TestPackUnpack:
    @pytest.mark.parametrize("method", calibrators.PARAMETRIC_METHODS)
    @pytest.mark.parametrize("k", [1, 3])
    def test_round_trip(self, method, k):
        rng = np.random.default_rng(6)
        theta = identity_theta(method, k) + rng.uniform(-0.5, 0.5, theta_size(method, k))
        params = unpack_params(method, theta, k)
        theta2 = pack_params(method, params)
        assert np.allclose(theta, theta2, atol=1e-12)

    def test_wrong_length_rejected(self):
        with pytest.raises(UsageError):
            unpack_params("logistic_indep", np.zeros(5), 1)


class TestDependentReducesToIndependent:
    def test_diagonal_equal_means_match_logistic_indep(self):
        k = 3
        d = np.array([1.3, 0.7, 2.0])
        mu_shared = np.array([0.0, 0.4, -0.2])
        delta = 0.8  # confidence-dimension mean separation
        mu_pos = mu_shared.copy()
        mu_neg = mu_shared.copy()
        mu_pos[0] += delta / 2
        mu_neg[0] -= delta / 2
        vinv = np.diag(np.sqrt(d))
        c = 0.25
        dep = CalibrationModel(
            "logistic_dep",
            logit_fs(("confidence", "cx", "cy")),
            LogisticDepParams(mu_pos=mu_pos, mu_neg=mu_neg, vinv_pos=vinv, vinv_neg=vinv, c=c),
        )
        # z = sum_k d_k (mu+_k - mu-_k) s_k + 0.5 sum_k d_k (mu-_k^2 - mu+_k^2) + c
        w_eff = d * (mu_pos - mu_neg)
        c_eff = 0.5 * float(d @ (mu_neg**2 - mu_pos**2)) + c
        indep = CalibrationModel(
            "logistic_indep",
            logit_fs(("confidence", "cx", "cy")),
            LogisticIndepParams(w=w_eff, c=c_eff),
        )
        rng = np.random.default_rng(7)
        probe = random_matched_samples(rng, 200)
        assert np.max(np.abs(apply(dep, probe) - apply(indep, probe))) < 1e-9


class TestGeneralizedBetaConsistency:
    def test_llr_matches_direct_density_ratio(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            k = int(rng.integers(1, 6))
            alpha_pos = rng.uniform(0.2, 5.0, k + 1)
            beta_pos = rng.uniform(0.2, 5.0, k + 1)
            alpha_neg = rng.uniform(0.2, 5.0, k + 1)
            beta_neg = rng.uniform(0.2, 5.0, k + 1)
            c_tied = log_multivariate_beta(alpha_neg) - log_multivariate_beta(alpha_pos)
            params = BetaDepParams(
                alpha_pos=alpha_pos,
                beta_pos=beta_pos,
                alpha_neg=alpha_neg,
                beta_neg=beta_neg,
                c=c_tied,
            )
            members = ("confidence", "cx", "cy", "w", "h")[:k]
            model = CalibrationModel("beta_dep", prob_fs(members), params)
            s = rng.uniform(0.05, 0.95, k)
            direct = generalized_beta_log_density(
                s, alpha_pos, beta_pos
            ) - generalized_beta_log_density(s, alpha_neg, beta_neg)
            assert abs(loglik_ratio(model, s) - direct) < 1e-9


class TestHistBinning:
    def test_all_matched_stores_ones(self):
        samples = [make_sample(p, True) for p in (0.1, 0.5, 0.9)]
        model = fit_hist_binning(samples, ("confidence",), 4)
        table = model.params.tables[-1]
        assert np.all(table[np.isfinite(table)] == 1.0)

    def test_four_sample_cells(self):
        model = fit_hist_binning(four_sample_dataset(), ("confidence",), 2)
        table = model.params.tables[-1]
        assert table[0] == 0.0 and table[1] == 0.5

    def test_idempotent_on_well_separated_cells(self):
        from dataclasses import replace

        samples = (
            [make_sample(0.05, False)] * 9 + [make_sample(0.05, True)]
            + [make_sample(0.55, True)] * 5 + [make_sample(0.55, False)] * 5
            + [make_sample(0.95, True)] * 9 + [make_sample(0.95, False)]
        )
        model = fit_hist_binning(samples, ("confidence",), 10)
        q1 = apply(model, samples)
        calibrated = [
            replace(s, detection=replace(s.detection, score=float(v)))
            for s, v in zip(samples, q1)
        ]
        model2 = fit_hist_binning(calibrated, ("confidence",), 10)
        q2 = apply(model2, calibrated)
        assert np.array_equal(q1, q2)

    def test_fallback_chain_descends_to_marginals(self):
        # Train occupies only the low-cx cell; a high-cx probe must fall back
        # to the confidence-marginal table.
        samples = [make_sample(0.9, True, box=(0.2, 0.5, 0.1, 0.1)) for _ in range(4)]
        samples += [make_sample(0.9, False, box=(0.2, 0.5, 0.1, 0.1))]
        model = fit_hist_binning(samples, ("confidence", "cx"), (2, 2))
        probe = [make_sample(0.9, False, box=(0.8, 0.5, 0.1, 0.1))]
        assert apply(model, probe)[0] == 0.8

    def test_fallback_reaches_global_precision(self):
        samples = [make_sample(0.9, True), make_sample(0.9, True), make_sample(0.9, False)]
        model = fit_hist_binning(samples, ("confidence",), 4)
        probe = [make_sample(0.1, False)]
        assert apply(model, probe)[0] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_default_bin_counts_by_dimension(self):
        rng = np.random.default_rng(9)
        samples = random_matched_samples(rng, 300)
        assert fit_hist_binning(samples, ("confidence",)).params.bin_counts == (15,)
        assert fit_hist_binning(samples, ("confidence", "cx", "cy")).params.bin_counts == (5, 5, 5)
        full = ("confidence", "cx", "cy", "w", "h")
        assert fit_hist_binning(samples, full).params.bin_counts == (3, 3, 3, 3, 3)

    def test_empty_input_rejected(self):
        from detcal.errors import DataError

        with pytest.raises(DataError):
            fit_hist_binning([], ("confidence",), 4)


class TestFitParametric:
    def test_single_label_data_rejected(self):
        samples = [make_sample(0.5, True)] * 10
        with pytest.raises(DegenerateDataError):
            fit_parametric("logistic_indep", samples, ("confidence",))

    def test_unknown_method_rejected(self):
        with pytest.raises(UsageError):
            fit_parametric("isotonic", four_sample_dataset(), ("confidence",))

    def test_fit_metadata_populated(self):
        rng = np.random.default_rng(10)
        samples = random_matched_samples(rng, 500, extreme_scores=False)
        model = fit_parametric("logistic_indep", samples, ("confidence",))
        meta = model.fit_metadata
        assert meta.n_samples == 500
        assert meta.converged and meta.n_iterations > 0
        assert meta.final_nll is not None and math.isfinite(meta.final_nll)

    @pytest.mark.parametrize("method", calibrators.PARAMETRIC_METHODS)
    def test_nll_no_worse_than_identity_map(self, method):
        for seed, scenario in ((0, "fig3_boundary_decay"), (1, "uniform_overconfident")):
            samples = synth.generate(synth.make_scenario(scenario, 10000, seed=seed))
            members = ("confidence", "cx", "cy")
            model = fit_parametric(method, samples, members)
            fs = model.feature_set
            x = build_feature_matrix(samples, fs)
            m = labels(samples)
            objective = nll_objective(method, x, m)
            identity_value, _ = objective(identity_theta(method, 3))
            assert model.fit_metadata.final_nll <= identity_value + 1e-12

    def test_monotone_in_confidence_with_positive_params(self):
        # Guaranteed at the parameter level for independent beta (a[0], b[0]
        # positive) and for logistic maps with positive confidence weight.
        # The generalized-beta ratio carries no such guarantee, so the
        # dependent variant is deliberately absent here.
        samples = synth.generate(synth.make_scenario("fig3_boundary_decay", 10000, seed=12))
        grid = np.linspace(0.01, 0.99, 99)
        for method in ("beta_indep", "logistic_indep"):
            model = fit_parametric(method, samples, ("confidence", "cx", "cy"))
            if method == "logistic_indep" and model.params.w[0] <= 0:
                continue
            probes = [make_sample(p, False, box=(0.4, 0.6, 0.2, 0.2)) for p in grid]
            q = apply(model, probes)
            assert np.all(np.diff(q) >= -1e-9)

    def test_near_identity_on_perfectly_calibrated_scores(self):
        rng = np.random.default_rng(21)
        scores = rng.uniform(0.05, 0.95, 50000)
        samples = [
            make_sample(s, bool(rng.random() < s), gt_index=i) for i, s in enumerate(scores)
        ]
        model = fit_parametric("logistic_indep", samples, ("confidence",))
        grid = np.arange(0.01, 1.0, 0.01)
        q = apply(model, [make_sample(p, False) for p in grid])
        assert np.max(np.abs(q - grid)) < 0.02

    def test_beta_constraint_activation_keeps_map_monotone(self):
        # Anti-calibrated data pushes the unconstrained optimum to a
        # decreasing map; the constrained fit must stay (weakly) increasing.
        rng = np.random.default_rng(13)
        scores = rng.uniform(0.05, 0.95, 3000)
        samples = [
            make_sample(s, bool(rng.random() < (1.0 - s)), gt_index=i)
            for i, s in enumerate(scores)
        ]
        model = fit_parametric("beta_indep", samples, ("confidence",))
        assert model.params.a[0] > 1e-8 and model.params.b[0] > 1e-8
        assert model.params.a[0] < 1e-3 and model.params.b[0] < 1e-3
        grid = np.linspace(0.01, 0.99, 99)
        q = apply(model, [make_sample(p, False) for p in grid])
        assert np.all(np.diff(q) >= -1e-9)

    def test_fit_dispatch(self):
        rng = np.random.default_rng(14)
        samples = random_matched_samples(rng, 300, extreme_scores=False)
        assert fit("hist_binning", samples, ("confidence",)).method == "hist_binning"
        assert fit("logistic_indep", samples, ("confidence",)).method == "logistic_indep"

    def test_fit_per_class(self):
        rng = np.random.default_rng(15)
        samples = random_matched_samples(rng, 400, extreme_scores=False)
        from dataclasses import replace

        samples = [
            replace(s, detection=replace(s.detection, category_id=1 + (i % 2)))
            for i, s in enumerate(samples)
        ]
        models = fit_per_class("logistic_indep", samples, ("confidence",))
        assert sorted(models) == [1, 2]
        assert models[1].category_id == 1
        assert models[1].fit_metadata.n_samples == 200


class TestModelValidation:
    def test_method_params_type_mismatch(self):
        with pytest.raises(ValidationError):
            CalibrationModel("beta_indep", prob_fs(), LogisticIndepParams(w=np.ones(1), c=0.0))

    def test_k_mismatch_between_params_and_feature_set(self):
        with pytest.raises(ValidationError):
            CalibrationModel(
                "logistic_indep",
                logit_fs(("confidence", "cx")),
                LogisticIndepParams(w=np.ones(1), c=0.0),
            )

    def test_encoding_mismatch(self):
        with pytest.raises(ValidationError):
            CalibrationModel(
                "logistic_indep", prob_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
            )
        with pytest.raises(ValidationError):
            CalibrationModel(
                "beta_indep", logit_fs(), BetaIndepParams(a=np.ones(1), b=np.ones(1), c=0.0)
            )

    def test_beta_positivity_enforced(self):
        with pytest.raises(ValidationError):
            BetaIndepParams(a=np.array([-0.1]), b=np.ones(1), c=0.0)
        with pytest.raises(ValidationError):
            BetaDepParams(
                alpha_pos=np.array([1.0, -1.0]),
                beta_pos=np.ones(2),
                alpha_neg=np.ones(2),
                beta_neg=np.ones(2),
                c=0.0,
            )

    def test_hist_table_shape_enforced(self):
        with pytest.raises(ValidationError):
            HistBinningParams(bin_counts=(2,), tables=(np.zeros(3),), global_precision=0.5)


class TestSerialization:
    @pytest.mark.parametrize("method", calibrators.METHODS)
    def test_round_trip_applies_identically(self, method, tmp_path):
        samples = synth.generate(synth.make_scenario("uniform_overconfident", 10000, seed=16))
        model = fit(method, samples, ("confidence", "cx", "cy"))
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        probe = random_matched_samples(np.random.default_rng(17), 200)
        assert np.array_equal(apply(model, probe), apply(loaded, probe))
        assert loaded.method == model.method
        assert loaded.fit_metadata == model.fit_metadata

    def test_unknown_method_rejected(self):
        data = model_to_json(
            CalibrationModel(
                "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
            )
        )
        data["method"] = "spline"
        with pytest.raises(ValidationError):
            model_from_json(data)

    def test_version_mismatch_rejected(self):
        data = model_to_json(
            CalibrationModel(
                "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
            )
        )
        data["schema_version"] = 99
        with pytest.raises(ValidationError):
            model_from_json(data)

    def test_k_mismatch_rejected(self):
        data = model_to_json(
            CalibrationModel(
                "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
            )
        )
        data["params"]["w"] = [1.0, 2.0]
        with pytest.raises(ValidationError):
            model_from_json(data)

    def test_missing_field_rejected(self):
        data = model_to_json(
            CalibrationModel(
                "logistic_indep", logit_fs(), LogisticIndepParams(w=np.ones(1), c=0.0)
            )
        )
        del data["params"]["c"]
        with pytest.raises(ValidationError):
            model_from_json(data)

    def test_category_id_preserved(self, tmp_path):
        model = CalibrationModel(
            "logistic_indep",
            logit_fs(),
            LogisticIndepParams(w=np.ones(1), c=0.0),
            category_id=17,
            fit_metadata=FitMetadata(10, 0.5, 3, True),
        )
        path = tmp_path / "m.json"
        save_model(model, path)
        assert load_model(path).category_id == 17
