import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import joint_gaussian_posterior, random_components, random_dataset
from supftsvd import em
from supftsvd.data import Dataset, Subject
from supftsvd.errors import DomainError, ValidationError
from supftsvd.inference import (NewSubjectScores, default_grid, predict_from_covariates,
                                predict_trajectory, project_subject, reconstruct_insample,
                                to_model_time)
from supftsvd.kernel import KernelFunction
from supftsvd.metrics import mspe
from supftsvd.model import FitConfig, ModelFit
from supftsvd.simulation import SimConfig, simulate, simulate_new_subjects


def make_model(components, sigma2=0.5, dataset=None, origin=0.0, scale=1.0):
    comps = tuple(components)
    if dataset is None:
        post = em.Posterior(np.zeros((0, len(comps))), np.zeros((0, len(comps), len(comps))))
    else:
        post = em.e_step_all(dataset, list(comps), sigma2)
    return ModelFit(comps, sigma2, post, np.ones(len(comps)), {}, time_origin=origin,
                    time_scale=scale)


@pytest.fixture(scope="module")
def fitted():
    from supftsvd.simulation import SimConfig, simulate
    ds, truth = simulate(SimConfig(n=15, p=8, sigma2=0.1, tau=(0.5,), seed=2))
    return ds, em.fit(ds, FitConfig(max_iter=15))


class TestProjection:
    def test_training_subjects_reproduce_posterior(self, fitted):
        ds, model = fitted
        for i, s in enumerate(ds.subjects):
            sc = project_subject(model, s)
            assert np.allclose(sc.u_hat, model.posterior.u_tilde[i], atol=1e-10)
            assert np.allclose(sc.gamma_n, model.posterior.gamma[i], atol=1e-10)
            assert np.allclose(sc.zeta_hat, s.x @ model.B + sc.u_hat, atol=1e-14)

    def test_mean_only_subject_has_zero_deviation(self, rng):
        comps = random_components(rng, 3, 2, 2)
        model = make_model(comps)
        x = np.array([0.4, -1.0])
        times = np.array([0.2, 0.7])
        Y = sum((x @ c.beta) * np.outer(c.xi, c.psi(times)) for c in comps)
        sc = project_subject(model, Subject("n", x, times, Y))
        assert np.abs(sc.u_hat).max() < 1e-12

    @given(st.integers(0, 10**6))
    def test_joint_gaussian_oracle(self, seed):
        rng = np.random.default_rng(seed)
        comps = random_components(rng, 3, 1, 2)
        s = random_dataset(rng, 1, 3, 1).subjects[0]
        sc = project_subject(make_model(comps, 0.8), s)
        u, g = joint_gaussian_posterior(s, comps, 0.8)
        assert np.abs(sc.u_hat - u).max() < 1e-8
        assert np.abs(sc.gamma_n - g).max() < 1e-8
        assert np.array_equal(sc.gamma_n, sc.gamma_n.T)

    def test_dimension_mismatch(self, rng):
        model = make_model(random_components(rng, 3, 2, 1))
        with pytest.raises(ValidationError):
            project_subject(model, Subject("n", [1.0], [0.2], np.zeros((3, 1))))
        with pytest.raises(ValidationError):
            project_subject(model, Subject("n", [1.0, 2.0], [0.2], np.zeros((4, 1))))


class TestTrajectory:
    def test_zero_scores(self, rng):
        model = make_model(random_components(rng, 3, 1, 1))
        out = predict_trajectory(model, [0.0])
        assert out.values.shape == (3, 101)
        assert np.array_equal(out.values, np.zeros((3, 101)))

    def test_basis_case(self, rng):
        psi = KernelFunction([0.3, 0.8], [1.0, -0.5], 1.3)
        comp = replace(random_components(rng, 3, 0, 1)[0], xi=np.array([1.0, 0.0, 0.0]), psi=psi)
        grid = np.linspace(0, 1, 9)
        out = predict_trajectory(make_model([comp]), [1.0], grid)
        assert np.allclose(out.values[0], psi(grid), atol=1e-15)
        assert np.array_equal(out.values[1:], np.zeros((2, 9)))

    # rounding keeps products with psi away from the subnormal range, where doubling is inexact
    @given(st.lists(st.floats(-5, 5).map(lambda v: round(v, 6)), min_size=2, max_size=2),
           st.floats(-3, 3))
    def test_linear_in_scores(self, z, c):
        rng = np.random.default_rng(0)
        model = make_model(random_components(rng, 3, 0, 2))
        a = predict_trajectory(model, z).values
        assert np.array_equal(predict_trajectory(model, 2 * np.array(z)).values, 2 * a)
        assert np.allclose(predict_trajectory(model, c * np.array(z)).values, c * a,
                           atol=1e-12 * (1 + np.abs(a).max()))

    def test_raw_time_labels(self, rng):
        model = make_model(random_components(rng, 2, 0, 1), origin=10.0, scale=4.0)
        out = predict_trajectory(model, [1.0], [0.0, 0.5, 1.0])
        assert np.array_equal(out.raw_times, [10.0, 12.0, 14.0])

    def test_grid_domain_and_shape(self, rng):
        model = make_model(random_components(rng, 2, 0, 2))
        with pytest.raises(DomainError):
            predict_trajectory(model, [1.0, 1.0], [0.5, 1.5])
        with pytest.raises(ValidationError):
            predict_trajectory(model, [1.0])
        with pytest.raises(ValidationError):
            default_grid(1)

    def test_accepts_score_object(self, rng):
        model = make_model(random_components(rng, 2, 0, 1))
        sc = NewSubjectScores(np.array([2.0]), np.array([2.0]), np.eye(1))
        assert np.array_equal(predict_trajectory(model, sc).values,
                              predict_trajectory(model, [2.0]).values)


class TestCovariateOnly:
    def test_zero_covariates(self, rng):
        model = make_model(random_components(rng, 3, 2, 2))
        assert np.array_equal(predict_from_covariates(model, [0.0, 0.0]).values,
                              np.zeros((3, 101)))

    def test_equals_zero_deviation_projection(self, rng):
        model = make_model(random_components(rng, 3, 2, 2))
        x = np.array([0.3, 1.2])
        grid = np.linspace(0, 1, 11)
        assert np.array_equal(predict_from_covariates(model, x, grid).values,
                              predict_trajectory(model, x @ model.B, grid).values)

    def test_unsupervised_model_rejected(self, rng):
        model = make_model(random_components(rng, 3, 0, 1))
        with pytest.raises(ValidationError):
            predict_from_covariates(model, [])

    def test_wrong_length(self, rng):
        model = make_model(random_components(rng, 3, 2, 1))
        with pytest.raises(ValidationError):
            predict_from_covariates(model, [1.0])


class TestReconstruction:
    def test_component_sum_exact(self, fitted):
        ds, model = fitted
        for rec in reconstruct_insample(model, ds):
            assert np.array_equal(rec.per_component.sum(axis=0), rec.total)

    def test_zero_model(self, rng):
        comps = [replace(c, beta=np.zeros(1)) for c in random_components(rng, 2, 1, 1)]
        ds = Dataset(tuple(Subject(f"s{i}", [1.0], [0.2, 0.6], np.zeros((2, 2)))
                           for i in range(3)))
        model = make_model(comps, dataset=ds)
        for rec in reconstruct_insample(model, ds):
            assert np.array_equal(rec.total, np.zeros((2, 2)))

    def test_noiseless_rank_one(self):
        # exact rank-1 data whose singular function lies in the kernel span
        from supftsvd.kernel import kernel_matrix
        knots = np.linspace(0, 1, 41)
        alpha = np.linalg.solve(kernel_matrix(knots, knots), 1 + np.cos(np.pi * knots))
        rng = np.random.default_rng(5)
        xi = rng.normal(size=10)
        comp = em.Component([2.0, -1.0], xi / np.linalg.norm(xi),
                            KernelFunction(knots, alpha, 1.0), 1.0)
        X = rng.uniform(size=(30, 2))
        loadings = 10 * X @ comp.beta + rng.normal(size=30)
        subjects = []
        for i in range(30):
            t = np.sort(rng.uniform(0, 1, 5))
            subjects.append(Subject(f"s{i}", X[i], t, loadings[i] * np.outer(comp.xi, comp.psi(t))))
        ds = Dataset(tuple(subjects))
        model = em.fit(ds, FitConfig(eta_grid=(1e-6,), cv_freeze_iter=0, delta_stop=1e-14,
                                     max_iter=300))
        rms = np.sqrt(np.mean([np.mean((rec.total - s.Y) ** 2) for rec, s in
                               zip(reconstruct_insample(model, ds), ds.subjects)]))
        assert rms < 1e-5 * np.sqrt(np.mean(ds.stacked() ** 2))

    def test_shape_mismatch(self, fitted, rng):
        _, model = fitted
        bad = random_dataset(rng, 2, model.p + 1, model.q)
        with pytest.raises(ValidationError):
            reconstruct_insample(model, bad)


class TestModelTime:
    def test_maps_and_clamps(self, rng):
        model = make_model(random_components(rng, 1, 0, 1), origin=0.0, scale=10.0)
        ds = Dataset((Subject("a", [], [2.0, 5.0, 12.0], np.zeros((1, 3))),))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            mapped, n = to_model_time(model, ds)
        assert n == 1 and caught
        assert np.allclose(mapped.subjects[0].times, [0.2, 0.5, 1.0])
        assert (mapped.time_origin, mapped.time_scale) == (0.0, 10.0)

    def test_no_warning_inside_range(self, rng):
        model = make_model(random_components(rng, 1, 0, 1), origin=0.0, scale=10.0)
        ds = Dataset((Subject("a", [], [2.0, 5.0], np.zeros((1, 2))),))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _, n = to_model_time(model, ds)
        assert n == 0


class TestSupervisedPrediction:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_projection_beats_unsupervised(self, seed):
        cfg = SimConfig.rank1(n=40, p=30, m=3, sigma2=4.0, tau=(1e-4,), seed=seed)
        train, truth = simulate(cfg)
        test, test_truth = simulate_new_subjects(cfg, truth, 30, seed=99 + seed)
        grid = default_grid(51)
        errors = []
        for q0 in (False, True):
            d, h = train, test
            if q0:
                d = d.with_covariates(np.zeros((d.n, 0)))
                h = h.with_covariates(np.zeros((h.n, 0)))
            model = em.fit(d, FitConfig(rank=1, seed=seed))
            pred = [predict_trajectory(model, project_subject(model, s), grid) for s in h.subjects]
            errors.append(mspe(pred, test_truth, grid))
        assert errors[0] < errors[1]
