import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_dataset
from supftsvd import em
from supftsvd.errors import DegenerateError, RankDeficiencyError, ValidationError
from supftsvd.metrics import (EvalReport, component_errors, fitted_loadings, mspe, r2_loading,
                              r2_tensor)
from supftsvd.model import Component, FitConfig, ModelFit, Posterior
from supftsvd.simulation import SimConfig, simulate


def model_from_truth(truth, flip=(), u=None):
    comps = []
    for k in range(truth.r):
        s = -1.0 if k in flip else 1.0
        psi = truth.psi[k]
        comps.append(Component(truth.beta[:, k], s * truth.xi[:, k], psi, 1.0))
    n = truth.X.shape[0]
    u = np.zeros((n, truth.r)) if u is None else u
    return ModelFit(tuple(comps), 1.0, Posterior(u, np.zeros((n, truth.r, truth.r))),
                    np.ones(truth.r))


def truth_predictions(truth, grid, offset=0.0):
    return [truth.trajectory(i, grid) + offset for i in range(truth.X.shape[0])]


@pytest.fixture(scope="module")
def rank2():
    return simulate(SimConfig.rank2(n=20, p=6, seed=1))


class TestTensorR2:
    def test_exact_reconstruction(self, rng):
        ds = random_dataset(rng, 4, 3, 0)
        recs = [s.Y[None] for s in ds.subjects]
        assert r2_tensor(ds, recs) == pytest.approx(1.0, abs=1e-12)

    def test_zero_reconstruction(self, rng):
        ds = random_dataset(rng, 4, 3, 0)
        recs = [np.zeros((1,) + s.Y.shape) for s in ds.subjects]
        assert r2_tensor(ds, recs) == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(0, 10**6))
    def test_matches_normal_equations(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, 5, 3, 0)
        recs = [rng.normal(size=(2,) + s.Y.shape) for s in ds.subjects]
        y = np.concatenate([s.Y.ravel() for s in ds.subjects])
        A = np.column_stack([np.ones(y.size)] + [np.concatenate([r[k].ravel() for r in recs])
                                                 for k in range(2)])
        coef = np.linalg.solve(A.T @ A, A.T @ y)
        oracle = 1 - np.sum((y - A @ coef) ** 2) / np.sum((y - y.mean()) ** 2)
        value = r2_tensor(ds, recs)
        assert value == pytest.approx(oracle, abs=1e-10)
        assert value <= 1.0

    def test_constant_data(self, rng):
        ds = random_dataset(rng, 2, 2, 0)
        from supftsvd.data import Dataset
        flat = Dataset(tuple(replace(s, Y=np.ones_like(s.Y)) for s in ds.subjects))
        with pytest.raises(DegenerateError):
            r2_tensor(flat, [s.Y[None] for s in flat.subjects])

    def test_shape_checks(self, rng):
        ds = random_dataset(rng, 2, 2, 0)
        with pytest.raises(ValidationError):
            r2_tensor(ds, [ds.subjects[0].Y[None]])
        with pytest.raises(ValidationError):
            r2_tensor(ds, [s.Y for s in ds.subjects])


class TestLoadingR2:
    def test_exactly_linear(self, rng):
        X = rng.normal(size=(20, 2))
        zeta = np.column_stack([X @ [1.0, -2.0] + 3.0, X @ [0.5, 0.5]])
        assert np.allclose(r2_loading(zeta, X), 1.0, atol=1e-12)

    def test_null_expectation(self):
        # under independent noise E[R^2] = q / (n - 1)
        rng = np.random.default_rng(0)
        n, q, reps = 30, 2, 400
        X = rng.uniform(size=(n, q))
        vals = np.array([r2_loading(rng.normal(size=(n, 1)), X)[0] for _ in range(reps)])
        expected = q / (n - 1)
        assert abs(vals.mean() - expected) < 3 * vals.std() / np.sqrt(reps)

    def test_constant_column_dropped(self, rng):
        X = rng.normal(size=(10, 1))
        zeta = rng.normal(size=(10, 1))
        with_const = np.column_stack([X, np.ones(10)])
        assert r2_loading(zeta, with_const) == pytest.approx(r2_loading(zeta, X))

    def test_needs_more_subjects_than_covariates(self, rng):
        with pytest.raises(ValidationError):
            r2_loading(rng.normal(size=(3, 1)), rng.normal(size=(3, 2)))

    def test_rank_deficient(self, rng):
        x = rng.normal(size=10)
        with pytest.raises(RankDeficiencyError):
            r2_loading(rng.normal(size=(10, 1)), np.column_stack([x, 2 * x]))


class TestMSPE:
    def test_truth_is_zero(self, rank2):
        _, truth = rank2
        grid = np.linspace(0, 1, 101)
        assert mspe(truth_predictions(truth, grid), truth, grid) == pytest.approx(0.0, abs=1e-20)

    @given(st.floats(-3, 3))
    def test_constant_offset(self, c):
        _, truth = simulate(SimConfig(n=3, p=2, seed=0))
        grid = np.linspace(0, 1, 101)
        assert mspe(truth_predictions(truth, grid, c), truth, grid) == \
            pytest.approx(c * c, rel=1e-9, abs=1e-15)

    def test_sign_flip_invariant(self, rank2):
        _, truth = rank2
        grid = np.linspace(0, 1, 51)
        from supftsvd.inference import predict_trajectory
        base = model_from_truth(truth)
        flipped = model_from_truth(truth, flip=(0,))
        load = truth.loadings()
        a = [predict_trajectory(base, load[i], grid) for i in range(load.shape[0])]
        b = [predict_trajectory(flipped, load[i] * [-1, 1], grid) for i in range(load.shape[0])]
        assert mspe(a, truth, grid) == mspe(b, truth, grid)

    def test_grid_checks(self, rank2):
        _, truth = rank2
        grid = np.linspace(0, 1, 11)
        with pytest.raises(ValidationError):
            mspe(truth_predictions(truth, grid), truth, grid[::-1])
        with pytest.raises(ValidationError):
            mspe(truth_predictions(truth, grid)[:-1], truth, grid)
        with pytest.raises(ValidationError):
            mspe(truth_predictions(truth, grid), truth, np.linspace(0, 1, 12))


class TestComponentErrors:
    def test_truth_has_zero_error(self, rank2):
        _, truth = rank2
        errs = component_errors(model_from_truth(truth), truth)
        for e in errs:
            assert e.matched and e.xi_sign == 1 and e.psi_sign == 1
            assert e.xi_error == pytest.approx(0.0, abs=1e-14)
            assert e.psi_error == pytest.approx(0.0, abs=1e-14)
            assert e.beta_mse == pytest.approx(0.0, abs=1e-20)

    def test_flipped_xi_is_aligned(self, rank2):
        _, truth = rank2
        errs = component_errors(model_from_truth(truth, flip=(1,)), truth)
        assert errs[1].xi_sign == -1
        assert errs[1].xi_error == pytest.approx(0.0, abs=1e-14)

    def test_joint_flip_with_compensation(self, rank2):
        _, truth = rank2
        model = model_from_truth(truth)
        c = model.components[0]
        from supftsvd.simulation import CosineFunction
        flipped = replace(c, xi=-c.xi, psi=CosineFunction(-truth.psi[0].coef))
        errs = component_errors(model.with_components((flipped, model.components[1])), truth)
        assert (errs[0].xi_sign, errs[0].psi_sign) == (-1, -1)
        assert errs[0].psi_error == pytest.approx(0.0, abs=1e-14)
        assert errs[0].beta_mse == pytest.approx(0.0, abs=1e-20)

    def test_perturbed_xi(self, rank2):
        _, truth = rank2
        rng = np.random.default_rng(4)
        xi = truth.xi[:, 0] + 0.05 * rng.normal(size=truth.p)
        xi /= np.linalg.norm(xi)
        model = model_from_truth(truth)
        model = model.with_components((replace(model.components[0], xi=xi),
                                       model.components[1]))
        err = component_errors(model, truth)[0].xi_error
        assert err == pytest.approx(np.sqrt(np.sum((xi - truth.xi[:, 0]) ** 2)), abs=1e-14)

    def test_beta_scale(self, rank2):
        _, truth = rank2
        model = model_from_truth(truth)
        doubled = replace(model.components[0], beta=2 * model.components[0].beta)
        errs = component_errors(model.with_components((doubled, model.components[1])), truth)
        assert errs[0].beta_mse == pytest.approx(np.mean(truth.mean_loadings()[:, 0] ** 2))

    def test_matching_permutation(self, rank2):
        _, truth = rank2
        model = model_from_truth(truth)
        swapped = model.with_components(model.components[::-1])
        errs = component_errors(swapped, truth)
        assert [(e.truth_index, e.fit_index) for e in errs] == [(0, 1), (1, 0)]
        assert all(e.xi_error < 1e-14 for e in errs)

    def test_unmatched_gets_worst_case(self):
        _, truth = simulate(SimConfig(n=5, p=3, seed=0))
        model = model_from_truth(truth)
        xi = truth.xi[:, 0]
        ortho = np.cross(xi, [1.0, 0.0, 0.0])
        ortho /= np.linalg.norm(ortho)
        model = model.with_components((replace(model.components[0], xi=ortho),))
        e = component_errors(model, truth)[0]
        assert not e.matched
        assert (e.xi_error, e.psi_error) == (np.sqrt(2.0), 2.0)

    def test_unsupervised_model_uses_regression(self, rank2):
        _, truth = rank2
        load = truth.loadings()
        model = model_from_truth(truth, u=truth.mean_loadings())
        model = model.with_components(tuple(replace(c, beta=np.zeros(0))
                                            for c in model.components))
        errs = component_errors(model, truth)
        assert all(e.beta_mse < 1e-20 for e in errs)
        assert load.shape == (20, 2)

    def test_rank_and_shape_checks(self, rank2):
        _, truth = rank2
        model = model_from_truth(truth)
        with pytest.raises(ValidationError):
            component_errors(model.with_components(model.components[:1]), truth)
        with pytest.raises(ValidationError):
            component_errors(model, truth, X=np.zeros((3, 2)))


def test_fitted_loadings(rank2):
    _, truth = rank2
    u = np.random.default_rng(0).normal(size=(20, 2))
    model = model_from_truth(truth, u=u)
    assert np.allclose(fitted_loadings(model, truth.X), truth.mean_loadings() + u)


def test_report_serialization(rank2):
    _, truth = rank2
    errs = component_errors(model_from_truth(truth), truth)
    rep = EvalReport(0.9, [0.5, 0.4], 1.2, 3.4, errs)
    d = json.loads(rep.to_json())
    assert d["format_version"] == "1" and d["kind"] == "supftsvd_report"
    assert d["r2_loading"] == [0.5, 0.4]
    row = rep.csv_fields()
    assert row["r2_loading_2"] == 0.4 and row["matched_1"] == 1 and "psi_error_2" in row
    assert rep.sign_alignment == [1, 1]
    empty = EvalReport().csv_fields()
    assert empty["r2_tensor"] is None


class TestSupervisedGain:
    # with tau this small the covariate prior outweighs three noisy visits
    @pytest.mark.parametrize("seed", [0, 1])
    def test_loadings_agree_more_with_covariates(self, seed):
        ds, truth = simulate(SimConfig.rank1(n=40, p=30, m=3, sigma2=4.0, tau=(1e-4,),
                                             seed=seed))
        r2 = []
        for d in (ds, ds.with_covariates(np.zeros((ds.n, 0)))):
            model = em.fit(d, FitConfig(rank=1, seed=seed))
            r2.append(r2_loading(fitted_loadings(model, d.X), truth.X)[0])
        assert r2[0] > r2[1]
