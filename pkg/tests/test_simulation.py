import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from supftsvd.errors import DataFormatError, DomainError, ValidationError
from supftsvd.kernel import QUAD_GRID, l2_norm
from supftsvd.simulation import (CosineFunction, SimConfig, SimulationTruth, cosine_basis,
                                 simulate, simulate_new_subjects, truth_eval_psi)


def _truth_with(coef):
    _, truth = simulate(SimConfig(n=3, p=4, seed=1))
    from dataclasses import replace
    return replace(truth, psi=(CosineFunction(coef),))


class TestBasis:
    def test_first_coefficient_is_constant_one(self):
        truth = _truth_with(np.eye(10)[0])
        assert np.array_equal(truth_eval_psi(truth, 0, [0.0, 0.3, 1.0]), [1.0, 1.0, 1.0])

    def test_second_coefficient_is_scaled_cosine(self):
        truth = _truth_with(np.eye(10)[1])
        t = np.linspace(0, 1, 7)
        assert np.allclose(truth_eval_psi(truth, 0, t), np.sqrt(2) * np.cos(np.pi * t),
                           atol=1e-15)
        # integral of 2 cos^2(pi t) over [0, 1] is 1
        assert quad(lambda s: 2 * np.cos(np.pi * s) ** 2, 0, 1)[0] == pytest.approx(1.0)
        assert l2_norm(truth_eval_psi(truth, 0, QUAD_GRID)) == pytest.approx(1.0, abs=1e-8)

    def test_orthonormal_under_quadrature(self):
        B = cosine_basis(QUAD_GRID)
        from scipy.integrate import simpson
        gram = simpson(B[:, :, None] * B[:, None, :], x=QUAD_GRID, axis=0)
        assert np.abs(gram - np.eye(10)).max() < 1e-8

    def test_scalar_call(self):
        assert isinstance(CosineFunction(np.eye(10)[0])(0.5), float)

    def test_grid_outside_domain(self):
        truth = _truth_with(np.eye(10)[0])
        with pytest.raises(DomainError):
            truth_eval_psi(truth, 0, [1.5])


class TestSimConfig:
    def test_rank1_design(self):
        cfg = SimConfig.rank1()
        assert cfg.gamma == ((1.5, 3.0),) and cfg.lam == (80.0,) and cfg.p == 500
        assert (cfg.r, cfg.q) == (1, 2)

    def test_rank2_design(self):
        cfg = SimConfig.rank2()
        assert cfg.gamma == ((1.5, 3.0), (2.0, 3.4)) and cfg.lam == (120.0, 80.0)

    @pytest.mark.parametrize("kw", [{"n": 0}, {"sigma2": 0.0}, {"lam": (80.0, 1.0)},
                                    {"tau": (-1.0,)}, {"m": 0}, {"m_range": (4, 3)},
                                    {"gamma": ((1.0,), (1.0, 2.0)), "lam": (1.0, 1.0),
                                     "tau": (1.0, 1.0)}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            SimConfig(**kw)


class TestSimulate:
    def test_reproducible(self):
        a, ta = simulate(SimConfig(n=5, p=6, seed=3))
        b, tb = simulate(SimConfig(n=5, p=6, seed=3))
        assert np.array_equal(a.stacked(), b.stacked())
        assert ta.to_json() == tb.to_json()

    def test_covariates_fixed_across_replicates(self):
        a, _ = simulate(SimConfig(n=5, p=6, seed=3))
        b, _ = simulate(SimConfig(n=5, p=6, seed=4))
        assert np.array_equal(a.X, b.X)
        assert not np.array_equal(a.stacked()[:, :3], b.stacked()[:, :3])

    @given(st.integers(0, 10**6))
    def test_truth_normalization(self, seed):
        _, truth = simulate(SimConfig.rank2(n=4, p=7, seed=seed))
        assert np.allclose(np.linalg.norm(truth.xi, axis=0), 1.0, atol=1e-12)
        for k in range(2):
            assert l2_norm(truth_eval_psi(truth, k, QUAD_GRID)) == pytest.approx(1.0, abs=1e-8)
        assert truth.lam[0] < 120.0 * np.sqrt(sum(1 / l**2 for l in range(1, 11)))

    def test_layout(self):
        ds, truth = simulate(SimConfig(n=12, p=5, m=5, seed=0))
        assert ds.n == 12 and ds.p == 5 and ds.q == 2
        assert all(s.m == 5 for s in ds.subjects)
        assert all(0 <= s.times.min() and s.times.max() <= 1 for s in ds.subjects)
        assert tuple(ds.subject_ids) == truth.subject_ids
        assert ds.subject_ids[0] == "s01"

    def test_visit_counts_in_range(self):
        ds, _ = simulate(SimConfig(n=200, p=2, seed=0))
        ms = {s.m for s in ds.subjects}
        assert ms == set(range(3, 9))

    def test_noise_variance(self):
        cfg = SimConfig(n=200, p=200, sigma2=4.0, seed=5)
        ds, truth = simulate(cfg)
        resid = np.concatenate([(s.Y - truth.trajectory(i, s.times)).ravel()
                                for i, s in enumerate(ds.subjects)])
        assert np.var(resid) == pytest.approx(4.0, rel=0.05)

    def test_loadings_follow_covariates(self):
        _, truth = simulate(SimConfig(n=50, p=3, tau=(1e-12,), seed=2))
        assert np.allclose(truth.zeta, truth.X @ truth.gamma.T, atol=1e-5)
        assert np.allclose(truth.mean_loadings(), truth.X @ truth.beta)

    def test_null_covariates(self):
        _, truth = simulate(SimConfig(n=30, p=3, gamma=((0.0, 0.0),), seed=2))
        assert np.array_equal(truth.zeta, truth.e)

    def test_json_roundtrip(self):
        _, truth = simulate(SimConfig.rank2(n=4, p=3, seed=9))
        back = SimulationTruth.from_json(truth.to_json())
        assert back.to_json() == truth.to_json()
        assert np.allclose(back.trajectory(1, QUAD_GRID[:5]), truth.trajectory(1, QUAD_GRID[:5]))

    def test_malformed_truth(self):
        with pytest.raises(DataFormatError):
            SimulationTruth.from_json("{")
        with pytest.raises(DataFormatError):
            SimulationTruth.from_json('{"format_version": "9"}')
        with pytest.raises(DataFormatError):
            SimulationTruth.from_json('{"format_version": "1"}')


class TestNewSubjects:
    def test_shares_structure_not_subjects(self):
        cfg = SimConfig(n=8, p=4, seed=1)
        _, truth = simulate(cfg)
        ds, new = simulate_new_subjects(cfg, truth, 5, seed=100)
        assert ds.n == 5 and ds.subject_ids[0] == "t1"
        assert np.array_equal(new.xi, truth.xi) and np.array_equal(new.lam, truth.lam)
        assert new.X.shape == (5, 2)
        again, _ = simulate_new_subjects(cfg, truth, 5, seed=100)
        assert np.array_equal(again.stacked(), ds.stacked())

    def test_needs_subjects(self):
        cfg = SimConfig(n=3, p=2)
        _, truth = simulate(cfg)
        with pytest.raises(ValidationError):
            simulate_new_subjects(cfg, truth, 0, seed=1)
