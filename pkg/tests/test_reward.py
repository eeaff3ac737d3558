from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcppo.agent import ChoiceDataset, sample_dataset, solve_ddc
from dcppo.mdp import random_instance
from dcppo.mle import fit_mle, oracle_estimate
from dcppo.reward import (
    RecoveredReward,
    bellman_targets,
    elliptical_potential,
    gram_matrices,
    recover_reward,
    reward_error_certificate,
)

from oracles import ridge_by_gradient_descent

SEED0_MAX_RATIO_N4000 = 2.9769052222873515


@pytest.fixture(scope="module")
def seed0_data():
    mdp = random_instance(0, 5, 3, 3)
    bm = solve_ddc(mdp, 0.9)
    ds = sample_dataset(mdp, bm, 4000, seed=0)
    return mdp, bm, ds, fit_mle(ds, mdp.phi)


def test_huge_lambda_shrinks_to_zero(seed0_data):
    mdp, _, ds, est = seed0_data
    rec = recover_reward(ds, est, mdp.phi, 0.9, lambda_reg=1e9)
    assert np.linalg.norm(rec.w_hat, axis=1).max() <= ds.n * ds.H / 1e9


def test_single_sample_scalar_equation():
    phi = np.zeros((2, 2, 1))
    phi[0, 1, 0] = 1.0
    ds = ChoiceDataset(np.array([[0, 0]]), np.array([[1]]), seed=0, gamma=0.9)
    t = 0.37
    est = SimpleNamespace(Q_hat=np.array([[[0.0, t], [0.0, 0.0]]]), V_hat=np.zeros((1, 2)))
    rec = recover_reward(ds, est, phi, 0.9, lambda_reg=1.0)
    np.testing.assert_allclose(rec.w_hat, [[t / 2]], atol=1e-15)


def test_oracle_inputs_recover_reward_exactly():
    mdp = random_instance(2, 5, 3, 3, transition_mode="deterministic")
    bm = solve_ddc(mdp, 0.9)
    ds = sample_dataset(mdp, bm, 5000, seed=0)
    rec = recover_reward(ds, oracle_estimate(bm, mdp.phi), mdp.phi, 0.9, lambda_reg=1e-8)
    observed = np.zeros((mdp.H, mdp.S, mdp.A), dtype=bool)
    for h in range(mdp.H):
        s, a, _ = ds.step(h)
        observed[h, s, a] = True
    err = np.abs(rec.reward_table(mdp.phi) - mdp.rewards)[observed]
    assert err.max() <= 1e-4


def test_matches_direct_normal_equations(seed0_data):
    mdp, _, ds, est = seed0_data
    rec = recover_reward(ds, est, mdp.phi, 0.9, lambda_reg=0.5)
    y = bellman_targets(ds, est.Q_hat, est.V_hat, 0.9)
    for h in range(ds.H):
        s, a, _ = ds.step(h)
        X = mdp.phi[s, a]
        w = np.linalg.solve(X.T @ X + 0.5 * np.eye(mdp.d), X.T @ y[:, h])
        np.testing.assert_allclose(rec.w_hat[h], w, atol=1e-12)


def test_matches_gradient_descent():
    mdp = random_instance(4, 3, 3, 2)
    bm = solve_ddc(mdp, 0.9)
    ds = sample_dataset(mdp, bm, 60, seed=0)
    est = fit_mle(ds, mdp.phi)
    rec = recover_reward(ds, est, mdp.phi, 0.9, lambda_reg=1.0)
    y = bellman_targets(ds, est.Q_hat, est.V_hat, 0.9)
    for h in range(ds.H):
        s, a, _ = ds.step(h)
        w = ridge_by_gradient_descent(mdp.phi[s, a], y[:, h], 1.0, steps=5000)
        np.testing.assert_allclose(rec.w_hat[h], w, atol=1e-6)


def test_shrinkage_monotone(seed0_data):
    mdp, _, ds, est = seed0_data
    norms = [np.linalg.norm(recover_reward(ds, est, mdp.phi, 0.9, lam).w_hat, axis=1)
             for lam in np.geomspace(1e-3, 1e4, 15)]
    assert np.all(np.diff(np.array(norms), axis=0) <= 1e-12)


def test_bad_lambda(seed0_data):
    mdp, _, ds, est = seed0_data
    with pytest.raises(ValueError):
        recover_reward(ds, est, mdp.phi, 0.9, lambda_reg=0.0)


def test_nan_target_names_step(seed0_data):
    mdp, _, ds, est = seed0_data
    Q = np.array(est.Q_hat)
    s, a, _ = ds.step(2)
    Q[2, s[7], a[7]] = np.nan
    with pytest.raises(ValueError, match="step 2"):
        recover_reward(ds, SimpleNamespace(Q_hat=Q, V_hat=est.V_hat), mdp.phi, 0.9)


class TestPotential:
    def test_empty_gram(self):
        assert elliptical_potential(np.array([0.6, 0.8]), np.zeros((2, 2)), 1.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("n", [1, 10, 1000])
    def test_isotropic(self, n):
        val = elliptical_potential(np.array([0.0, 1.0, 0.0]), n * np.eye(3), 1.0)
        assert val == pytest.approx((n + 1) ** -0.5, rel=1e-14)

    def test_zero_feature(self):
        assert elliptical_potential(np.zeros(3), np.eye(3), 1.0) == 0.0

    def test_nonpositive_lambda(self):
        with pytest.raises(ValueError):
            elliptical_potential(np.ones(2), np.eye(2), 0.0)

    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_vectorised_matches_scalar(self, seed, d):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(20, d))
        L = X.T @ X
        pts = rng.normal(size=(4, 3, d))
        batch = elliptical_potential(pts, L, 0.7)
        inv = np.linalg.inv(L + 0.7 * np.eye(d))
        for idx in np.ndindex(4, 3):
            assert batch[idx] == pytest.approx(np.sqrt(pts[idx] @ inv @ pts[idx]), rel=1e-9)


class TestCertificate:
    def test_true_weights(self, seed0_data):
        mdp, _, ds, _ = seed0_data
        rec = RecoveredReward(np.array(mdp.w), gram_matrices(ds, mdp.phi), 1.0)
        cert = reward_error_certificate(rec, mdp)
        assert np.all(cert["abs_error"] == 0.0) and np.all(cert["ratio"] == 0.0)

    def test_anchor_rows_vanish(self, seed0_data):
        mdp, _, ds, est = seed0_data
        cert = reward_error_certificate(recover_reward(ds, est, mdp.phi, 0.9), mdp)
        assert np.all(cert["abs_error"][:, :, 0] == 0.0)
        assert np.all(cert["potential"][:, :, 0] == 0.0)
        assert np.all(cert["ratio"][:, :, 0] == 0.0)

    def test_frozen_seed0_ratio(self, seed0_data):
        mdp, _, ds, est = seed0_data
        cert = reward_error_certificate(recover_reward(ds, est, mdp.phi, 0.9), mdp)
        assert float(cert["ratio"].max()) == pytest.approx(SEED0_MAX_RATIO_N4000, rel=1e-9)


def test_round_trip(seed0_data):
    mdp, _, ds, est = seed0_data
    rec = recover_reward(ds, est, mdp.phi, 0.9)
    again = RecoveredReward.from_dict(rec.to_dict())
    assert again.w_hat.tobytes() == rec.w_hat.tobytes()
    assert again.Lambda.tobytes() == rec.Lambda.tobytes()
    assert again.lambda_reg == rec.lambda_reg
