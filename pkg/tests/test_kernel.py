from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcppo.agent import sample_dataset, solve_ddc
from dcppo.kernel import (
    KernelEstimate,
    KernelSpec,
    cell_kernel,
    information_gain_proxy,
    kernel_fit_mle,
    kernel_penalty,
    kernel_plan,
    kernel_recover_reward,
    rkhs_schedule,
)
from dcppo.mdp import random_instance
from dcppo.mle import MleConfig, fit_mle
from dcppo.planner import PlannerConfig, plan
from dcppo.reward import elliptical_potential, recover_reward

from conftest import one_hot_phi
from test_mle import toy_dataset

LAM = 0.5
LINEAR = KernelSpec(kind="linear_via_features", lambda_reg=LAM)


@pytest.fixture(scope="module")
def data():
    mdp = random_instance(0, 5, 3, 3)
    ds = sample_dataset(mdp, solve_ddc(mdp, 0.9), 1000, seed=0)
    return mdp, ds


@pytest.fixture(scope="module")
def linear_pair(data):
    """Primal and dual pipelines on the same data with the feature kernel."""
    mdp, ds = data
    K = cell_kernel(LINEAR, mdp.phi)
    est = fit_mle(ds, mdp.phi, MleConfig(ridge=LAM))
    kest = kernel_fit_mle(ds, K, mdp.S, mdp.A, LAM)
    rec = recover_reward(ds, est, mdp.phi, 0.9, LAM)
    krec = kernel_recover_reward(ds, kest, K, mdp.S, mdp.A, 0.9, LAM)
    return K, est, kest, rec, krec


class TestCellKernel:
    @pytest.mark.parametrize("kind", ["rbf", "polynomial", "linear_via_features"])
    def test_anchor_psd_and_scale(self, kind):
        mdp = random_instance(1, 4, 3, 2, d=3, feature_mode="random_linear")
        K = cell_kernel(KernelSpec(kind=kind), mdp.phi)
        anchors = np.arange(mdp.S) * mdp.A
        assert np.all(K[anchors] == 0.0) and np.all(K[:, anchors] == 0.0)
        assert np.linalg.eigvalsh(K).min() >= -1e-12
        assert np.diag(K).max() <= 1.0 + 1e-12
        np.testing.assert_array_equal(K, K.T)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            KernelSpec(kind="laplace")
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)


class TestKernelMle:
    @pytest.mark.parametrize("kind", ["rbf", "polynomial", "linear_via_features"])
    def test_uniform_choices_give_zero(self, kind):
        phi = one_hot_phi(2, 3)
        K = cell_kernel(KernelSpec(kind=kind), phi)
        est = kernel_fit_mle(toy_dataset([4, 4, 4]), K, 2, 3, 1.0)
        np.testing.assert_allclose(est.alpha[0], 0.0, atol=1e-14)
        np.testing.assert_allclose(est.Q_hat, 0.0, atol=1e-14)

    def test_matches_ridge_mle(self, data, linear_pair):
        _, ds = data
        _, est, kest, _, _ = linear_pair
        np.testing.assert_allclose(kest.Q_hat, est.Q_hat, atol=1e-6)

    def test_vanishing_penalty_inverts_logit(self):
        phi = one_hot_phi(2, 2)
        K = cell_kernel(LINEAR, phi)
        est = kernel_fit_mle(toy_dataset([2, 1]), K, 2, 2, 1e-10)
        assert est.Q_hat[0, 0, 0] - est.Q_hat[0, 0, 1] == pytest.approx(np.log(2), abs=1e-3)

    def test_round_trip(self, linear_pair):
        kest = linear_pair[2]
        again = KernelEstimate.from_dict(kest.to_dict())
        for name in ("table", "V_hat", "pi_hat", "log_likelihood"):
            assert getattr(again, name).tobytes() == getattr(kest, name).tobytes()
        for a, b in zip(again.alpha, kest.alpha):
            assert a.tobytes() == b.tobytes()


class TestKernelReward:
    def test_zero_targets(self, data):
        mdp, ds = data
        K = cell_kernel(KernelSpec(), mdp.phi)
        zeros = SimpleNamespace(Q_hat=np.zeros((3, mdp.S, mdp.A)), V_hat=np.zeros((3, mdp.S)))
        rec = kernel_recover_reward(ds, zeros, K, mdp.S, mdp.A, 0.9, 1.0)
        assert np.all(rec.table == 0.0)

    def test_large_lambda_shrinks(self, data, linear_pair):
        mdp, ds = data
        K = cell_kernel(KernelSpec(), mdp.phi)
        kest = linear_pair[2]
        lam = 1e6
        rec = kernel_recover_reward(ds, kest, K, mdp.S, mdp.A, 0.9, lam)
        cells = ds.states[:, :-1] * mdp.A + ds.actions
        for h in range(ds.H):
            k_norm = np.linalg.norm(K[:, cells[:, h]], axis=1).max()
            assert np.abs(rec.table[h]).max() <= np.linalg.norm(rec.y[h]) * k_norm / lam

    def test_matches_ridge(self, data, linear_pair):
        mdp, _ = data
        _, _, _, rec, krec = linear_pair
        np.testing.assert_allclose(krec.reward_table(), rec.reward_table(mdp.phi), atol=1e-6)

    def test_sample_cap(self):
        mdp = random_instance(0, 4, 3, 2)
        ds = sample_dataset(mdp, solve_ddc(mdp, 0.9), 2001, seed=0)
        K = cell_kernel(KernelSpec(), mdp.phi)
        zeros = SimpleNamespace(Q_hat=np.zeros((2, mdp.S, mdp.A)), V_hat=np.zeros((2, mdp.S)))
        with pytest.raises(ValueError, match="2000"):
            kernel_recover_reward(ds, zeros, K, mdp.S, mdp.A, 0.9, 1.0)


class TestPenalty:
    def test_no_data(self):
        val = kernel_penalty(0.64, np.zeros(0), np.zeros((0, 0)), 0.5, 2.0)
        assert float(val) == pytest.approx(2.0 * 0.5 ** -0.5 * 0.8)

    def test_interpolates_training_point(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 2))
        K = np.exp(-0.5 * np.sum((X[:, None] - X[None]) ** 2, axis=-1))
        val = kernel_penalty(K[2, 2], K[2], K, 1e-8, 1.0) * np.sqrt(1e-8)
        assert float(val) ** 2 <= 1e-3

    def test_feature_kernel_identity(self, data):
        mdp, ds = data
        s, a, _ = ds.step(1)
        X = mdp.phi[s, a]
        Z = mdp.phi.reshape(-1, mdp.d)
        kernel_form = kernel_penalty(np.sum(Z * Z, axis=1), Z @ X.T, X @ X.T, LAM, 1.3)
        feature_form = 1.3 * elliptical_potential(Z, X.T @ X, LAM)
        np.testing.assert_allclose(kernel_form, feature_form, atol=1e-6)

    def test_negative_radicand_rejected(self):
        with pytest.raises(FloatingPointError):
            kernel_penalty(-1.0, np.zeros(0), np.zeros((0, 0)), 1.0, 1.0)

    @given(st.integers(0, 10_000))
    def test_more_data_never_widens(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(12, 2))
        K = np.exp(-0.5 * np.sum((X[:, None] - X[None]) ** 2, axis=-1))
        m = int(rng.integers(1, 10))
        z = np.arange(12)
        before = kernel_penalty(np.diag(K), K[np.ix_(z, range(m))], K[:m, :m], 0.3, 1.0)
        after = kernel_penalty(np.diag(K), K[np.ix_(z, range(m + 1))], K[: m + 1, : m + 1], 0.3, 1.0)
        assert np.all(after <= before + 1e-12)


class TestInformationGain:
    def test_identity(self):
        assert information_gain_proxy(np.eye(5), 0.5)["realized"] == pytest.approx(2.5 * np.log(3.0))

    def test_empty(self):
        assert information_gain_proxy(np.zeros((0, 0)), 1.0)["realized"] == 0.0

    def test_rank_one(self):
        assert information_gain_proxy(np.ones((7, 7)), 2.0)["realized"] == pytest.approx(0.5 * np.log(1 + 7 / 2.0))

    def test_greedy_bracket(self, data):
        mdp, _ = data
        K = cell_kernel(KernelSpec(), mdp.phi)
        out = information_gain_proxy(K[:5, :5], 1.0, pool=K, budget=5)
        assert 0.0 <= out["greedy"] <= out["greedy_upper"]


class TestKernelPlan:
    def test_huge_beta(self, data, linear_pair):
        mdp, ds = data
        K, _, _, _, krec = linear_pair
        pp = kernel_plan(ds, krec, K, mdp.S, mdp.A, LAM, 1e9)
        assert np.all(pp.Q_tilde == 0.0) and np.all(pp.actions == 0)

    @pytest.mark.parametrize("beta", [0.0, 0.05, 0.3])
    def test_matches_linear_planner(self, data, linear_pair, beta):
        mdp, ds = data
        K, _, _, rec, krec = linear_pair
        primal = plan(ds, rec, mdp.phi, PlannerConfig(beta=beta, lambda_reg=LAM))
        dual = kernel_plan(ds, krec, K, mdp.S, mdp.A, LAM, beta)
        np.testing.assert_array_equal(dual.actions, primal.actions)
        for name in ("Q_tilde", "V_tilde", "Gamma", "transition"):
            np.testing.assert_allclose(getattr(dual, name), getattr(primal, name), atol=1e-6)

    def test_single_step(self):
        mdp = random_instance(2, 4, 3, 1)
        ds = sample_dataset(mdp, solve_ddc(mdp, 0.9), 200, seed=1)
        K = cell_kernel(KernelSpec(kind="rbf"), mdp.phi)
        kest = kernel_fit_mle(ds, K, mdp.S, mdp.A, 1.0)
        krec = kernel_recover_reward(ds, kest, K, mdp.S, mdp.A, 0.9, 1.0)
        pp = kernel_plan(ds, krec, K, mdp.S, mdp.A, 1.0, 0.2)
        cells = ds.states[:, 0] * mdp.A + ds.actions[:, 0]
        Kh = K[np.ix_(cells, cells)]
        inv = np.linalg.inv(Kh + np.eye(len(cells)))
        for z in range(mdp.S * mdp.A):
            k = K[z, cells]
            gamma = 0.2 * np.sqrt(max(K[z, z] - k @ inv @ k, 0.0))
            q = min(max(krec.table[0].reshape(-1)[z] - gamma, 0.0), 1.0)
            assert pp.Q_tilde[0].reshape(-1)[z] == pytest.approx(q, abs=1e-10)
        np.testing.assert_array_equal(pp.actions[0], np.argmax(pp.Q_tilde[0], axis=-1))

    def test_gram_factorises_at_cap(self):
        mdp = random_instance(0, 5, 3, 2)
        ds = sample_dataset(mdp, solve_ddc(mdp, 0.9), 2000, seed=0)
        K = cell_kernel(KernelSpec(kind="rbf", bandwidth=0.5), mdp.phi)
        zeros = SimpleNamespace(Q_hat=np.zeros((2, mdp.S, mdp.A)), V_hat=np.zeros((2, mdp.S)))
        rec = kernel_recover_reward(ds, zeros, K, mdp.S, mdp.A, 0.9, 1.0)
        pp = kernel_plan(ds, rec, K, mdp.S, mdp.A, 1.0, 0.1)
        assert np.all(np.isfinite(pp.Q_tilde))


class TestSchedules:
    @pytest.mark.parametrize("regime", ["finite_spectrum", "exponential_decay", "polynomial_decay"])
    def test_presets(self, regime):
        out = rkhs_schedule(regime, n=1000, H=3, A=3, d=2, mu=3.0, d_eff_sample=1.5, tau=0.1)
        assert out["lambda_reg"] > 0 and out["beta"] > 0 and out["h_cap"] == 6

    def test_lambda_grows_with_n(self):
        small = rkhs_schedule("exponential_decay", 100, 3, 3, 2, 2.0, 1.0)
        big = rkhs_schedule("exponential_decay", 10_000, 3, 3, 2, 2.0, 1.0)
        assert big["lambda_reg"] > small["lambda_reg"]

    def test_polynomial_needs_fast_decay(self):
        with pytest.raises(ValueError):
            rkhs_schedule("polynomial_decay", 100, 3, 3, 2, mu=1.0, d_eff_sample=1.0, tau=0.2)

    def test_unknown(self):
        with pytest.raises(ValueError):
            rkhs_schedule("flat", 100, 3, 3, 2, 1.0, 1.0)
