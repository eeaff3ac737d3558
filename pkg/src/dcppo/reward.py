"""Reward recovery by ridge regression on the estimated Bellman residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .agent import ChoiceDataset
from .mdp import TabularLinearMdp


def spd_factor(M: np.ndarray, jitter: float = 1e-12):
    """Cholesky factor of a symmetric positive definite matrix, jittered once on failure."""
    try:
        return cho_factor(M, lower=True)
    except LinAlgError:
        scale = max(1.0, float(np.max(np.abs(np.diag(M)))))
        return cho_factor(M + jitter * scale * np.eye(M.shape[0]), lower=True)


def gram_matrices(ds: ChoiceDataset, phi: np.ndarray) -> np.ndarray:
    """``Lambda_h = sum_i phi(s_h^i, a_h^i) phi(s_h^i, a_h^i)^T`` for every step."""
    X = phi[ds.states[:, :-1], ds.actions]  # (n, H, d)
    return np.einsum("nhd,nhe->hde", X, X)


def elliptical_potential(phi_vec: np.ndarray, Lambda: np.ndarray, lambda_reg: float) -> np.ndarray:
    """``sqrt(phi^T (Lambda + lambda I)^{-1} phi)``; ``phi_vec`` may be a stack of rows."""
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    phi_vec = np.asarray(phi_vec, dtype=np.float64)
    factor = spd_factor(Lambda + lambda_reg * np.eye(Lambda.shape[0]))
    flat = phi_vec.reshape(-1, Lambda.shape[0])
    quad = np.einsum("nd,dn->n", flat, cho_solve(factor, flat.T))
    return np.sqrt(np.maximum(quad, 0.0)).reshape(phi_vec.shape[:-1])


@dataclass(frozen=True, eq=False)
class RecoveredReward:
    w_hat: np.ndarray
    Lambda: np.ndarray
    lambda_reg: float

    def reward_table(self, phi: np.ndarray) -> np.ndarray:
        return np.einsum("sad,hd->hsa", phi, self.w_hat)

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.reward",
            "version": 1,
            "lambda_reg": self.lambda_reg,
            "w_hat": self.w_hat.tolist(),
            "Lambda": self.Lambda.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RecoveredReward":
        if data.get("schema") != "dcppo.reward":
            raise ValueError("not a reward document")
        return cls(
            w_hat=np.asarray(data["w_hat"], dtype=np.float64),
            Lambda=np.asarray(data["Lambda"], dtype=np.float64),
            lambda_reg=float(data["lambda_reg"]),
        )


def bellman_targets(ds: ChoiceDataset, Q_hat: np.ndarray, V_hat: np.ndarray, gamma: float) -> np.ndarray:
    """``Q_hat_h(s, a) - gamma V_hat_{h+1}(s')`` per sample, ``(n, H)``; ``V_hat_H = 0``."""
    H = ds.H
    y = np.empty((ds.n, H))
    for h in range(H):
        s, a, s_next = ds.step(h)
        v_next = V_hat[h + 1, s_next] if h + 1 < H else 0.0
        y[:, h] = Q_hat[h, s, a] - gamma * v_next
    return y


def recover_reward(
    ds: ChoiceDataset, est, phi: np.ndarray, gamma: float, lambda_reg: float = 1.0
) -> RecoveredReward:
    """Closed-form ridge solution ``w_h = (Lambda_h + lambda I)^{-1} sum_i phi_i y_i``.

    ``est`` only needs ``Q_hat`` and ``V_hat`` tables, so oracle value functions
    can be passed in place of an :class:`~dcppo.mle.EstimatedModel`.
    """
    if not lambda_reg > 0:
        raise ValueError(f"lambda_reg must be positive, got {lambda_reg}")
    phi = np.asarray(phi, dtype=np.float64)
    y = bellman_targets(ds, est.Q_hat, est.V_hat, gamma)
    bad = np.argwhere(~np.isfinite(y))
    if bad.size:
        i, h = bad[0]
        raise ValueError(f"non-finite regression target at step {h}, sample {i}")
    X = phi[ds.states[:, :-1], ds.actions]
    Lambda = np.einsum("nhd,nhe->hde", X, X)
    rhs = np.einsum("nhd,nh->hd", X, y)
    eye = np.eye(phi.shape[-1])
    w_hat = np.stack([cho_solve(spd_factor(L + lambda_reg * eye), b) for L, b in zip(Lambda, rhs)])
    return RecoveredReward(w_hat=w_hat, Lambda=Lambda, lambda_reg=float(lambda_reg))


def reward_error_certificate(rec: RecoveredReward, mdp: TabularLinearMdp) -> dict:
    """Tables ``|r - r_hat|`` and its ratio to the elliptical potential, ``(H, S, A)``.

    The ratio is ``inf`` where the potential vanishes but the error does not and
    ``0`` where both vanish.
    """
    err = np.abs(mdp.rewards - rec.reward_table(mdp.phi))
    width = np.stack([elliptical_potential(mdp.phi, L, rec.lambda_reg) for L in rec.Lambda])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(width > 0, err / np.where(width > 0, width, 1.0), np.where(err > 0, np.inf, 0.0))
    return {"abs_error": err, "potential": width, "ratio": ratio}
