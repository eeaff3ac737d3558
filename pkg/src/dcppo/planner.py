"""Pessimistic value iteration on the recovered reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import cho_solve

from .agent import ChoiceDataset
from .mdp import TabularLinearMdp, greedy, state_occupancy
from .reward import RecoveredReward, elliptical_potential, spd_factor


def scheduled_beta(
    constant: float, H: int, A: int, d: int, n: int, delta: float = 0.05, h_cap: int = 6
) -> float:
    """``c * H * e^{min(H, h_cap)} * |A| * d * sqrt(log(n H / delta))``."""
    return float(constant * H * np.exp(min(H, h_cap)) * A * d * np.sqrt(np.log(n * H / delta)))


@dataclass(frozen=True)
class PlannerConfig:
    beta: float = 0.0
    lambda_reg: float = 1.0
    beta_mode: Literal["manual", "theorem_schedule"] = "manual"
    schedule_constant: float = 0.0
    delta: float = 0.05
    h_cap: int = 6

    def __post_init__(self):
        if self.beta < 0 or self.schedule_constant < 0:
            raise ValueError("beta and schedule_constant must be nonnegative")
        if self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        if self.beta_mode not in ("manual", "theorem_schedule"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def resolve_beta(self, H: int, A: int, d: int, n: int) -> float:
        if self.beta_mode == "manual":
            return self.beta
        return scheduled_beta(self.schedule_constant, H, A, d, n, self.delta, self.h_cap)


@dataclass(frozen=True, eq=False)
class PessimisticPolicy:
    pi_tilde: np.ndarray
    Q_tilde: np.ndarray
    V_tilde: np.ndarray
    Gamma: np.ndarray
    transition: np.ndarray
    beta: float
    # Transition-regression weights; only the linear planner has them.
    u_tilde: np.ndarray | None = None

    @property
    def actions(self) -> np.ndarray:
        return np.argmax(self.pi_tilde, axis=-1)

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.policy",
            "version": 1,
            "beta": self.beta,
            "actions": self.actions.tolist(),
            "Q_tilde": self.Q_tilde.tolist(),
            "V_tilde": self.V_tilde.tolist(),
            "Gamma": self.Gamma.tolist(),
            "transition": self.transition.tolist(),
            "u_tilde": None if self.u_tilde is None else self.u_tilde.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PessimisticPolicy":
        if data.get("schema") != "dcppo.policy":
            raise ValueError("not a policy document")
        Q = np.asarray(data["Q_tilde"], dtype=np.float64)
        actions = np.asarray(data["actions"], dtype=np.int64)
        return cls(
            pi_tilde=np.eye(Q.shape[-1])[actions],
            Q_tilde=Q,
            V_tilde=np.asarray(data["V_tilde"], dtype=np.float64),
            Gamma=np.asarray(data["Gamma"], dtype=np.float64),
            transition=np.asarray(data["transition"], dtype=np.float64),
            beta=float(data["beta"]),
            u_tilde=None if data.get("u_tilde") is None else np.asarray(data["u_tilde"], dtype=np.float64),
        )


def pessimistic_backup(r_hat, transition, gamma_pen, horizon_left):
    """Truncated pessimistic Q and its greedy policy and value for one step."""
    Q = np.clip(r_hat + transition - gamma_pen, 0.0, horizon_left)
    return Q, greedy(Q), Q.max(axis=-1)


def plan(
    ds: ChoiceDataset, rec: RecoveredReward, phi: np.ndarray, cfg: PlannerConfig
) -> PessimisticPolicy:
    """Backward pessimistic value iteration with the elliptical penalty."""
    phi = np.asarray(phi, dtype=np.float64)
    S, A, d = phi.shape
    H = ds.H
    if rec.w_hat.shape != (H, d) or rec.Lambda.shape != (H, d, d):
        raise ValueError(
            f"recovered reward shapes {rec.w_hat.shape}/{rec.Lambda.shape} do not match H={H}, d={d}"
        )
    ds.check(S, A)
    beta = cfg.resolve_beta(H, A, d, ds.n)
    lam = cfg.lambda_reg
    r_hat = rec.reward_table(phi)
    X = phi[ds.states[:, :-1], ds.actions]
    Q = np.empty((H, S, A))
    V = np.empty((H, S))
    pi = np.empty((H, S, A))
    Gamma = np.empty((H, S, A))
    trans = np.empty((H, S, A))
    u = np.empty((H, d))
    v_next = np.zeros(S)
    for h in reversed(range(H)):
        factor = spd_factor(rec.Lambda[h] + lam * np.eye(d))
        u[h] = cho_solve(factor, X[:, h].T @ v_next[ds.states[:, h + 1]])
        trans[h] = phi @ u[h]
        Gamma[h] = beta * elliptical_potential(phi, rec.Lambda[h], lam)
        Q[h], pi[h], V[h] = pessimistic_backup(r_hat[h], trans[h], Gamma[h], H - h)
        v_next = V[h]
    return PessimisticPolicy(
        pi_tilde=pi, Q_tilde=Q, V_tilde=V, Gamma=Gamma, transition=trans, beta=beta, u_tilde=u
    )


def uncertainty_violation_audit(
    pp: PessimisticPolicy, rec, mdp: TabularLinearMdp, gamma_eval: float = 1.0
) -> dict:
    """Check ``|(r_hat + P_tilde V_tilde) - (r + P V_tilde)| <= Gamma`` at every cell.

    ``rec`` is anything with a ``reward_table(phi)`` method (linear or kernel
    reward estimates) or a plain ``(H, S, A)`` reward table.
    """
    H = mdp.H
    r_hat = rec.reward_table(mdp.phi) if hasattr(rec, "reward_table") else np.asarray(rec)
    r = mdp.rewards
    errors = np.empty((H, mdp.S, mdp.A))
    for h in range(H):
        v_next = pp.V_tilde[h + 1] if h + 1 < H else np.zeros(mdp.S)
        truth = r[h] + gamma_eval * mdp.P[h] @ v_next
        errors[h] = np.abs(r_hat[h] + pp.transition[h] - truth)
    violated = errors > pp.Gamma
    positive = pp.Gamma > 0
    ratios = errors[positive] / pp.Gamma[positive]
    return {
        "violations_per_step": violated.sum(axis=(1, 2)).tolist(),
        "violations": int(violated.sum()),
        "violated": bool(violated.any()),
        "violation_fraction": float(violated.mean()),
        "max_ratio": float(ratios.max()) if ratios.size else 0.0,
        "max_abs_error": float(errors.max()),
    }


def suboptimality_bound(
    pp: PessimisticPolicy, mdp: TabularLinearMdp, pi_star: np.ndarray
) -> float:
    """``2 sum_h E_{pi*}[Gamma_h(s_h, a_h)]`` under the true dynamics."""
    mu = state_occupancy(mdp, pi_star)
    return float(2.0 * np.einsum("hs,hsa,hsa->", mu, pi_star, pp.Gamma))
