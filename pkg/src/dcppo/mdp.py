"""Finite-horizon MDPs with explicit feature maps and exact dynamic programming.

Conventions used throughout the package:

* steps are 0-indexed, ``h = 0, ..., H-1``; the terminal value ``V_H`` is zero;
* the last state ``S-1`` is the absorbing opt-out state and action ``0`` is the
  anchor action.  Choosing the anchor moves to the absorbing state, which pays
  nothing forever, so every value function has ``Q_h(s, 0) = 0``;
* arrays are dense: ``phi`` is ``(S, A, d)``, ``P`` is ``(H, S, A, S)``,
  ``w`` is ``(H, d)``, value tables are ``Q: (H, S, A)`` and ``V: (H, S)``,
  policies are ``(H, S, A)`` probability tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

ANCHOR_ACTION = 0

FeatureMode = Literal["one_hot_tabular", "random_linear"]
TransitionMode = Literal["dirichlet", "deterministic"]


class InvalidMdpError(ValueError):
    """Raised when an MDP or a policy violates a structural invariant."""


@dataclass(frozen=True, eq=False)
class TabularLinearMdp:
    """Ground-truth environment: features, transitions and reward weights."""

    phi: np.ndarray
    P: np.ndarray
    w: np.ndarray
    s_init: int = 0

    def __post_init__(self):
        for name in ("phi", "P", "w"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def S(self) -> int:
        return self.phi.shape[0]

    @property
    def A(self) -> int:
        return self.phi.shape[1]

    @property
    def d(self) -> int:
        return self.phi.shape[2]

    @property
    def H(self) -> int:
        return self.P.shape[0]

    @property
    def s_abs(self) -> int:
        return self.S - 1

    @property
    def rewards(self) -> np.ndarray:
        """Reward table ``r_h(s, a) = phi(s, a) . w_h`` with shape ``(H, S, A)``."""
        return np.einsum("sad,hd->hsa", self.phi, self.w)

    def validate(self, atol: float = 1e-12) -> "TabularLinearMdp":
        S, A, d, H = self.S, self.A, self.d, self.H
        if S < 2 or A < 2:
            raise InvalidMdpError(f"need S >= 2 and A >= 2, got S={S}, A={A}")
        if self.P.shape != (H, S, A, S):
            raise InvalidMdpError(f"P has shape {self.P.shape}, expected {(H, S, A, S)}")
        if self.w.shape != (H, d):
            raise InvalidMdpError(f"w has shape {self.w.shape}, expected {(H, d)}")
        if not 0 <= self.s_init < S:
            raise InvalidMdpError(f"s_init={self.s_init} out of range")
        if np.any(self.P < 0):
            raise InvalidMdpError("negative transition probability")
        sums = self.P.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > atol:
            h, s, a = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
            raise InvalidMdpError(f"P_{h}(.|{s},{a}) sums to {sums[h, s, a]!r}")
        if np.max(np.linalg.norm(self.phi, axis=-1)) > 1.0 + atol:
            raise InvalidMdpError("feature norm exceeds 1")
        if np.any(self.phi[:, ANCHOR_ACTION] != 0.0):
            raise InvalidMdpError("anchor action must have zero features")
        if np.any(self.phi[self.s_abs] != 0.0):
            raise InvalidMdpError("absorbing state must have zero features")
        if np.max(np.linalg.norm(self.w, axis=-1)) > np.sqrt(d) + atol:
            raise InvalidMdpError("reward weight norm exceeds sqrt(d)")
        r = self.rewards
        if r.min() < -atol or r.max() > 1.0 + atol:
            raise InvalidMdpError("rewards must lie in [0, 1]")
        if np.any(self.P[:, :, ANCHOR_ACTION, self.s_abs] != 1.0):
            raise InvalidMdpError("anchor action must lead to the absorbing state")
        if np.any(self.P[:, self.s_abs, :, self.s_abs] != 1.0):
            raise InvalidMdpError("absorbing state must be closed")
        return self

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.mdp",
            "version": 1,
            "S": self.S,
            "A": self.A,
            "H": self.H,
            "d": self.d,
            "s_init": int(self.s_init),
            "phi": self.phi.tolist(),
            "P": self.P.tolist(),
            "w": self.w.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularLinearMdp":
        if data.get("schema") != "dcppo.mdp" or data.get("version") != 1:
            raise InvalidMdpError("unsupported MDP document")
        mdp = cls(
            phi=np.asarray(data["phi"], dtype=np.float64).reshape(data["S"], data["A"], data["d"]),
            P=np.asarray(data["P"], dtype=np.float64).reshape(
                data["H"], data["S"], data["A"], data["S"]
            ),
            w=np.asarray(data["w"], dtype=np.float64).reshape(data["H"], data["d"]),
            s_init=int(data["s_init"]),
        )
        return mdp.validate()


@dataclass(frozen=True, eq=False)
class ValueTables:
    Q: np.ndarray
    V: np.ndarray


def check_policy(mdp: TabularLinearMdp, pi: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    expected = (mdp.H, mdp.S, mdp.A)
    if pi.ndim != 3 or pi.shape[1:] != expected[1:]:
        raise InvalidMdpError(f"policy has shape {pi.shape}, expected {expected}")
    if pi.shape[0] != mdp.H:
        raise InvalidMdpError(
            f"policy covers {pi.shape[0]} steps; step {min(pi.shape[0], mdp.H)} is missing or extra"
        )
    for h in range(mdp.H):
        if np.any(pi[h] < 0) or np.max(np.abs(pi[h].sum(axis=-1) - 1.0)) > atol:
            raise InvalidMdpError(f"policy rows at step {h} are not probability vectors")
    return pi


def evaluate_policy(mdp: TabularLinearMdp, pi: np.ndarray, gamma: float = 1.0) -> ValueTables:
    """Backward recursion ``Q_h = r_h + gamma P_h V_{h+1}``, ``V_h = <pi_h, Q_h>``."""
    pi = check_policy(mdp, pi)
    r = mdp.rewards
    Q = np.empty((mdp.H, mdp.S, mdp.A))
    V = np.empty((mdp.H, mdp.S))
    v_next = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        Q[h] = r[h] + gamma * mdp.P[h] @ v_next
        V[h] = np.sum(pi[h] * Q[h], axis=-1)
        v_next = V[h]
    return ValueTables(Q=Q, V=V)


def greedy(Q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy table; ties go to the lowest action index."""
    A = Q.shape[-1]
    return np.eye(A)[np.argmax(Q, axis=-1)]


def optimal_policy(mdp: TabularLinearMdp) -> tuple[np.ndarray, ValueTables]:
    """Undiscounted backward induction."""
    r = mdp.rewards
    Q = np.empty((mdp.H, mdp.S, mdp.A))
    V = np.empty((mdp.H, mdp.S))
    v_next = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        Q[h] = r[h] + mdp.P[h] @ v_next
        V[h] = Q[h].max(axis=-1)
        v_next = V[h]
    return greedy(Q), ValueTables(Q=Q, V=V)


def suboptimality(mdp: TabularLinearMdp, pi: np.ndarray) -> float:
    _, best = optimal_policy(mdp)
    mine = evaluate_policy(mdp, pi, gamma=1.0)
    return float(best.V[0, mdp.s_init] - mine.V[0, mdp.s_init])


def state_occupancy(mdp: TabularLinearMdp, pi: np.ndarray) -> np.ndarray:
    """Exact state marginals ``(H, S)`` of the process started at ``s_init``."""
    mu = np.zeros((mdp.H, mdp.S))
    mu[0, mdp.s_init] = 1.0
    for h in range(mdp.H - 1):
        mu[h + 1] = np.einsum("s,sa,sat->t", mu[h], pi[h], mdp.P[h])
    return mu


def feature_second_moments(mdp: TabularLinearMdp, pi: np.ndarray) -> np.ndarray:
    """``E_pi[phi phi^T]`` per step, shape ``(H, d, d)``."""
    mu = state_occupancy(mdp, pi)
    weights = mu[:, :, None] * pi
    return np.einsum("hsa,sad,sae->hde", weights, mdp.phi, mdp.phi)


def random_instance(
    seed: int,
    S: int,
    A: int,
    H: int,
    d: int | None = None,
    feature_mode: FeatureMode = "one_hot_tabular",
    transition_mode: TransitionMode = "dirichlet",
    reward_scale: float | None = None,
    dirichlet_alpha: float = 1.0,
) -> TabularLinearMdp:
    """Draw a valid opt-out MDP.

    Rewards of non-anchor actions are drawn so that ``r_h`` lies in
    ``[0, reward_scale]`` with ``reward_scale = 1/H`` by default.  Transitions of
    non-anchor actions from live states only reach live states.
    """
    if S < 2 or A < 2 or H < 1:
        raise InvalidMdpError(f"infeasible dimensions S={S}, A={A}, H={H}")
    n_live = S - 1
    if feature_mode == "one_hot_tabular":
        expected = n_live * (A - 1)
        if d is not None and d != expected:
            raise InvalidMdpError(f"one_hot_tabular requires d = (S-1)(A-1) = {expected}, got {d}")
        d = expected
    elif feature_mode == "random_linear":
        if d is None or d < 1:
            raise InvalidMdpError("random_linear requires d >= 1")
    else:
        raise InvalidMdpError(f"unknown feature_mode {feature_mode!r}")
    if reward_scale is None:
        reward_scale = 1.0 / H
    if not 0.0 < reward_scale <= 1.0:
        raise InvalidMdpError("reward_scale must lie in (0, 1]")

    rng = np.random.default_rng(seed)
    phi = np.zeros((S, A, d))
    if feature_mode == "one_hot_tabular":
        for s in range(n_live):
            for a in range(1, A):
                phi[s, a, s * (A - 1) + a - 1] = 1.0
        w = rng.uniform(0.0, reward_scale, size=(H, d))
    else:
        raw = rng.uniform(0.0, 1.0, size=(n_live, A - 1, d))
        raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
        raw *= rng.uniform(0.5, 1.0, size=(n_live, A - 1, 1))
        phi[:n_live, 1:] = raw
        w = rng.uniform(0.0, 1.0, size=(H, d))
        r_max = np.einsum("sad,hd->hsa", raw, w).max(axis=(1, 2))
        w *= (reward_scale * rng.uniform(0.5, 1.0, size=H) / r_max)[:, None]
        norms = np.linalg.norm(w, axis=-1)
        w *= np.minimum(1.0, np.sqrt(d) / norms)[:, None]

    P = np.zeros((H, S, A, S))
    P[:, :, ANCHOR_ACTION, S - 1] = 1.0
    P[:, S - 1, :, :] = 0.0
    P[:, S - 1, :, S - 1] = 1.0
    if transition_mode == "dirichlet":
        P[:, :n_live, 1:, :n_live] = rng.dirichlet(
            np.full(n_live, dirichlet_alpha), size=(H, n_live, A - 1)
        )
    elif transition_mode == "deterministic":
        nxt = rng.integers(0, n_live, size=(H, n_live, A - 1))
        P[:, :n_live, 1:, :n_live] = np.eye(n_live)[nxt]
    else:
        raise InvalidMdpError(f"unknown transition_mode {transition_mode!r}")
    return TabularLinearMdp(phi=phi, P=P, w=w, s_init=0).validate()


def linear_mdp_residual(mdp: TabularLinearMdp, n_trials: int = 100, seed: int = 0) -> float:
    """Worst residual of fitting ``P_h V`` linearly in the features.

    Draws bounded value vectors that vanish on the absorbing state (every value
    function of an opt-out MDP does), regresses ``P_h V`` on ``phi`` by least
    squares, and returns the largest absolute residual over all trials.
    """
    rng = np.random.default_rng(seed)
    X = mdp.phi.reshape(-1, mdp.d)
    worst = 0.0
    for _ in range(n_trials):
        h = int(rng.integers(mdp.H))
        V = rng.uniform(0.0, mdp.H - h, size=mdp.S)
        V[mdp.s_abs] = 0.0
        target = (mdp.P[h] @ V).reshape(-1)
        u, *_ = np.linalg.lstsq(X, target, rcond=None)
        worst = max(worst, float(np.max(np.abs(X @ u - target))))
    return worst
