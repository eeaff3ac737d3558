"""RKHS version of the pipeline in dual form.

The state-action domain is finite, so a kernel is represented by its matrix
over all cells ``z = (s, a)`` (flattened as ``s * A + a``).  Gram matrices of
a dataset are sub-matrices of it.  The kernel inputs are the MDP feature
vectors; ``linear_via_features`` is the plain inner product of features and
reproduces the linear pipeline exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp, softmax

from .agent import ChoiceDataset, empirical_action_frequencies
from .mdp import greedy
from .mle import MleConfig, MleConvergenceError
from .planner import PessimisticPolicy
from .reward import bellman_targets, spd_factor

MAX_KERNEL_SAMPLES = 2000


@dataclass(frozen=True)
class KernelSpec:
    kind: Literal["rbf", "polynomial", "linear_via_features"] = "rbf"
    bandwidth: float = 1.0
    degree: int = 2
    offset: float = 1.0
    lambda_reg: float = 1.0
    rkhs_norm_bound: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "polynomial", "linear_via_features"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        if self.degree < 1 or self.offset < 0:
            raise ValueError("polynomial kernel needs degree >= 1 and offset >= 0")


def cell_kernel(spec: KernelSpec, phi: np.ndarray) -> np.ndarray:
    """Kernel matrix over all ``S*A`` cells with ``K((s, 0), .) = 0``.

    Non-linear kernels are centred at each state's anchor cell,
    ``K~(z, z') = K(z, z') - K(z, z0') - K(z0, z') + K(z0, z0')``, which is the
    kernel of the feature difference ``psi(z) - psi(z0)``, and then scaled so
    that the largest diagonal entry is at most one.
    """
    S, A, d = phi.shape
    X = phi.reshape(S * A, d)
    if spec.kind == "linear_via_features":
        return X @ X.T
    if spec.kind == "rbf":
        sq = np.sum(X**2, axis=1)
        dist = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
        K = np.exp(-dist / (2 * spec.bandwidth**2))
    else:
        K = (X @ X.T + spec.offset) ** spec.degree
    anchor = np.repeat(np.arange(S) * A, A)
    K = K - K[:, anchor] - K[anchor, :] + K[np.ix_(anchor, anchor)]
    K = 0.5 * (K + K.T)
    top = np.max(np.diag(K))
    if top > 1.0:
        K = K / top
    return K


@dataclass(frozen=True, eq=False)
class KernelEstimate:
    """Dual representation of one fitted function per step.

    ``points[h]`` holds the cells of the expansion and ``alpha[h]`` the dual
    coefficients, so the fitted value at every cell is
    ``K[:, points[h]] @ alpha[h]``.  For the choice-model fit ``V_hat`` and
    ``pi_hat`` are filled in; regressions carry their response ``y``.
    """

    part: str
    points: list
    alpha: list
    table: np.ndarray
    lambda_reg: float
    y: list | None = None
    V_hat: np.ndarray | None = None
    pi_hat: np.ndarray | None = None
    log_likelihood: np.ndarray | None = None
    diagnostics: list = field(default_factory=list)

    @property
    def Q_hat(self) -> np.ndarray:
        return self.table

    def reward_table(self, phi=None) -> np.ndarray:
        return self.table

    def to_dict(self) -> dict:
        out = {
            "schema": "dcppo.kernel_estimate",
            "version": 1,
            "part": self.part,
            "lambda_reg": self.lambda_reg,
            "points": [np.asarray(p).tolist() for p in self.points],
            "alpha": [np.asarray(a).tolist() for a in self.alpha],
            "table": self.table.tolist(),
            "diagnostics": self.diagnostics,
        }
        if self.y is not None:
            out["y"] = [np.asarray(v).tolist() for v in self.y]
        for key in ("V_hat", "pi_hat", "log_likelihood"):
            value = getattr(self, key)
            if value is not None:
                out[key] = np.asarray(value).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "KernelEstimate":
        if data.get("schema") != "dcppo.kernel_estimate":
            raise ValueError("not a kernel estimate document")

        def table(key):
            return None if data.get(key) is None else np.asarray(data[key], dtype=np.float64)

        return cls(
            part=data["part"],
            points=[np.asarray(p, dtype=np.int64) for p in data["points"]],
            alpha=[np.asarray(a, dtype=np.float64) for a in data["alpha"]],
            table=np.asarray(data["table"], dtype=np.float64),
            lambda_reg=float(data["lambda_reg"]),
            y=None if data.get("y") is None else [np.asarray(v, dtype=np.float64) for v in data["y"]],
            V_hat=table("V_hat"),
            pi_hat=table("pi_hat"),
            log_likelihood=table("log_likelihood"),
            diagnostics=list(data.get("diagnostics", [])),
        )


def _dual_logit_step(N, support, K_sup, lam, cfg, step):
    """Newton ascent on ``L(K alpha) - lam/2 alpha^T K alpha`` for one step.

    ``N`` are choice counts ``(m_states, A)`` laid out like ``support``.
    Returns ``alpha`` and diagnostics.
    """
    n = N.sum()
    m_states, A = N.shape
    keep = support >= 0
    Nf = N.reshape(-1)[keep]
    Ns = N.sum(axis=1)
    m = int(keep.sum())
    alpha = np.zeros(m)

    def values(alpha):
        f = np.zeros(m_states * A)
        f[keep] = K_sup @ alpha
        return f.reshape(m_states, A)

    def objective(alpha, f):
        ll = (np.sum(N * f) - Ns @ logsumexp(f, axis=1)) / n
        return ll - 0.5 * lam * alpha @ (K_sup @ alpha)

    f = values(alpha)
    J = objective(alpha, f)
    for it in range(cfg.max_iterations):
        p = softmax(f, axis=1)
        g = ((N - Ns[:, None] * p) / n).reshape(-1)[keep]
        resid = g - lam * alpha
        gnorm = float(np.max(np.abs(resid))) if m else 0.0
        if gnorm <= cfg.gradient_tolerance:
            return alpha, {"step": step, "iterations": it, "grad_norm": gnorm}
        # Negative Hessian of L in function values: block-diagonal softmax covariance.
        negW = np.zeros((m_states * A, m_states * A))
        for s in range(m_states):
            block = Ns[s] * (np.diag(p[s]) - np.outer(p[s], p[s])) / n
            negW[s * A:(s + 1) * A, s * A:(s + 1) * A] = block
        negW = negW[np.ix_(keep, keep)]
        direction = np.linalg.solve(lam * np.eye(m) + negW @ K_sup, resid)
        t = 1.0
        slope = float(resid @ (K_sup @ direction))
        while True:
            cand = alpha + t * direction
            f_new = values(cand)
            J_new = objective(cand, f_new)
            if J_new >= J + 1e-4 * t * slope:
                break
            if abs(J_new - J) <= 1e-12 * (1.0 + abs(J)):
                p_new = softmax(f_new, axis=1)
                g_new = ((N - Ns[:, None] * p_new) / n).reshape(-1)[keep] - lam * cand
                if np.max(np.abs(g_new)) < gnorm:
                    break
            t *= 0.5
            if t < 1e-20:
                raise MleConvergenceError(step, alpha, gnorm, "dual line search failed")
        alpha, f, J = cand, f_new, J_new
    raise MleConvergenceError(step, alpha, gnorm, "iteration limit reached")


def kernel_fit_mle(
    ds: ChoiceDataset, K: np.ndarray, S: int, A: int, lambda_reg: float, cfg: MleConfig | None = None
) -> KernelEstimate:
    """Penalised kernel logistic regression of the choices, step by step.

    The expansion runs over every cell ``(s, a')`` of a visited state ``s``
    (the likelihood evaluates ``Q`` there); cells with zero kernel norm, such
    as the anchor cells, are dropped since they cannot carry weight.
    """
    cfg = cfg or MleConfig()
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    ds.check(S, A)
    counts = empirical_action_frequencies(ds, S, A)
    diag = np.diag(K)
    nonzero = diag > 1e-14 * max(1.0, float(diag.max()))
    Q = np.zeros((ds.H, S, A))
    points, alphas, lls, diags = [], [], [], []
    for h in range(ds.H):
        states = np.flatnonzero(counts[h].sum(axis=1) > 0)
        cells = (states[:, None] * A + np.arange(A)).reshape(-1)
        support = np.where(nonzero[cells], cells, -1)
        sup = cells[support >= 0]
        alpha, info = _dual_logit_step(counts[h][states], support, K[np.ix_(sup, sup)], lambda_reg, cfg, h)
        Q[h] = (K[:, sup] @ alpha).reshape(S, A)
        logits = Q[h][states]
        ll = (np.sum(counts[h][states] * logits) - counts[h][states].sum(axis=1) @ logsumexp(logits, axis=1)) / ds.n
        points.append(sup)
        alphas.append(alpha)
        lls.append(float(ll))
        diags.append(info)
    pi = softmax(Q, axis=-1)
    V = np.sum(pi * Q, axis=-1)
    return KernelEstimate(
        part="q", points=points, alpha=alphas, table=Q, lambda_reg=float(lambda_reg),
        V_hat=V, pi_hat=pi, log_likelihood=np.array(lls), diagnostics=diags,
    )


class _StepGram:
    """Sample cells of one step with a factorised ``K_h + lambda I``."""

    def __init__(self, K: np.ndarray, cells: np.ndarray, lambda_reg: float):
        self.cells = cells
        self.lambda_reg = lambda_reg
        self.K_h = K[np.ix_(cells, cells)]
        self.k_all = K[:, cells]
        self.k_diag = np.diag(K)
        self.factor = spd_factor(self.K_h + lambda_reg * np.eye(len(cells)), jitter=1e-10)

    def solve(self, y: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, y)

    def posterior_variance(self) -> np.ndarray:
        sol = cho_solve(self.factor, self.k_all.T)
        return self.k_diag - np.einsum("zn,nz->z", self.k_all, sol)


def _step_grams(ds: ChoiceDataset, K: np.ndarray, A: int, lambda_reg: float) -> list:
    if ds.n > MAX_KERNEL_SAMPLES:
        raise ValueError(f"kernel routines are capped at n <= {MAX_KERNEL_SAMPLES}, got {ds.n}")
    cells = ds.states[:, :-1] * A + ds.actions
    return [_StepGram(K, cells[:, h], lambda_reg) for h in range(ds.H)]


def kernel_recover_reward(
    ds: ChoiceDataset, est, K: np.ndarray, S: int, A: int, gamma: float, lambda_reg: float
) -> KernelEstimate:
    """Kernel ridge regression ``r_hat(z) = k_h(z)^T (K_h + lambda I)^{-1} y_h``."""
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    ds.check(S, A)
    y = bellman_targets(ds, est.Q_hat, est.V_hat, gamma)
    if not np.all(np.isfinite(y)):
        i, h = np.argwhere(~np.isfinite(y))[0]
        raise ValueError(f"non-finite regression target at step {h}, sample {i}")
    grams = _step_grams(ds, K, A, lambda_reg)
    alphas = [g.solve(y[:, h]) for h, g in enumerate(grams)]
    table = np.stack([(g.k_all @ a).reshape(S, A) for g, a in zip(grams, alphas)])
    return KernelEstimate(
        part="reward", points=[g.cells for g in grams], alpha=alphas, table=table,
        lambda_reg=float(lambda_reg), y=[y[:, h] for h in range(ds.H)],
    )


def kernel_penalty(
    k_zz: float | np.ndarray, k_z: np.ndarray, K_h: np.ndarray, lambda_reg: float, beta: float
) -> np.ndarray:
    """``beta * lambda^{-1/2} * sqrt(K(z, z) - k_h(z)^T (K_h + lambda I)^{-1} k_h(z))``.

    ``k_z`` is ``(n,)`` for one point or ``(m, n)`` for ``m`` points.
    """
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    k_zz = np.asarray(k_zz, dtype=np.float64)
    k_z = np.atleast_2d(np.asarray(k_z, dtype=np.float64))
    if k_z.shape[1] == 0:
        radicand = k_zz
    else:
        factor = spd_factor(K_h + lambda_reg * np.eye(K_h.shape[0]), jitter=1e-10)
        radicand = k_zz - np.einsum("mn,nm->m", k_z, cho_solve(factor, k_z.T)).reshape(k_zz.shape)
    return beta * _safe_sqrt(radicand) / np.sqrt(lambda_reg)


def _safe_sqrt(radicand: np.ndarray) -> np.ndarray:
    if np.min(radicand, initial=0.0) < -1e-8:
        raise FloatingPointError(f"posterior variance {np.min(radicand):.3e} is negative")
    return np.sqrt(np.maximum(radicand, 0.0))


def information_gain_proxy(
    K_D: np.ndarray, lambda_reg: float, pool: np.ndarray | None = None, budget: int | None = None
) -> dict:
    """Realised ``1/2 log det(I + K_D / lambda)`` plus a greedy estimate of its supremum.

    The greedy pass picks, ``budget`` times, the pool point of largest
    posterior variance (repeats allowed); by submodularity of the log-det the
    true supremum over the pool lies between the greedy value and the greedy
    value divided by ``1 - 1/e``.  Neither is the exact supremum.
    """
    K_D = np.atleast_2d(np.asarray(K_D, dtype=np.float64))
    n = K_D.shape[0] if K_D.size else 0
    if n == 0:
        realized = 0.0
    else:
        sign, logdet = np.linalg.slogdet(np.eye(n) + K_D / lambda_reg)
        realized = 0.5 * logdet
    out = {"realized": float(realized)}
    if pool is not None:
        budget = n if budget is None else budget
        cov = np.array(pool, dtype=np.float64)
        greedy_gain = 0.0
        for _ in range(budget):
            var = np.diag(cov)
            j = int(np.argmax(var))
            if var[j] <= 0:
                break
            greedy_gain += 0.5 * np.log1p(var[j] / lambda_reg)
            cov = cov - np.outer(cov[:, j], cov[j, :]) / (var[j] + lambda_reg)
        out["greedy"] = float(greedy_gain)
        out["greedy_upper"] = float(greedy_gain / (1.0 - np.exp(-1.0)))
    return out


def kernel_plan(
    ds: ChoiceDataset, reward: KernelEstimate, K: np.ndarray, S: int, A: int, lambda_reg: float, beta: float
) -> PessimisticPolicy:
    """Pessimistic value iteration with kernel ridge transitions and the RKHS penalty."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    H = ds.H
    if reward.table.shape != (H, S, A):
        raise ValueError(f"reward table shape {reward.table.shape} does not match {(H, S, A)}")
    grams = _step_grams(ds, K, A, lambda_reg)
    Q = np.empty((H, S, A))
    V = np.empty((H, S))
    pi = np.empty((H, S, A))
    Gamma = np.empty((H, S, A))
    trans = np.empty((H, S, A))
    v_next = np.zeros(S)
    for h in reversed(range(H)):
        g = grams[h]
        trans[h] = (g.k_all @ g.solve(v_next[ds.states[:, h + 1]])).reshape(S, A)
        Gamma[h] = (beta * _safe_sqrt(g.posterior_variance()) / np.sqrt(lambda_reg)).reshape(S, A)
        Q[h] = np.clip(reward.table[h] + trans[h] - Gamma[h], 0.0, H - h)
        pi[h] = greedy(Q[h])
        V[h] = Q[h].max(axis=-1)
        v_next = V[h]
    return PessimisticPolicy(
        pi_tilde=pi, Q_tilde=Q, V_tilde=V, Gamma=Gamma, transition=trans, beta=float(beta)
    )


def rkhs_schedule(
    regime: Literal["finite_spectrum", "exponential_decay", "polynomial_decay"],
    n: int,
    H: int,
    A: int,
    d: int,
    mu: float,
    d_eff_sample: float,
    lambda_constant: float = 1.0,
    beta_constant: float = 1.0,
    tau: float = 0.0,
    rkhs_norm_bound: float = 1.0,
    delta: float = 0.05,
    h_cap: int = 6,
) -> dict:
    """Regularisation and penalty scale for the three eigenvalue-decay regimes.

    Both absolute constants are user supplied; ``e^H`` is capped at
    ``e^{h_cap}`` as in the linear schedule.
    """
    R = rkhs_norm_bound
    log_term = np.log(n / delta)
    log_beta = np.log(n * R * H / delta)
    growth = np.exp(min(H, h_cap)) * A * d_eff_sample
    if regime == "finite_spectrum":
        lam = lambda_constant * mu * log_term
        tail = log_beta ** (0.5 + 0.5 / mu)
    elif regime == "exponential_decay":
        lam = lambda_constant * log_term ** (1.0 + 1.0 / mu)
        tail = log_beta ** (0.5 + 0.5 / mu)
    elif regime == "polynomial_decay":
        if mu * (1 - 2 * tau) <= 1:
            raise ValueError("polynomial decay needs mu * (1 - 2 tau) > 1")
        lam = lambda_constant * (n / H) ** (2.0 / (mu * (1 - 2 * tau) - 1)) * log_term
        kappa = (d + 1) / (2 * (mu + d)) + 1 / (mu * (1 - 2 * tau) - 1)
        tail = (n * R) ** kappa * np.sqrt(log_beta)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    beta = beta_constant * H * (np.sqrt(lam) * R + growth * tail)
    return {"lambda_reg": float(lam), "beta": float(beta), "h_cap": h_cap}
