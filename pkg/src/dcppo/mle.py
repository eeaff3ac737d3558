"""Per-step multinomial-logit maximum likelihood for the agent's Q-function.

For each step the log-likelihood of the observed choices under
``pi(a|s) proportional to exp(phi(s, a) . theta)`` is concave in ``theta``.  It
is maximised over the Euclidean ball ``||theta|| <= parameter_bound`` by damped
Newton.  When the unconstrained maximiser does not exist or lies outside the
ball (an action never observed at a visited state pushes ``theta`` to
infinity), the boundary solution is found through its KKT multiplier: for a
penalty ``mu`` the penalised maximiser ``theta(mu)`` has a norm decreasing in
``mu``, and the root of ``||theta(mu)|| = parameter_bound`` is located by
Brent's method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

from .agent import BehaviorModel, ChoiceDataset, empirical_action_frequencies


class MleConvergenceError(RuntimeError):
    def __init__(self, step: int, theta: np.ndarray, grad_norm: float, message: str = ""):
        self.step = step
        self.theta = theta
        self.grad_norm = grad_norm
        super().__init__(
            f"MLE at step {step} did not converge (gradient sup-norm {grad_norm:.3e}). {message}"
        )


@dataclass(frozen=True)
class MleConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-9
    parameter_bound: float | None = None
    solver: Literal["newton", "gradient_descent_backtracking"] = "newton"
    # Optional ridge penalty (ridge / 2) * ||theta||^2 on the mean log-likelihood.
    ridge: float = 0.0

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.parameter_bound is not None and self.parameter_bound <= 0:
            raise ValueError("parameter_bound must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.solver not in ("newton", "gradient_descent_backtracking"):
            raise ValueError(f"unknown solver {self.solver!r}")


class ChoiceLikelihood:
    """Mean log-likelihood of one step's choices, aggregated by visited state."""

    def __init__(self, counts: np.ndarray, phi: np.ndarray):
        visited = counts.sum(axis=-1) > 0
        self.counts = counts[visited]
        self.phi = phi[visited]
        self.n = counts.sum()
        self.state_counts = self.counts.sum(axis=-1)
        self.d = phi.shape[-1]
        self._linear = np.einsum("sa,sad->d", self.counts, self.phi) / self.n

    def value(self, theta: np.ndarray) -> float:
        logits = self.phi @ theta
        ll = np.sum(self.counts * logits) - np.sum(self.state_counts * logsumexp(logits, axis=-1))
        return float(ll / self.n)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        p = softmax(self.phi @ theta, axis=-1)
        mean_phi = np.einsum("sa,sad->sd", p, self.phi)
        return self._linear - self.state_counts @ mean_phi / self.n

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        p = softmax(self.phi @ theta, axis=-1)
        mean_phi = np.einsum("sa,sad->sd", p, self.phi)
        wts = self.state_counts[:, None] * p
        second = np.einsum("sa,sad,sae->de", wts, self.phi, self.phi)
        first = np.einsum("s,sd,se->de", self.state_counts, mean_phi, mean_phi)
        return -(second - first) / self.n


def _penalised(lik: ChoiceLikelihood, theta: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    return lik.value(theta) - 0.5 * mu * theta @ theta, lik.gradient(theta) - mu * theta


def _newton_direction(neg_hess: np.ndarray, g: np.ndarray) -> np.ndarray:
    scale = max(1.0, float(np.trace(neg_hess)))
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            factor = cho_factor(neg_hess + jitter * scale * np.eye(len(g)))
            return cho_solve(factor, g)
        except LinAlgError:
            continue
    return g


def _ascend(
    lik: ChoiceLikelihood,
    theta: np.ndarray,
    mu: float,
    tol: float,
    max_iter: int,
    newton: bool = True,
    abort_norm: float = np.inf,
) -> tuple[np.ndarray, int, float, bool]:
    """Maximise ``L(theta) - mu/2 ||theta||^2`` by damped Newton or gradient ascent."""
    f, g = _penalised(lik, theta, mu)
    step_size = 1.0
    for it in range(max_iter):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol:
            return theta, it, gnorm, True
        if newton:
            neg_hess = -lik.hessian(theta) + mu * np.eye(lik.d)
            direction = _newton_direction(neg_hess, g)
            t = 1.0
        else:
            direction = g
            t = min(step_size * 2.0, 1e6)
        slope = float(g @ direction)
        # Sufficient-increase constant: loose for Newton, 1/2 for gradient steps
        # so the accepted step stays below the inverse curvature.
        armijo = 1e-4 if newton else 0.5
        while True:
            cand = theta + t * direction
            f_new, g_new = _penalised(lik, cand, mu)
            if f_new >= f + armijo * t * slope:
                break
            # Near the optimum the objective change drowns in roundoff; progress
            # in the gradient is then the only usable signal.
            if abs(f_new - f) <= 1e-12 * (1.0 + abs(f)):
                if newton and np.max(np.abs(g_new)) < gnorm:
                    break
                if not newton and g_new @ direction >= 0.0:
                    break
            t *= 0.5
            if t < 1e-20:
                return theta, it, gnorm, False
        step_size = t
        theta, f, g = cand, f_new, g_new
        if np.linalg.norm(theta) > abort_norm:
            return theta, it + 1, float(np.max(np.abs(g))), False
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return theta, max_iter, gnorm, gnorm <= tol


@dataclass
class StepFit:
    theta: np.ndarray
    iterations: int
    grad_norm: float
    on_boundary: bool
    log_likelihood: float


def maximise_step(
    lik: ChoiceLikelihood, cfg: MleConfig, bound: float, step: int = 0, theta0=None
) -> StepFit:
    """Maximise one step's (optionally ridge-penalised) likelihood over the ball."""
    newton = cfg.solver == "newton"
    theta = np.zeros(lik.d) if theta0 is None else np.array(theta0, dtype=np.float64)
    tol, maxit, ridge = cfg.gradient_tolerance, cfg.max_iterations, cfg.ridge
    theta, iters, gnorm, ok = _ascend(lik, theta, ridge, tol, maxit, newton, abort_norm=2 * bound + 1)
    total = iters
    if ok and np.linalg.norm(theta) <= bound * (1 + 1e-12):
        return StepFit(theta, total, gnorm, False, lik.value(theta))

    # Boundary regime: solve for the KKT multiplier of the ball constraint.
    inner_tol = 0.1 * tol
    grad0 = np.linalg.norm(lik.gradient(np.zeros(lik.d)))
    warm = {"theta": np.zeros(lik.d)}

    def excess(log_mu: float) -> float:
        nonlocal total
        th, it, gn, conv = _ascend(lik, warm["theta"], ridge + np.exp(log_mu), inner_tol, maxit, True)
        total += it
        if not conv:
            raise MleConvergenceError(step, th, gn, "inner penalised solve failed")
        warm["theta"] = th
        return float(np.linalg.norm(th) - bound)

    lo, hi = np.log(1e-14), np.log(max(grad0 / bound, 1e-14) * 2.0)
    if excess(lo) <= 0.0:
        # The unconstrained maximiser exists inside the ball; polish from the near-solution.
        theta, iters, gnorm, ok = _ascend(lik, warm["theta"], ridge, tol, maxit, newton)
        total += iters
        if not ok or np.linalg.norm(theta) > bound * (1 + 1e-12):
            raise MleConvergenceError(step, theta, gnorm)
        return StepFit(theta, total, gnorm, False, lik.value(theta))
    warm["theta"] = np.zeros(lik.d)
    log_mu = brentq(excess, lo, hi, xtol=1e-12, maxiter=200)
    excess(log_mu)
    theta, iters, gnorm, outward = _sphere_newton(lik, warm["theta"], ridge, bound, tol, maxit)
    total += iters
    if outward < -tol or gnorm > tol:
        raise MleConvergenceError(step, theta, gnorm, "projected gradient above tolerance")
    return StepFit(theta, total, gnorm, True, lik.value(theta))


def _sphere_newton(lik, theta, ridge, radius, tol, max_iter):
    """Newton polish on the sphere ``||theta|| = radius``.

    The multiplier search pins the active constraint but resolves flat
    directions poorly; Newton steps in the tangent space, retracted to the
    sphere, finish the job.  Returns the iterate, iterations, the sup-norm of
    the tangential gradient and the outward multiplier.
    """
    theta = theta * (radius / np.linalg.norm(theta))
    d = len(theta)
    f = lik.value(theta) - 0.5 * ridge * theta @ theta
    for it in range(max_iter + 1):
        g = lik.gradient(theta) - ridge * theta
        outward = float(g @ theta) / radius**2
        g_tan = g - outward * theta
        gnorm = float(np.max(np.abs(g_tan)))
        if gnorm <= tol or it == max_iter:
            return theta, it, gnorm, outward
        radial = np.outer(theta, theta) / radius**2
        proj = np.eye(d) - radial
        curv = proj @ (-lik.hessian(theta) + (ridge + max(outward, 0.0)) * np.eye(d)) @ proj + radial
        direction = proj @ _newton_direction(curv, g_tan)
        t = 1.0
        while t > 1e-20:
            cand = theta + t * direction
            cand *= radius / np.linalg.norm(cand)
            f_new = lik.value(cand) - 0.5 * ridge * cand @ cand
            if f_new >= f + 1e-4 * t * float(g_tan @ direction):
                break
            if abs(f_new - f) <= 1e-12 * (1.0 + abs(f)):
                g_new = lik.gradient(cand) - ridge * cand
                g_new = g_new - (g_new @ cand) / radius**2 * cand
                if np.max(np.abs(g_new)) < gnorm:
                    break
            t *= 0.5
        else:
            return theta, it, gnorm, outward
        theta, f = cand, f_new
    return theta, max_iter, gnorm, outward


@dataclass(frozen=True, eq=False)
class EstimatedModel:
    theta: np.ndarray
    Q_hat: np.ndarray
    V_hat: np.ndarray
    pi_hat: np.ndarray
    log_likelihood: np.ndarray
    diagnostics: list = field(default_factory=list)

    @classmethod
    def from_theta(cls, theta: np.ndarray, phi: np.ndarray, log_likelihood=None, diagnostics=None):
        theta = np.asarray(theta, dtype=np.float64)
        Q = np.einsum("sad,hd->hsa", phi, theta)
        pi = softmax(Q, axis=-1)
        V = np.sum(pi * Q, axis=-1)
        if log_likelihood is None:
            log_likelihood = np.full(theta.shape[0], np.nan)
        return cls(theta, Q, V, pi, np.asarray(log_likelihood, dtype=np.float64), diagnostics or [])

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.estimate",
            "version": 1,
            "theta": self.theta.tolist(),
            "Q_hat": self.Q_hat.tolist(),
            "V_hat": self.V_hat.tolist(),
            "pi_hat": self.pi_hat.tolist(),
            "log_likelihood": [None if np.isnan(x) else float(x) for x in self.log_likelihood],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatedModel":
        if data.get("schema") != "dcppo.estimate":
            raise ValueError("not an estimate document")
        ll = [np.nan if x is None else x for x in data["log_likelihood"]]
        return cls(
            theta=np.asarray(data["theta"], dtype=np.float64),
            Q_hat=np.asarray(data["Q_hat"], dtype=np.float64),
            V_hat=np.asarray(data["V_hat"], dtype=np.float64),
            pi_hat=np.asarray(data["pi_hat"], dtype=np.float64),
            log_likelihood=np.asarray(ll, dtype=np.float64),
            diagnostics=data.get("diagnostics", []),
        )


def fit_mle(ds: ChoiceDataset, phi: np.ndarray, cfg: MleConfig | None = None) -> EstimatedModel:
    """Fit ``theta_h`` for every step independently and derive Q, pi and V."""
    cfg = cfg or MleConfig()
    phi = np.asarray(phi, dtype=np.float64)
    S, A, d = phi.shape
    if np.any(phi[:, 0] != 0.0):
        raise ValueError("anchor action 0 must have zero features")
    ds.check(S, A)
    bound = cfg.parameter_bound if cfg.parameter_bound is not None else ds.H * np.sqrt(d)
    counts = empirical_action_frequencies(ds, S, A)
    thetas, lls, diags = [], [], []
    for h in range(ds.H):
        fit = maximise_step(ChoiceLikelihood(counts[h], phi), cfg, bound, step=h)
        thetas.append(fit.theta)
        lls.append(fit.log_likelihood)
        diags.append(
            {
                "step": h,
                "iterations": fit.iterations,
                "grad_norm": fit.grad_norm,
                "on_boundary": fit.on_boundary,
            }
        )
    return EstimatedModel.from_theta(np.array(thetas), phi, lls, diags)


def oracle_estimate(truth: BehaviorModel, phi: np.ndarray) -> EstimatedModel:
    """An estimate carrying the true Q (projected on the features) for oracle checks."""
    X = phi.reshape(-1, phi.shape[-1])
    theta = np.array([np.linalg.lstsq(X, q.reshape(-1), rcond=None)[0] for q in truth.Q])
    return EstimatedModel.from_theta(theta, phi)


def mle_error_report(est: EstimatedModel, truth: BehaviorModel, ds: ChoiceDataset) -> dict:
    """Dataset averages of ``||pi_hat - pi_b||_1^2`` and ``||Q_hat - Q||_1^2`` per step."""
    if est.Q_hat.shape != truth.Q.shape:
        raise ValueError("estimate and truth shapes differ")
    policy, value = [], []
    for h in range(ds.H):
        s = ds.states[:, h]
        dp = np.abs(est.pi_hat[h, s] - truth.pi_b[h, s]).sum(axis=-1)
        dq = np.abs(est.Q_hat[h, s] - truth.Q[h, s]).sum(axis=-1)
        policy.append(float(np.mean(dp**2)))
        value.append(float(np.mean(dq**2)))
    return {"policy_error": policy, "q_error": value}
