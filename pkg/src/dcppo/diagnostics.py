"""Rate sweeps, penalty calibration, coverage and effective dimensions."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .agent import solve_ddc, sample_dataset
from .mdp import TabularLinearMdp, feature_second_moments, optimal_policy, random_instance, suboptimality
from .mle import MleConfig, MleConvergenceError, fit_mle, mle_error_report
from .planner import (
    PlannerConfig,
    plan,
    suboptimality_bound,
    uncertainty_violation_audit,
)
from .reward import RecoveredReward, gram_matrices, recover_reward, reward_error_certificate

log = logging.getLogger(__name__)

DEFAULT_N_GRID = (250, 500, 1000, 2000, 4000, 8000, 16000)
DEFAULT_C_GRID = tuple(float(c) for c in np.geomspace(1e-5, 1e-1, 41))

# Acceptance windows for the fitted log-log slopes.
MLE_SLOPE_WINDOW = (-1.25, -0.75)
SUBOPT_SLOPE_WINDOW = (-0.65, -0.35)
CERTIFICATE_SLOPE_MAX = 0.15


def coverage_check(
    mdp: TabularLinearMdp, behavior_policy, pi_star: np.ndarray, n: int | None = None
) -> dict:
    """Population analogue of the single-policy coverage constant.

    For each step, the largest ``c`` with ``Sigma_b >= c Sigma_star`` on the
    range of ``Sigma_star`` is the smallest generalised eigenvalue of the pair
    restricted to that range.  ``behavior_policy`` is a policy table or a
    :class:`~dcppo.agent.BehaviorModel`; ``n`` scales both sides equally and
    only enters the report.
    """
    behavior_policy = getattr(behavior_policy, "pi_b", behavior_policy)
    sigma_b = feature_second_moments(mdp, behavior_policy)
    sigma_star = feature_second_moments(mdp, pi_star)
    per_step = []
    for Sb, Ss in zip(sigma_b, sigma_star):
        evals, evecs = np.linalg.eigh(Ss)
        keep = evals > 1e-12 * max(1.0, evals.max())
        if not keep.any():
            per_step.append(np.inf)
            continue
        W = evecs[:, keep] / np.sqrt(evals[keep])
        per_step.append(float(np.linalg.eigvalsh(W.T @ Sb @ W).min()))
    return {
        "c_dagger_estimate": float(min(per_step)),
        "c_dagger_per_step": per_step,
        "min_eig_Sigma_b": [float(np.linalg.eigvalsh(S).min()) for S in sigma_b],
        "rank_Sigma_b": [int(np.linalg.matrix_rank(S, tol=1e-12)) for S in sigma_b],
        "n": n,
    }


def _trace_root(M: np.ndarray, Sigma: np.ndarray) -> float:
    """``Tr(M^{-1} Sigma)^{1/2}`` for symmetric positive definite ``M``."""
    return float(np.sqrt(max(np.trace(np.linalg.solve(M, Sigma)), 0.0)))


def effective_dimensions(Lambda, Sigma_b, Sigma_star, lambda_reg: float, n: int) -> dict:
    """Sample and population effective dimensions summed over steps."""
    d = np.asarray(Lambda).shape[-1]
    eye = lambda_reg * np.eye(d)
    sample = sum(_trace_root(L + eye, Sb) for L, Sb in zip(Lambda, Sigma_b))
    pop = sum(_trace_root(n * Sb + eye, Ss) for Sb, Ss in zip(Sigma_b, Sigma_star))
    return {"d_eff_sample": float(sample), "d_eff_pop": float(pop)}


def loglog_slope(x, y) -> dict:
    """OLS slope of ``log y`` on ``log x`` with its standard error.

    Points with nonpositive or non-finite ``y`` are dropped; fewer than two
    usable points leave the slope undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(y) & (y > 0)
    out = {"points": int(ok.sum()), "dropped": int((~ok).sum())}
    if ok.sum() < 2 or np.unique(x[ok]).size < 2:
        out.update(slope=None, stderr=None, undefined=True)
        return out
    lx, ly = np.log(x[ok]), np.log(y[ok])
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    stderr = None
    if ok.sum() > 2:
        resid = ly - A @ coef
        s2 = resid @ resid / (ok.sum() - 2)
        stderr = float(np.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)))
    out.update(slope=float(coef[0]), intercept=float(coef[1]), stderr=stderr, undefined=False)
    return out


@dataclass(frozen=True)
class SweepSpec:
    S: int = 5
    A: int = 3
    H: int = 3
    gamma: float = 0.9
    feature_mode: str = "one_hot_tabular"
    transition_mode: str = "dirichlet"
    instance_seed: int = 0
    d: int | None = None
    n_grid: tuple = DEFAULT_N_GRID
    seeds: int = 20
    base_seed: int = 0
    lambda_reg: float = 1.0
    beta_mode: str = "theorem_schedule"
    beta: float = 0.0
    schedule_constant: float = 1e-3
    delta: float = 0.05
    h_cap: int = 6
    mechanism: str = "softmax"
    # Plan with the true reward instead of the recovered one.
    oracle_reward: bool = False

    def instance(self) -> TabularLinearMdp:
        return random_instance(
            self.instance_seed, self.S, self.A, self.H, d=self.d,
            feature_mode=self.feature_mode, transition_mode=self.transition_mode,
        )

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            beta=self.beta, lambda_reg=self.lambda_reg, beta_mode=self.beta_mode,
            schedule_constant=self.schedule_constant, delta=self.delta, h_cap=self.h_cap,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_grid"] = list(self.n_grid)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sweep field(s): {sorted(unknown)}")
        data = dict(data)
        if "n_grid" in data:
            data["n_grid"] = tuple(int(n) for n in data["n_grid"])
        return cls(**data)


def cell_seed(base_seed: int, index: int, n: int) -> int:
    """Dataset seed of one ``(n, seed index)`` cell, independent of scheduling order."""
    return int(np.random.SeedSequence([base_seed, index, n]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class _Fitted:
    ds: object
    rec: RecoveredReward
    mle: dict


def _fit(spec: SweepSpec, mdp, behavior, n: int, seed: int) -> _Fitted:
    ds = sample_dataset(mdp, behavior, n, seed, mechanism=spec.mechanism)
    est = fit_mle(ds, mdp.phi, MleConfig())
    if spec.oracle_reward:
        rec = RecoveredReward(w_hat=mdp.w.copy(), Lambda=gram_matrices(ds, mdp.phi), lambda_reg=spec.lambda_reg)
    else:
        rec = recover_reward(ds, est, mdp.phi, spec.gamma, spec.lambda_reg)
    return _Fitted(ds, rec, mle_error_report(est, behavior, ds))


def run_cell(spec: SweepSpec, n: int, index: int) -> dict:
    """One ``(n, seed)`` run of the whole pipeline with its measurements."""
    mdp = spec.instance()
    behavior = solve_ddc(mdp, spec.gamma)
    pi_star, _ = optimal_policy(mdp)
    seed = cell_seed(spec.base_seed, index, n)
    row = {"n": n, "seed_index": index, "seed": seed, "status": "ok"}
    try:
        fitted = _fit(spec, mdp, behavior, n, seed)
        pp = plan(fitted.ds, fitted.rec, mdp.phi, spec.planner_config())
    except (MleConvergenceError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        log.warning("cell n=%d seed=%d failed: %s", n, index, exc)
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
        return row
    audit = uncertainty_violation_audit(pp, fitted.rec, mdp)
    cert = reward_error_certificate(fitted.rec, mdp)
    sub = suboptimality(mdp, pp.pi_tilde)
    bound = suboptimality_bound(pp, mdp, pi_star)
    row.update(
        beta=pp.beta,
        suboptimality=sub,
        bound=bound,
        dominance_ok=bool(audit["violated"] or sub <= bound + 1e-8),
        mle_policy_error=float(np.mean(fitted.mle["policy_error"])),
        mle_q_error=float(np.mean(fitted.mle["q_error"])),
        certificate_max_ratio=float(np.max(cert["ratio"])),
        violated=int(audit["violated"]),
        violation_fraction=audit["violation_fraction"],
        audit_max_ratio=audit["max_ratio"],
    )
    return row


CSV_COLUMNS = (
    "n", "seed_index", "seed", "status", "beta", "suboptimality", "bound", "dominance_ok",
    "mle_policy_error", "mle_q_error", "certificate_max_ratio", "violated",
    "violation_fraction", "audit_max_ratio",
)


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list
    slopes: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    excluded: int = 0
    windows: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "means": self.means,
            "slopes": self.slopes,
            "windows": self.windows,
            "excluded_runs": self.excluded,
            "runs": len(self.rows),
        }


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1:
        for args in jobs_args:
            yield fn(*args)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for args in jobs_args]
        for fut in futures:
            yield fut.result()


def summarise(spec: SweepSpec, rows: list) -> SweepResult:
    ok = [r for r in rows if r["status"] == "ok"]
    grid = sorted({r["n"] for r in rows})
    means = {}
    for key in ("suboptimality", "mle_policy_error", "mle_q_error", "certificate_max_ratio", "violated", "bound"):
        means[key] = [float(np.mean([r[key] for r in ok if r["n"] == n])) if any(r["n"] == n for r in ok) else None
                      for n in grid]
    means["n"] = grid

    def slope(key):
        vals = [np.nan if v is None else v for v in means[key]]
        return loglog_slope(grid, vals)

    slopes = {
        "mle_policy_error": slope("mle_policy_error"),
        "suboptimality": slope("suboptimality"),
        "certificate_max_ratio": slope("certificate_max_ratio"),
    }
    windows = {}
    s = slopes["mle_policy_error"]["slope"]
    windows["mle_policy_error"] = {
        "window": list(MLE_SLOPE_WINDOW),
        "pass": s is not None and MLE_SLOPE_WINDOW[0] <= s <= MLE_SLOPE_WINDOW[1],
    }
    s = slopes["suboptimality"]["slope"]
    windows["suboptimality"] = {
        "window": list(SUBOPT_SLOPE_WINDOW),
        "pass": s is not None and s <= SUBOPT_SLOPE_WINDOW[1],
        "steeper_than_window": s is not None and s < SUBOPT_SLOPE_WINDOW[0],
    }
    s = slopes["certificate_max_ratio"]["slope"]
    windows["certificate_max_ratio"] = {
        "max": CERTIFICATE_SLOPE_MAX,
        "pass": s is not None and s <= CERTIFICATE_SLOPE_MAX,
    }
    windows["dominance"] = {"pass": all(r["dominance_ok"] for r in ok)}
    return SweepResult(spec, rows, slopes, means, excluded=len(rows) - len(ok), windows=windows)


def run_rate_sweep(spec: SweepSpec, jobs: int = 1, on_row=None) -> SweepResult:
    """Run every ``(n, seed)`` cell and fit log-log slopes on the per-``n`` means.

    ``on_row`` is called with each finished row in grid order.  Failed runs are
    recorded and excluded from the slope fits.
    """
    cells = [(spec, n, i) for n in spec.n_grid for i in range(spec.seeds)]
    rows = []
    for row in _map(run_cell, cells, jobs):
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return summarise(spec, rows)


class CalibrationError(RuntimeError):
    def __init__(self, curve: list, delta: float):
        self.curve = curve
        super().__init__(f"no grid constant reached violation frequency <= {delta}")


def _calibration_seed(spec: SweepSpec, index: int, n: int, offset: int) -> int:
    return cell_seed(spec.base_seed + offset, index, n)


def violation_frequencies(
    spec: SweepSpec, constants, n: int, seeds: int, seed_offset: int = 1_000_003, jobs: int = 1
) -> list:
    """Fraction of seeds whose penalty fails somewhere, for each schedule constant."""
    constants = [float(c) for c in constants]
    hits = np.zeros(len(constants), dtype=int)
    args = [(spec, constants, n, i, seed_offset) for i in range(seeds)]
    for flags in _map(_violations_for_seed, args, jobs):
        hits += flags
    return [{"constant": c, "violations": int(k), "frequency": float(k / seeds)} for c, k in zip(constants, hits)]


def _violations_for_seed(spec: SweepSpec, constants, n: int, index: int, seed_offset: int) -> np.ndarray:
    mdp = spec.instance()
    behavior = solve_ddc(mdp, spec.gamma)
    fitted = _fit(spec, mdp, behavior, n, _calibration_seed(spec, index, n, seed_offset))
    flags = np.zeros(len(constants), dtype=int)
    for j, c in enumerate(constants):
        cfg = replace(spec.planner_config(), beta_mode="theorem_schedule", schedule_constant=c)
        pp = plan(fitted.ds, fitted.rec, mdp.phi, cfg)
        flags[j] = uncertainty_violation_audit(pp, fitted.rec, mdp)["violated"]
    return flags


def calibrate_beta(
    spec: SweepSpec,
    delta: float = 0.05,
    grid=DEFAULT_C_GRID,
    n: int = 2000,
    seeds: int = 100,
    seed_offset: int = 1_000_003,
    jobs: int = 1,
) -> dict:
    """Smallest schedule constant whose violation frequency is at most ``delta``."""
    grid = sorted(float(c) for c in grid)
    if not grid:
        raise ValueError("calibration grid is empty")
    curve = violation_frequencies(spec, grid, n, seeds, seed_offset, jobs)
    for point in curve:
        if point["frequency"] <= delta:
            return {"constant": point["constant"], "curve": curve, "n": n, "seeds": seeds, "delta": delta}
    raise CalibrationError(curve, delta)
