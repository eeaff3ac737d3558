"""Command-line front end.

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given with ``--config``, then individual ``--field value`` flags.  Flag values
are parsed as JSON when possible, so ``--n-grid "[250, 500]"`` and
``--kernel '{"kind": "rbf"}'`` work as expected.

Exit codes: 0 success, 1 a stage failed, 2 invalid configuration, 3 an
acceptance window requested with ``--check-windows`` was missed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agent import BehaviorModel, ChoiceDataset, sample_dataset, solve_ddc
from .diagnostics import (
    CSV_COLUMNS,
    DEFAULT_C_GRID,
    DEFAULT_N_GRID,
    CalibrationError,
    SweepSpec,
    coverage_check,
    effective_dimensions,
    run_rate_sweep,
    calibrate_beta,
)
from .kernel import KernelEstimate, KernelSpec, cell_kernel, kernel_fit_mle, kernel_plan, kernel_recover_reward
from .mdp import TabularLinearMdp, feature_second_moments, optimal_policy, random_instance, suboptimality
from .mle import EstimatedModel, MleConfig, fit_mle
from .planner import PessimisticPolicy, PlannerConfig, plan, suboptimality_bound, uncertainty_violation_audit
from .reward import RecoveredReward, gram_matrices, recover_reward, reward_error_certificate

log = logging.getLogger("dcppo")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_WINDOW = 0, 1, 2, 3
SWEEP_CSV_VERSION = 1
DATASET_CSV_VERSION = 1


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class ExperimentConfig:
    S: int = 5
    A: int = 3
    H: int = 3
    d: int | None = None
    feature_mode: str = "one_hot_tabular"
    transition_mode: str = "dirichlet"
    instance_seed: int = 0
    gamma: float = 0.9
    n: int = 2000
    data_seed: int = 0
    mechanism: str = "softmax"
    lambda_reg: float = 1.0
    mle_ridge: float = 0.0
    beta_mode: str = "manual"
    beta: float = 0.0
    schedule_constant: float = 1e-3
    delta: float = 0.05
    h_cap: int = 6
    oracle_reward: bool = False
    kernel: dict | None = None
    n_grid: list = field(default_factory=lambda: list(DEFAULT_N_GRID))
    seeds: int = 20
    base_seed: int = 0
    calibration_grid: list = field(default_factory=lambda: list(DEFAULT_C_GRID))
    calibration_n: int = 2000
    calibration_seeds: int = 100
    # Execution-only settings; excluded from the config hash.
    output_dir: str = "out"
    jobs: int = 1

    EXECUTION_FIELDS = ("output_dir", "jobs")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(f"unknown config field {key!r}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> "ExperimentConfig":
        def need(ok, name, what):
            if not ok:
                raise ConfigError(f"config field {name!r}: {what} (got {getattr(self, name)!r})")

        ints = ("S", "A", "H", "instance_seed", "n", "data_seed", "h_cap", "seeds", "base_seed",
                "calibration_n", "calibration_seeds", "jobs")
        for name in ints:
            value = getattr(self, name)
            need(isinstance(value, int) and not isinstance(value, bool), name, "must be an integer")
        for name in ("gamma", "lambda_reg", "mle_ridge", "beta", "schedule_constant", "delta"):
            value = getattr(self, name)
            need(isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value),
                 name, "must be a finite number")
        need(self.S >= 2, "S", "needs at least one live state and the absorbing state")
        need(self.A >= 2, "A", "needs the anchor action and at least one other")
        need(self.H >= 1, "H", "must be positive")
        need(self.d is None or (isinstance(self.d, int) and self.d >= 1), "d", "must be null or a positive integer")
        need(self.feature_mode in ("one_hot_tabular", "random_linear"), "feature_mode",
             "must be one_hot_tabular or random_linear")
        need(self.transition_mode in ("dirichlet", "deterministic"), "transition_mode",
             "must be dirichlet or deterministic")
        need(0 <= self.gamma <= 1, "gamma", "must lie in [0, 1]")
        need(self.n >= 1, "n", "must be positive")
        need(self.mechanism in ("softmax", "gumbel_argmax"), "mechanism", "must be softmax or gumbel_argmax")
        need(self.lambda_reg > 0, "lambda_reg", "must be positive")
        need(self.mle_ridge >= 0, "mle_ridge", "must be nonnegative")
        need(self.beta_mode in ("manual", "theorem_schedule"), "beta_mode", "must be manual or theorem_schedule")
        need(self.beta >= 0, "beta", "must be nonnegative")
        need(self.schedule_constant >= 0, "schedule_constant", "must be nonnegative")
        need(0 < self.delta < 1, "delta", "must lie in (0, 1)")
        need(isinstance(self.oracle_reward, bool), "oracle_reward", "must be a boolean")
        need(isinstance(self.n_grid, list) and len(self.n_grid) > 0
             and all(isinstance(v, int) and v >= 1 for v in self.n_grid), "n_grid", "must be a list of positive integers")
        need(self.seeds >= 1, "seeds", "must be positive")
        need(isinstance(self.calibration_grid, list) and len(self.calibration_grid) > 0
             and all(isinstance(v, (int, float)) and v >= 0 for v in self.calibration_grid),
             "calibration_grid", "must be a nonempty list of nonnegative numbers")
        need(self.calibration_n >= 1, "calibration_n", "must be positive")
        need(self.calibration_seeds >= 1, "calibration_seeds", "must be positive")
        need(self.jobs >= 1, "jobs", "must be positive")
        if self.kernel is not None:
            need(isinstance(self.kernel, dict), "kernel", "must be null or an object")
            try:
                KernelSpec(**self.kernel)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config field 'kernel': {exc}") from None
        return self

    def result_fields(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in self.EXECUTION_FIELDS}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.result_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def kernel_spec(self) -> KernelSpec | None:
        return None if self.kernel is None else KernelSpec(**self.kernel)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(beta=float(self.beta), lambda_reg=float(self.lambda_reg), beta_mode=self.beta_mode,
                             schedule_constant=float(self.schedule_constant), delta=float(self.delta),
                             h_cap=self.h_cap)

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(
            S=self.S, A=self.A, H=self.H, gamma=float(self.gamma), feature_mode=self.feature_mode,
            transition_mode=self.transition_mode, instance_seed=self.instance_seed, d=self.d,
            n_grid=tuple(self.n_grid), seeds=self.seeds, base_seed=self.base_seed,
            lambda_reg=float(self.lambda_reg), beta_mode=self.beta_mode, beta=float(self.beta),
            schedule_constant=float(self.schedule_constant), delta=float(self.delta), h_cap=self.h_cap,
            mechanism=self.mechanism, oracle_reward=self.oracle_reward,
        )


# ---------------------------------------------------------------- file output


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash, "artifact_version": __version__}


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> None:
    doc = dict(payload)
    doc["provenance"] = _provenance(cfg)
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path: Path, cfg: ExperimentConfig) -> dict | None:
    """Load ``path`` if it exists and was produced under the same config."""
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    if doc.get("provenance", {}).get("config_hash") != cfg.config_hash:
        return None
    return doc


# ---------------------------------------------------------------------- stages


class Pipeline:
    """Stage runner that reuses outputs already in ``output_dir`` under the same config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._cache = {}

    def _stage(self, name, build):
        if name not in self._cache:
            try:
                self._cache[name] = build()
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
                raise StageError(name, exc) from exc
        return self._cache[name]

    def _load_or(self, filename, loader, build):
        doc = read_json(self.out / filename, self.cfg)
        if doc is not None:
            return loader(doc)
        obj, payload = build()
        write_json(self.out / filename, payload, self.cfg)
        return obj

    def mdp(self) -> TabularLinearMdp:
        def build():
            cfg = self.cfg
            mdp = random_instance(cfg.instance_seed, cfg.S, cfg.A, cfg.H, d=cfg.d,
                                  feature_mode=cfg.feature_mode, transition_mode=cfg.transition_mode)
            return mdp, mdp.to_dict()

        return self._stage("generate", lambda: self._load_or("mdp.json", TabularLinearMdp.from_dict, build))

    def behavior(self) -> BehaviorModel:
        def build():
            model = solve_ddc(self.mdp(), self.cfg.gamma)
            return model, model.to_dict()

        return self._stage("behavior", lambda: self._load_or("behavior.json", BehaviorModel.from_dict, build))

    def dataset(self) -> ChoiceDataset:
        def build():
            ds = sample_dataset(self.mdp(), self.behavior(), self.cfg.n, self.cfg.data_seed,
                                mechanism=self.cfg.mechanism)
            self._write_dataset_csv(ds)
            return ds, ds.to_dict()

        return self._stage("dataset", lambda: self._load_or("dataset.json", ChoiceDataset.from_dict, build))

    def _write_dataset_csv(self, ds: ChoiceDataset) -> None:
        buf = io.StringIO()
        buf.write(f"# dataset.csv v{DATASET_CSV_VERSION} config_hash={self.cfg.config_hash}\n")
        buf.write(ds.to_csv())
        atomic_write(self.out / "dataset.csv", buf.getvalue())

    def kernel_matrix(self):
        spec = self.cfg.kernel_spec()
        return None if spec is None else cell_kernel(spec, self.mdp().phi)

    def estimate(self):
        K = self.kernel_matrix()

        def build():
            mdp, ds = self.mdp(), self.dataset()
            if K is None:
                est = fit_mle(ds, mdp.phi, MleConfig(ridge=float(self.cfg.mle_ridge)))
            else:
                est = kernel_fit_mle(ds, K, mdp.S, mdp.A, self.cfg.kernel_spec().lambda_reg, MleConfig())
            return est, est.to_dict()

        loader = EstimatedModel.from_dict if K is None else KernelEstimate.from_dict
        return self._stage("estimate", lambda: self._load_or("estimate.json", loader, build))

    def reward(self):
        K = self.kernel_matrix()

        def build():
            mdp, ds, est = self.mdp(), self.dataset(), self.estimate()
            if self.cfg.oracle_reward:
                rec = RecoveredReward(w_hat=np.array(mdp.w), Lambda=gram_matrices(ds, mdp.phi),
                                      lambda_reg=float(self.cfg.lambda_reg))
            elif K is None:
                rec = recover_reward(ds, est, mdp.phi, self.cfg.gamma, self.cfg.lambda_reg)
            else:
                rec = kernel_recover_reward(ds, est, K, mdp.S, mdp.A, self.cfg.gamma, self.cfg.kernel_spec().lambda_reg)
            return rec, rec.to_dict()

        oracle_or_linear = K is None or self.cfg.oracle_reward
        loader = RecoveredReward.from_dict if oracle_or_linear else KernelEstimate.from_dict
        return self._stage("recover", lambda: self._load_or("reward.json", loader, build))

    def policy(self) -> PessimisticPolicy:
        K = self.kernel_matrix()

        def build():
            mdp, ds, rec = self.mdp(), self.dataset(), self.reward()
            pcfg = self.cfg.planner_config()
            if K is None:
                pp = plan(ds, rec, mdp.phi, pcfg)
            else:
                d = mdp.d
                beta = pcfg.resolve_beta(mdp.H, mdp.A, d, ds.n)
                reward = rec if isinstance(rec, KernelEstimate) else rec.reward_table(mdp.phi)
                pp = kernel_plan(ds, reward, K, mdp.S, mdp.A, self.cfg.kernel_spec().lambda_reg, beta)
            return pp, pp.to_dict()

        return self._stage("plan", lambda: self._load_or("policy.json", PessimisticPolicy.from_dict, build))

    def report(self) -> dict:
        def build():
            mdp, behavior, ds = self.mdp(), self.behavior(), self.dataset()
            rec, pp = self.reward(), self.policy()
            pi_star, opt = optimal_policy(mdp)
            audit = uncertainty_violation_audit(pp, rec, mdp)
            sub = suboptimality(mdp, pp.pi_tilde)
            report = {
                "suboptimality": sub,
                "optimal_value": float(opt.V[0, mdp.s_init]),
                "suboptimality_bound": suboptimality_bound(pp, mdp, pi_star),
                "beta": pp.beta,
                "audit": audit,
                "coverage": coverage_check(mdp, behavior, pi_star, ds.n),
            }
            if isinstance(rec, RecoveredReward):
                cert = reward_error_certificate(rec, mdp)
                finite = cert["ratio"][np.isfinite(cert["ratio"])]
                report["certificate"] = {
                    "max_abs_error": float(cert["abs_error"].max()),
                    "max_ratio": float(cert["ratio"].max()),
                    "max_finite_ratio": float(finite.max()) if finite.size else 0.0,
                }
                report["effective_dimensions"] = effective_dimensions(
                    rec.Lambda, feature_second_moments(mdp, behavior.pi_b),
                    feature_second_moments(mdp, pi_star), rec.lambda_reg, ds.n,
                )
            else:
                report["certificate"] = {"max_abs_error": float(np.abs(mdp.rewards - rec.reward_table()).max())}
            write_json(self.out / "report.json", report, self.cfg)
            return report

        return self._stage("audit", build)


# ----------------------------------------------------------------------- plots


def write_loglog_svg(path: Path, x, series: dict, title: str, ylabel: str) -> None:
    """Log-log line chart as standalone SVG; the plotted points ride along as metadata."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dcppo"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    embedded = {"x": list(x)}
    for label, y in series.items():
        pts = [(a, b) for a, b in zip(x, y) if b is not None and b > 0]
        embedded[label] = [None if b is None else float(b) for b in y]
        if pts:
            ax.loglog(*zip(*pts), marker="o", label=label)
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series:
        ax.legend()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Description": json.dumps(embedded)})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


# -------------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> int:
    pipe = Pipeline(cfg)
    pipe.mdp(), pipe.behavior(), pipe.dataset()
    return EXIT_OK


def cmd_estimate(cfg):
    Pipeline(cfg).estimate()
    return EXIT_OK


def cmd_recover(cfg):
    Pipeline(cfg).reward()
    return EXIT_OK


def cmd_plan(cfg):
    Pipeline(cfg).policy()
    return EXIT_OK


def cmd_audit(cfg):
    Pipeline(cfg).report()
    return EXIT_OK


def cmd_pipeline(cfg):
    pipe = Pipeline(cfg)
    pipe.estimate(), pipe.reward(), pipe.policy(), pipe.report()
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, check_windows: bool = False) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.sweep_spec()
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# sweep.csv v{SWEEP_CSV_VERSION} config_hash={cfg.config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        fh.flush()

        def on_row(row):
            writer.writerow(row)
            fh.flush()

        result = run_rate_sweep(spec, jobs=cfg.jobs, on_row=on_row)
    summary = result.summary()
    write_json(out / "summary.json", summary, cfg)
    means = result.means
    write_loglog_svg(out / "plots" / "suboptimality.svg", means["n"], {"mean SubOpt": means["suboptimality"]},
                     "Suboptimality", "V* - V")
    write_loglog_svg(out / "plots" / "mle_error.svg", means["n"], {"policy error": means["mle_policy_error"],
                     "Q error": means["mle_q_error"]}, "Choice-model fit", "mean squared L1 error")
    write_loglog_svg(out / "plots" / "certificate.svg", means["n"], {"max ratio": means["certificate_max_ratio"]},
                     "Reward error / potential", "max ratio")
    if check_windows and not all(w["pass"] for w in result.windows.values()):
        log.error("acceptance windows missed: %s", result.windows)
        return EXIT_WINDOW
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    try:
        result = calibrate_beta(cfg.sweep_spec(), cfg.delta, cfg.calibration_grid, cfg.calibration_n,
                                cfg.calibration_seeds, jobs=cfg.jobs)
    except CalibrationError as exc:
        write_json(out / "calibration.json", {"constant": None, "curve": exc.curve, "error": str(exc)}, cfg)
        log.error("%s", exc)
        return EXIT_STAGE
    write_json(out / "calibration.json", result, cfg)
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "sample an instance, its choice model and a dataset"),
    "estimate": (cmd_estimate, "fit the choice model by maximum likelihood"),
    "recover": (cmd_recover, "recover the reward by ridge regression"),
    "plan": (cmd_plan, "pessimistic value iteration"),
    "audit": (cmd_audit, "write report.json with suboptimality, audit and diagnostics"),
    "pipeline": (cmd_pipeline, "run every stage through the report"),
    "sweep": (cmd_sweep, "rate sweep over n and seeds"),
    "calibrate": (cmd_calibrate, "choose the smallest safe penalty constant"),
}


def _flag_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcppo", description=__doc__.split("\n\n")[0],
                                     epilog=__doc__.split("\n\n", 1)[1],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--check-windows", action="store_true",
                           help="exit with code 3 when a rate window is missed")
        group = p.add_argument_group("config overrides")
        for f in fields(ExperimentConfig):
            group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=_flag_value,
                               default=argparse.SUPPRESS, metavar="VALUE",
                               help=f"default: {json.dumps(getattr(ExperimentConfig(), f.name))}")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            data[key[4:]] = value
    try:
        return ExperimentConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"dcppo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    try:
        if args.command == "sweep":
            return fn(cfg, check_windows=args.check_windows)
        return fn(cfg)
    except StageError as exc:
        print(f"dcppo: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"dcppo: I/O error at {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
