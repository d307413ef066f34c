"""Configuration, orchestration, and report emission for the experiments.

Configs are strict JSON: unknown keys abort before any computation, and
every field is validated against the owning module's invariants.  A run
writes report.json, one CSV per observed series, and manifest.json into
the output directory; the exit status is 0 exactly when every pass flag
in the emitted report is true.  Reruns with the same config and seed
reproduce report.json byte for byte except the trailing wall-time field,
at any thread count.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from . import __version__
from .dynamics import ModelParams, ParticleConfig
from .integrator import SchemeConfig, simulate
from . import experiments as ex

EXPERIMENT_NAMES = ("simulate", "contraction", "cauchy", "chaos-rate",
                    "stationary", "pde-residual", "continuity", "moments")

_SIGMA_RULES = ("zero", "one_over_N", "constant")


class ConfigError(ValueError):
    """A config document violated the schema; nothing was computed."""


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    N: int
    alpha: float = 1.0
    lam: float = Field(default=1.0, alias="lambda")
    sigma_rule: str = "one_over_N"
    sigma: float | None = None

    @field_validator("N")
    @classmethod
    def _n(cls, v):
        if v < 1:
            raise ValueError("N must be >= 1")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not v >= 1.0:
            raise ValueError("alpha must be >= 1")
        return v

    @field_validator("lam")
    @classmethod
    def _lam(cls, v):
        if not v > 0.0:
            raise ValueError("lambda must be > 0")
        return v

    @field_validator("sigma_rule")
    @classmethod
    def _rule(cls, v):
        if v not in _SIGMA_RULES:
            raise ValueError("sigma_rule must be one of zero, one_over_N, "
                             "constant")
        return v

    @model_validator(mode="after")
    def _sigma_consistent(self):
        if self.sigma_rule == "constant":
            if self.sigma is None:
                raise ValueError("sigma_rule 'constant' needs sigma")
            if not self.sigma >= 0.0:
                raise ValueError("sigma must be >= 0")
        elif self.sigma is not None:
            raise ValueError("sigma is only meaningful with sigma_rule "
                             "'constant'")
        return self

    def sigma_value(self, n: int) -> float:
        return ex.sigma_for(self.sigma_rule, n, self.sigma)

    def params(self, n: int | None = None) -> ModelParams:
        m = self.N if n is None else n
        return ModelParams.quadratic(m, self.alpha, self.lam,
                                     self.sigma_value(m))


class SchemeSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h_max: float = 1e-3
    theta_drift: float = 0.25
    theta_diff: float = 0.25
    gap_floor: float = 1e-12
    max_rejections: int = 60
    max_depth: int = 40
    lazy_threshold: int | None = 400
    near_neighbors: int = 4
    depth_limit_policy: str = "error"

    def to_scheme(self) -> SchemeConfig:
        try:
            return SchemeConfig(**self.model_dump())
        except ValueError as e:
            raise ConfigError(str(e)) from None


class RunConfig(BaseModel):
    """Strict top-level schema; defaults are filled and echoed in reports."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    experiment: str | None = None
    model: ModelSection
    scheme: SchemeSection = Field(default_factory=SchemeSection)
    sizes: list[int] | None = None
    times: list[float] | None = None
    replicas: int = 8
    seed: int = 0
    output_dir: str = "runs"
    test_functions: list[str] = Field(default_factory=lambda: ["tanh"])

    @field_validator("experiment")
    @classmethod
    def _exp(cls, v):
        if v is not None and v not in EXPERIMENT_NAMES:
            raise ValueError("experiment must be one of "
                             + ", ".join(EXPERIMENT_NAMES))
        return v

    @field_validator("replicas")
    @classmethod
    def _rep(cls, v):
        if v < 1:
            raise ValueError("replicas must be >= 1")
        return v

    @field_validator("sizes")
    @classmethod
    def _sizes(cls, v):
        if v is not None:
            if not v or any(n < 1 for n in v):
                raise ValueError("sizes must be positive integers")
            if v != sorted(v) or len(set(v)) != len(v):
                raise ValueError("sizes must be strictly increasing")
        return v

    @field_validator("times")
    @classmethod
    def _times(cls, v):
        if v is not None:
            if not v or any(t < 0.0 for t in v):
                raise ValueError("times must be >= 0")
            if v != sorted(v):
                raise ValueError("times must be increasing")
        return v

def _constant_sigma_warning(m: ModelSection) -> str | None:
    if (m.sigma_rule == "constant" and m.alpha == 1.0 and m.sigma is not None
            and m.sigma > 1.0 / m.N):
        return ("sigma_rule 'constant' with sigma > 1/N is outside the "
                "sigma_N <= 1/N regime the alpha = 1 long-time guarantees "
                "assume; envelopes that need that regime may fail")
    return None


def _friendly_validation_error(err: ValidationError) -> ConfigError:
    first = err.errors()[0]
    loc = [str(p) for p in first.get("loc", ())]
    msg = first.get("msg", "invalid value")
    if first.get("type") == "extra_forbidden":
        where = ".".join(loc[:-1]) or "the top level"
        return ConfigError(f"unknown key '{loc[-1]}' in {where}")
    if msg.startswith("Value error, "):
        return ConfigError(msg[len("Value error, "):])
    field = ".".join(loc) if loc else "config"
    return ConfigError(f"{field}: {msg}")


def parse_config(text: str) -> tuple[RunConfig, list[str]]:
    """Validate a JSON config document; returns the config and warnings.

    Schema violations raise ConfigError naming the offending key and the
    constraint it broke.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config must be valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise _friendly_validation_error(e) from None
    warnings = []
    w = _constant_sigma_warning(cfg.model)
    if w is not None:
        warnings.append(w)
    return cfg, warnings


# ---------------------------------------------------------------------------
# execution

def _times_or(cfg: RunConfig, default: list[float]) -> list[float]:
    return [float(t) for t in (cfg.times if cfg.times else default)]


def _need_sizes(cfg: RunConfig, experiment: str, count: int) -> list[int]:
    if cfg.sizes is None or len(cfg.sizes) < count:
        raise ConfigError(f"{experiment} needs sizes with at least {count} "
                          "entries")
    return cfg.sizes


def _default_grid_bounds(n: int) -> tuple[float, float]:
    half = 0.5 * (n - 1) / n
    return -half, half


def _run_simulate(cfg: RunConfig, scheme: SchemeConfig, threads: int,
                  out_dir: Path) -> ex.ExperimentReport:
    times = _times_or(cfg, ex._uniform_grid(1.0, 10))
    params = cfg.model.params()
    ic = ex.InitialCondition.default_grid()
    t_end = times[-1]
    tr = simulate(params, scheme, ParticleConfig(
        ic.realize(params.n_particles, params.lam, cfg.seed, 0)),
        t_end, times, cfg.seed, 0, collect_diagnostics=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr.positions_csv(out_dir / "trajectory.csv")
    tr.diagnostics_csv(out_dir / "diagnostics.csv")
    observed = {k: [float(v) for v in s] for k, s in tr.diagnostics.items()}
    echo = ex._echo(params, scheme, t_end=t_end, tolerances={})
    return ex.ExperimentReport(
        name="simulate",
        params_echo=echo,
        time_grid=times,
        observed=observed,
        stderr={},
        theoretical_bound={},
        fitted={"accepted_pieces": float(tr.accepted),
                "rejected_pieces": float(tr.rejected),
                "guarded_pieces": float(tr.guarded)},
        passed={},
        replica_count=1,
        seed=cfg.seed,
        notes={"series": "per-time diagnostics of a single trajectory"},
    )


def _dispatch(name: str, cfg: RunConfig, threads: int,
              out_dir: Path) -> ex.ExperimentReport:
    scheme = cfg.scheme.to_scheme()
    m = cfg.model
    if name == "simulate":
        return _run_simulate(cfg, scheme, threads, out_dir)
    if name == "contraction":
        times = _times_or(cfg, ex._uniform_grid(5.0, 20))
        a, b = _default_grid_bounds(m.N)
        return ex.run_contraction(
            m.params(), scheme, ex.InitialCondition.default_grid(),
            ex.InitialCondition.grid(a + 0.1, b + 0.1), times[-1],
            cfg.replicas, cfg.seed, output_times=times, threads=threads)
    if name == "cauchy":
        sizes = _need_sizes(cfg, name, 2)
        times = _times_or(cfg, [0.5, 1.0, 2.0, 4.0])
        return ex.run_cauchy_bound(
            m.params(sizes[0]), scheme, (sizes[0], sizes[1]), times,
            cfg.replicas, cfg.seed, sigma_rule=m.sigma_rule,
            sigma_value=m.sigma, threads=threads)
    if name == "chaos-rate":
        sizes = _need_sizes(cfg, name, 2)
        times = _times_or(cfg, [3.0])
        return ex.run_chaos_rate(
            m.params(sizes[0]), scheme, sizes, 8 * sizes[-1], times[-1],
            cfg.replicas, cfg.seed, sigma_rule=m.sigma_rule,
            sigma_value=m.sigma, threads=threads)
    if name == "stationary":
        times = _times_or(cfg, [20.0])
        out = times if len(times) > 1 else None
        return ex.run_stationary(m.params(), scheme, times[-1], cfg.replicas,
                                 cfg.seed, output_times=out, threads=threads)
    if name == "pde-residual":
        sizes = _need_sizes(cfg, name, 1)
        times = _times_or(cfg, [1.0])
        return ex.run_pde_residual(
            m.params(sizes[0]), scheme, sizes, cfg.test_functions, times[-1],
            cfg.replicas, cfg.seed, sigma_rule=m.sigma_rule,
            sigma_value=m.sigma, threads=threads)
    if name == "continuity":
        sizes = _need_sizes(cfg, name, 1)
        times = _times_or(cfg, [0.005, 0.01, 0.02, 0.04])
        return ex.run_continuity(
            m.params(sizes[0]), scheme, sizes, times, cfg.replicas, cfg.seed,
            sigma_rule=m.sigma_rule, sigma_value=m.sigma, threads=threads)
    if name == "moments":
        times = _times_or(cfg, [5.0])
        out = times if len(times) > 1 else None
        fixed = m.sigma_rule == "constant" and m.alpha == 1.0
        return ex.run_moment_monitor(
            m.params(), scheme, times[-1], cfg.replicas, cfg.seed,
            fixed_sigma_reference=fixed, output_times=out, threads=threads)
    raise ConfigError(f"unknown experiment '{name}'")


def execute(cfg: RunConfig, *, experiment: str | None = None,
            threads: int = 1, warnings: list[str] | None = None,
            echo: bool = True) -> int:
    """Run the configured experiment and write all artifacts.

    Returns the process exit status: 0 iff every pass flag is true, 1 when
    some flag is false, 2 when the experiment itself failed (partial
    artifacts are kept, with the failure recorded in both report.json and
    a FAILED marker file).
    """
    name = experiment or cfg.experiment
    if name is None:
        raise ConfigError("no experiment named: set the 'experiment' key or "
                          "use a subcommand")
    if cfg.experiment is not None and cfg.experiment != name:
        raise ConfigError(f"config names experiment '{cfg.experiment}' but "
                          f"the command is '{name}'")
    out_dir = Path(cfg.output_dir)
    started = time.perf_counter()
    try:
        report = _dispatch(name, cfg, threads, out_dir)
        report.params_echo["config"] = _config_echo(cfg)
        failed_to_run = False
    except ex.REPLICA_ERRORS + (RuntimeError,) as e:
        report = ex.ExperimentReport(
            name=name, params_echo={"config": _config_echo(cfg)},
            time_grid=[], observed={}, stderr={}, theoretical_bound={},
            fitted={}, passed={}, replica_count=cfg.replicas, seed=cfg.seed,
            failure=str(e))
        failed_to_run = True
    wall = time.perf_counter() - started

    ex.write_artifacts(report, out_dir, wall_time_s=wall)
    _write_manifest(out_dir, cfg, wall, warnings or [])
    if failed_to_run:
        (out_dir / "FAILED").write_text(report.failure + "\n",
                                        encoding="utf-8")
        if echo:
            click.echo(f"FAIL {name}: {report.failure}", err=True)
        return 2
    if echo:
        for flag, ok in report.passed.items():
            click.echo(f"{'PASS' if ok else 'FAIL'} {name}.{flag}")
    return 0 if report.all_passed else 1


def _config_echo(cfg: RunConfig) -> dict:
    d = cfg.model_dump(by_alias=True)
    return d


def _write_manifest(out_dir: Path, cfg: RunConfig, wall: float,
                    warnings: list[str]) -> None:
    manifest = {
        "config": _config_echo(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "warnings": list(warnings),
        "wall_time_s": float(wall),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# click wiring

def _common_options(f):
    for opt in (
        click.option("--threads", type=int, default=1, show_default=True,
                     help="Replica worker threads; never changes numbers."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False),
                     default=None, help="Override output_dir."),
        click.option("--replicas", type=int, default=None,
                     help="Override replica count."),
        click.option("--seed", type=int, default=None, help="Override seed."),
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="JSON config file (strict schema)."),
    ):
        f = opt(f)
    return f


def run_from_cli(name: str, config_path: str, seed: int | None,
                 replicas: int | None, out_dir: str | None,
                 threads: int) -> int:
    try:
        cfg, warnings = parse_config(Path(config_path).read_text(
            encoding="utf-8"))
        updates = {}
        if seed is not None:
            updates["seed"] = seed
        if replicas is not None:
            updates["replicas"] = replicas
        if out_dir is not None:
            updates["output_dir"] = out_dir
        if updates:
            cfg = cfg.model_copy(update=updates)
        for w in warnings:
            click.echo(f"warning: {w}", err=True)
        return execute(cfg, experiment=name, threads=threads,
                       warnings=warnings)
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        return 2


@click.group()
@click.version_option(version=__version__, prog_name="rieszgas")
def main():
    """Experiments over 1-d singularly repulsive particle systems."""


def _make_command(name: str):
    @click.command(name=name, help=f"Run the {name} experiment.")
    @_common_options
    def cmd(config_path, seed, replicas, out_dir, threads):
        sys.exit(run_from_cli(name, config_path, seed, replicas, out_dir,
                              threads))
    return cmd


for _name in EXPERIMENT_NAMES:
    main.add_command(_make_command(_name))


if __name__ == "__main__":
    main()
