# src/main.py
# Hauptmodul des cdweight Toolkits
# Kommandozeile für Instanzerzeugung, Protokollberechnung, Simulation, Ensembles,
# Skalierungsmessung und Analysen

import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Optional

import click
from click.core import ParameterSource
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src import config
from src import experiment_service as experiments
from src.errors import CdWeightError, ConfigError, MissingArtifactError
from src.model_service import instance_path, sample_ising
from src.utils import canonical_hash, setup_logging

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """
    Parameter eines Kommandos; aus JSON/TOML geladen und durch Kommandozeilenoptionen überschrieben.

    Hinweis:
        - Unbekannte Schlüssel werden abgelehnt (extra="forbid")
        - out, threads und cache gehen nicht in den Konfigurations-Hash ein
    """
    model_config = ConfigDict(extra="forbid")

    ising_class: str = "ferro"
    width: int = 3
    height: int = 3
    seed: int = 0
    count: int = 1
    K: list[int] = list(config.DEFAULT_K_VALUES)
    ansatz: str = "one-body"
    grid: int = config.DEFAULT_GRID_POINTS
    td: Optional[list[float]] = None
    out: Optional[str] = None
    threads: int = 1
    cache: bool = True
    instance: Optional[str] = None
    exact_agp: bool = False
    lam: float = config.ANALYSIS_LAMBDA
    site: int = 1
    delta: float = config.RESPONSE_DELTA

    @field_validator("ising_class")
    @classmethod
    def _known_class(cls, value):
        if value not in config.ISING_CLASSES:
            raise ValueError(f"unknown class '{value}' (expected one of {', '.join(config.ISING_CLASSES)})")
        return value

    @field_validator("ansatz")
    @classmethod
    def _known_ansatz(cls, value):
        if value not in config.ANSATZ_KINDS:
            raise ValueError(f"unknown ansatz '{value}' (expected one of {', '.join(config.ANSATZ_KINDS)})")
        return value

    @field_validator("K")
    @classmethod
    def _positive_k(cls, value):
        if not value or min(value) < 1:
            raise ValueError("K values must be >= 1")
        return sorted(set(value))

    @field_validator("width", "height", "count", "threads", "site")
    @classmethod
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("grid")
    @classmethod
    def _grid_size(cls, value):
        if value < 2:
            raise ValueError("grid needs at least 2 points")
        return value

    @field_validator("td")
    @classmethod
    def _positive_td(cls, value):
        if value is not None and (not value or min(value) <= 0.0):
            raise ValueError("t_d values must be positive")
        return value

    @field_validator("lam")
    @classmethod
    def _unit_interval(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        return value

    def config_hash(self):
        return canonical_hash(self.model_dump(mode="json", exclude={"out", "threads", "cache"}))


def load_config_file(file_path):
    """Liest eine RunConfig-Datei (.json oder .toml) als dict."""
    if not os.path.exists(file_path):
        raise MissingArtifactError(f"Config file not found: {file_path}")
    try:
        if file_path.endswith(".toml"):
            with open(file_path, "rb") as f:
                return tomllib.load(f)
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Config file {file_path} is not valid: {e}") from e


def build_run_config(ctx, params, config_file=None):
    """
    Führt Datei und ausdrücklich gesetzte Optionen zusammen und validiert.

    Raises:
        ConfigError: Validierung fehlgeschlagen
    """
    values = load_config_file(config_file) if config_file else {}
    for name, value in params.items():
        source = ctx.get_parameter_source(name)
        if source in (ParameterSource.COMMANDLINE, ParameterSource.ENVIRONMENT) or (
                name not in values and source is not None and value not in (None, ())):
            values[name] = list(value) if isinstance(value, tuple) else value
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration: {details}") from None


def _instances(cfg):
    """Instanzpfade: --instance oder die Startwerte seed .. seed + count - 1."""
    if cfg.instance:
        return [cfg.instance]
    paths = []
    for i in range(cfg.count):
        inst = sample_ising(cfg.ising_class, cfg.width, cfg.height, cfg.seed + i)
        path = instance_path(inst, cfg.out)
        if not os.path.exists(path):
            raise MissingArtifactError(f"Instance file not found: {path} (run 'gen' first)")
        paths.append(path)
    return paths


def _run(ctx, action):
    """Führt ein Kommando aus und bildet Fehler auf Exit-Codes ab."""
    try:
        action()
    except CdWeightError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(e.exit_code)


def selection_options(func):
    for option in reversed([
        click.option("--class", "ising_class", type=str, default="ferro", help="ferro, antiferro, spin-glass"),
        click.option("--width", type=int, default=3),
        click.option("--height", type=int, default=3),
        click.option("--seed", type=int, default=0),
        click.option("--count", type=int, default=1),
        click.option("--instance", type=click.Path(), default=None, help="Instance JSON file"),
        click.option("--out", type=click.Path(), default=None, envvar=config.OUTPUT_ROOT_ENV,
                     help="Output root directory"),
        click.option("--config", "config_file", type=click.Path(), default=None, help="JSON/TOML RunConfig"),
    ]):
        func = option(func)
    return func


def protocol_options(func):
    for option in reversed([
        click.option("-K", "K", type=int, multiple=True, help="Polynomial degree (repeatable)"),
        click.option("--ansatz", type=str, default="one-body", help="one-body or two-body"),
        click.option("--grid", type=int, default=config.DEFAULT_GRID_POINTS, help="lambda grid points"),
        click.option("--cache/--no-cache", default=True, help="Reuse the trace cache"),
    ]):
        func = option(func)
    return func


def _params(kwargs):
    return {k: v for k, v in kwargs.items() if k != "config_file"}


@click.group()
@click.option("--log-level", default="INFO", show_default=True)
@click.option("--log-json", is_flag=True, default=False, help="Structured JSON log lines")
def cli(log_level, log_json):
    """cdweight: gewichtete variationelle CD-Protokolle für Ising-Modelle."""
    setup_logging(log_level, log_json)


@cli.command()
@selection_options
@click.pass_context
def gen(ctx, config_file, **kwargs):
    """Erzeugt Ising-Instanzen."""
    def action():
        cfg = build_run_config(ctx, _params(kwargs), config_file)
        paths = experiments.generate_instances(cfg.ising_class, cfg.width, cfg.height, cfg.seed,
                                               cfg.count, cfg.out, cfg.config_hash())
        for path in paths:
            click.echo(path)
    _run(ctx, action)


@cli.command()
@selection_options
@protocol_options
@click.pass_context
def coeffs(ctx, config_file, **kwargs):
    """Berechnet Protokolltabellen alpha^(K)(lambda)."""
    def action():
        cfg = build_run_config(ctx, _params(kwargs), config_file)
        for path in _instances(cfg):
            outputs = experiments.compute_protocols(path, cfg.K, cfg.ansatz, cfg.grid, cfg.out,
                                                    cfg.cache, cfg.config_hash())
            for K, info in outputs.items():
                cached = "cached" if info["stage1_cached"] else f"{info['seconds_stage1']:.3f}s"
                click.echo(f"K={K}: {info['csv']} (stage 1: {cached}, "
                           f"stage 2: {info['seconds_stage2']:.3f}s, failures: {info['failures']})")
    _run(ctx, action)


@cli.command()
@selection_options
@protocol_options
@click.option("--td", type=float, multiple=True, help="Protocol duration (repeatable)")
@click.option("--exact-agp", is_flag=True, default=False, help="Add the exact-AGP reference run")
@click.pass_context
def simulate(ctx, config_file, **kwargs):
    """Simuliert die Zeitentwicklung ohne CD und mit alpha^(K)."""
    def action():
        cfg = build_run_config(ctx, _params(kwargs), config_file)
        td_values = cfg.td or list(config.DEFAULT_TD_VALUES)
        for path in _instances(cfg):
            frame = experiments.simulate_instance(path, cfg.K, cfg.ansatz, td_values, cfg.out,
                                                  cfg.exact_agp, cfg.config_hash())
            name = os.path.splitext(os.path.basename(path))[0]
            summary = os.path.join(config.data_subdir(config.RESULTS_SUBDIR, cfg.out),
                                   f"summary_{name}_{cfg.ansatz}.csv")
            experiments.write_summary(frame, summary, cfg.config_hash())
            click.echo(frame.to_string(index=False))
            click.echo(f"Summary written: {summary}")
    _run(ctx, action)


@cli.command()
@selection_options
@protocol_options
@click.option("--td", type=float, multiple=True, help="Protocol duration (repeatable)")
@click.option("--threads", type=int, default=1, help="Worker processes")
@click.pass_context
def ensemble(ctx, config_file, **kwargs):
    """Ensemble aus gen + coeffs + simulate mit Median und Quartilen."""
    def action():
        cfg = build_run_config(ctx, _params(kwargs), config_file)
        out = experiments.run_ensemble(cfg.ising_class, cfg.width, cfg.height, cfg.seed, cfg.count,
                                       cfg.K, cfg.ansatz, cfg.td or [0.01], cfg.grid, cfg.out,
                                       cfg.threads, cfg.cache, cfg.config_hash())
        click.echo(out["statistics"].to_string(index=False))
        click.echo(f"Statistics written: {out['stats']}")
    _run(ctx, action)


@cli.command()
@click.option("-K", "K", type=int, multiple=True, help="Polynomial degree (default 2 and 3)")
@click.option("--out", type=click.Path(), default=None, envvar=config.OUTPUT_ROOT_ENV)
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.pass_context
def bench(ctx, config_file, **kwargs):
    """Misst die Skalierung der Stufe 1 auf 1D-Ketten."""
    def action():
        params = _params(kwargs)
        if not params.get("K"):
            params["K"] = tuple(sorted(config.BENCH_LADDERS))
        cfg = build_run_config(ctx, params, config_file)
        out = experiments.run_bench(cfg.K, root=cfg.out, config_hash=cfg.config_hash())
        for K, fit in out["fits"].items():
            click.echo(f"K={K}: slope {fit['slope']:.2f} -> {fit['verdict']}")
        click.echo(f"Timings written: {out['csv']}")
    _run(ctx, action)


@cli.command()
@selection_options
@protocol_options
@click.option("--td", type=float, multiple=True, help="Protocol duration (first value used)")
@click.option("--lam", type=float, default=config.ANALYSIS_LAMBDA, help="lambda for deviations/responses")
@click.option("--site", type=int, default=1, help="Perturbed site for the response function")
@click.option("--delta", type=float, default=config.RESPONSE_DELTA, help="Relative field step")
@click.pass_context
def analyze(ctx, config_file, **kwargs):
    """Geschwindigkeitsschranke, Abstand zu alpha^(inf) und Response-Funktion."""
    def action():
        cfg = build_run_config(ctx, _params(kwargs), config_file)
        t_d = (cfg.td or [0.01])[0]
        for path in _instances(cfg):
            report = experiments.run_analysis(path, cfg.K, cfg.ansatz, cfg.lam, cfg.site, cfg.delta,
                                              t_d, cfg.grid, cfg.out, cfg.config_hash())
            for K, entry in report["K"].items():
                click.echo(f"K={K}: F_f={entry['F_f']:.6g} bound={entry['speed_limit_bound']:.6g} "
                           f"lhs={entry['speed_limit_lhs']:.6g} deviation={entry['alpha_deviation']:.6g}")
            click.echo(f"Analysis written: {report['path']}")
    _run(ctx, action)


if __name__ == "__main__":
    cli()
