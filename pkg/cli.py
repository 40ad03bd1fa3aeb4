"""
Command-line entry point: run, sweep, verify and report.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration, 3 integrity violations.
"""
import json
import logging
import sys

import click

import services
from config import Config, InvalidConfig, validate_config
from reporting import format_report
from utils import configure_logging

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_VIOLATIONS = 3


def experiment_options(f):
    options = [
        click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None,
                     help="KEY=VALUE config file (upper-case field names)."),
        click.option("--rounds", type=int, default=None),
        click.option("--repeats", type=int, default=None),
        click.option("--clients", "n_clients", type=int, default=None),
        click.option("--milestone-interval", "milestone_interval_s", type=float, default=None),
        click.option("--alpha", type=float, default=None),
        click.option("--threshold", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--adversary", type=str, default=None, help="kind:count[,kind:count]"),
        click.option("--epochs", "local_epochs", type=int, default=None),
        click.option("--span-mode", type=click.Choice(Config.SPAN_MODES), default=None),
        click.option("--no-reputation", "no_reputation", is_flag=True, default=False,
                     help="Plain FedAvg weighting with integrity checks only."),
        click.option("--workers", type=int, default=None),
        click.option("--out", type=str, default=None),
        click.option("--format", "fmt", type=click.Choice(["csv", "structured"]), default=None),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def resolve(config_file, no_reputation, fmt, **flags):
    overrides = dict(flags)
    overrides["format"] = fmt
    if no_reputation:
        overrides["reputation_enabled"] = False
    return validate_config(config_file, overrides)


def fail_invalid(e: InvalidConfig) -> None:
    click.echo(f"Invalid configuration: {e}", err=True)
    sys.exit(EXIT_INVALID_CONFIG)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.option("--quiet", "-q", is_flag=True, help="Warnings and errors only.")
def cli(verbose, quiet):
    """Federated learning over a DAG ledger: simulation and audit tools."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    configure_logging(level)


@cli.command()
@experiment_options
def run(config_file, no_reputation, fmt, **flags):
    """Run one experiment configuration."""
    try:
        cfg = resolve(config_file, no_reputation, fmt, **flags)
    except InvalidConfig as e:
        fail_invalid(e)
    try:
        logger.info(f"🚀 Starting experiment {cfg.exp_id}")
        result = services.run_experiment(cfg)
    except InvalidConfig as e:
        fail_invalid(e)
    except Exception as e:
        logger.exception(f"❌ Experiment failed: {e}")
        sys.exit(EXIT_FAILURE)
    click.echo(format_report(result.report))
    logger.info(f"✅ Experiment {cfg.exp_id} complete")
    sys.exit(EXIT_OK)


@cli.command()
@experiment_options
@click.option("--points", type=str, default=None, help="Comma-separated round counts (default 10,30,50).")
def sweep(config_file, no_reputation, fmt, points, **flags):
    """Run the round-count sweep and write a merged summary."""
    try:
        cfg = resolve(config_file, no_reputation, fmt, **flags)
        rounds_list = None
        if points:
            try:
                rounds_list = tuple(int(p) for p in points.split(",") if p.strip())
            except ValueError:
                raise InvalidConfig("points", f"cannot parse {points!r}")
            if not rounds_list or min(rounds_list) < 1:
                raise InvalidConfig("points", "round counts must be >= 1")
    except InvalidConfig as e:
        fail_invalid(e)
    try:
        results = services.run_sweep(cfg, rounds_list)
    except Exception as e:
        logger.exception(f"❌ Sweep failed: {e}")
        sys.exit(EXIT_FAILURE)
    for result in results:
        click.echo(format_report(result.report))
        click.echo("")
    sys.exit(EXIT_OK)


@cli.command()
@click.argument("path", type=click.Path(exists=True, file_okay=False))
def verify(path):
    """Audit persisted ledger snapshots and off-chain blobs under PATH."""
    try:
        audits = services.audit_path(path)
    except Exception as e:
        logger.exception(f"❌ Audit failed: {e}")
        sys.exit(EXIT_FAILURE)
    total = 0
    for repeat_path, violations in audits.items():
        total += len(violations)
        for v in violations:
            click.echo(json.dumps({"path": repeat_path, **v}, sort_keys=True))
    if total:
        click.echo(f"{total} integrity violation(s) in {len(audits)} repeat(s)", err=True)
        sys.exit(EXIT_VIOLATIONS)
    click.echo(f"No violations in {len(audits)} repeat(s)")
    sys.exit(EXIT_OK)


@cli.command()
@click.argument("exp_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the recomputed report as JSON.")
def report(exp_dir, as_json):
    """Recompute an experiment's metrics from its event logs."""
    try:
        recomputed = services.recompute_report(exp_dir)
    except Exception as e:
        logger.exception(f"❌ Could not recompute report: {e}")
        sys.exit(EXIT_FAILURE)
    if as_json:
        click.echo(json.dumps(recomputed.to_dict(), sort_keys=True, indent=2))
    else:
        click.echo(format_report(recomputed))
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    cli()
