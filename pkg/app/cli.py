"""
Command-line entry point: ``misapp <subcommand> [flags]``.

Every subcommand accepts ``--config`` (JSON RunConfig) and the override
flags; a flag wins over the config file, which wins over the defaults.
Exit codes: 0 success, 1 configuration or data failure, 2 usage error.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import click
from pydantic import ValidationError

from app.core.config import configure_logging
from app.core.exceptions import ConfigurationError, MISAppError
from app.schemas.config import RunConfig
from app.services import pipeline

logger = logging.getLogger(__name__)


def run_options(command):
    """Shared ``--config`` and override flags; the decorated command receives ``config: RunConfig``."""

    @click.option("--config", "config_path", type=click.Path(path_type=Path), help="JSON run configuration")
    @click.option("--seed", type=int, help="Root seed")
    @click.option("--split", type=click.Choice(["standard", "cold_start"]), help="Split mode")
    @click.option("--out", "out_dir", type=click.Path(path_type=Path), help="Output directory")
    @click.option("--checkpoint", type=click.Path(path_type=Path), help="Checkpoint path")
    @click.option("--fusion", type=click.Choice(["cmgf", "gated", "sum", "mean"]), help="Fusion operator")
    @click.option("--no-multihop", is_flag=True, help="1-hop graph only")
    @click.option("--no-temporal", is_flag=True, help="Drop the temporal context")
    @click.option("--no-spatial", is_flag=True, help="Drop the spatial context")
    @click.option("--no-decoder", is_flag=True, help="Use the encoder output directly")
    @functools.wraps(command)
    def wrapper(
        config_path, seed, split, out_dir, checkpoint, fusion, no_multihop, no_temporal, no_spatial, no_decoder, **kwargs
    ):
        overrides = {
            "seed": seed,
            "split": split,
            "paths.out_dir": str(out_dir) if out_dir else None,
            "paths.checkpoint": str(checkpoint) if checkpoint else None,
            "model.fusion_mode": fusion,
            "model.use_multihop": False if no_multihop else None,
            "model.use_temporal": False if no_temporal else None,
            "model.use_spatial": False if no_spatial else None,
            "model.use_decoder": False if no_decoder else None,
        }
        config = pipeline.load_run_config(config_path, overrides)
        return command(config=config, **kwargs)

    return wrapper


@click.group()
@click.option("--log-level", envvar="MISAPP_LOG_LEVEL", help="Logging level (default from settings)")
def cli(log_level: Optional[str]) -> None:
    """Next-app prediction with multi-hop session graphs."""
    configure_logging(log_level)


@cli.command()
@run_options
def synth(config: RunConfig) -> int:
    """Generate a synthetic usage log with routine motifs."""
    for name, path in pipeline.run_synth(config).items():
        click.echo(f"{name}: {path}")
    return 0


@cli.command()
@run_options
def preprocess(config: RunConfig) -> int:
    """Parse, clean, segment and split the events file."""
    result = pipeline.run_preprocess(config)
    for key, value in sorted(result.counts.items()):
        click.echo(f"{key}: {value}")
    return 0


@cli.command()
@run_options
def train(config: RunConfig) -> int:
    """Train on the chosen split and write the best-validation checkpoint."""
    result, path = pipeline.run_train(config)
    click.echo(result.history_text(), nl=False)
    click.echo(f"checkpoint: {path} (epoch {result.best_epoch})")
    return 0


@cli.command(name="eval")
@run_options
@click.option("--profile", is_flag=True, help="Add parameter counts and inference latency")
@click.option("--pdf", is_flag=True, help="Also render the report as PDF")
def evaluate(config: RunConfig, profile: bool, pdf: bool) -> int:
    """ACC@k / MRR@k of the model and the MFU / MRU baselines."""
    report, path = pipeline.run_eval(config, profile=profile, pdf=pdf)
    click.echo(report.table(), nl=False)
    click.echo(f"metrics: {path}")
    return 0


@cli.command()
@run_options
@click.option("--pdf", is_flag=True, help="Also render the report as PDF")
def explain(config: RunConfig, pdf: bool) -> int:
    """Hop-weight / PMI alignment and the perturbation experiment."""
    report, path = pipeline.run_explain(config, pdf=pdf)
    alignment, study = report.alignment, report.perturbation
    click.echo(f"samples: {len(alignment.samples)}  mean tau: {alignment.mean_tau:.4f}  top-1 consistency: {alignment.consistency_rate:.4f}")
    click.echo(
        f"perturbation pairs: {len(study.critical)}  mean drop {study.mean_delta_critical:.4f} "
        f"vs random {study.mean_delta_random:.4f}  p={study.p_value:.4g}"
    )
    click.echo(f"report: {path}")
    return 0


@cli.command()
@run_options
def gradcheck(config: RunConfig) -> int:
    """Finite-difference check of every parameter group of the full model."""
    errors = pipeline.run_gradcheck(config)
    width = max(len(name) for name in errors)
    for name, error in errors.items():
        flag = "ok" if error < pipeline.GRADIENT_TOLERANCE else "FAIL"
        click.echo(f"{name:<{width}}  {error:.3e}  {flag}")
    return 0 if all(e < pipeline.GRADIENT_TOLERANCE for e in errors.values()) else 1


@cli.command()
@run_options
@click.option("--axis", type=click.Choice(sorted(pipeline.SWEEP_AXES)), required=True, help="Hyperparameter to vary")
@click.option("--values", required=True, help="Comma-separated integer values")
def sweep(config: RunConfig, axis: str, values: str) -> int:
    """Retrain across values of K, d, T or L and report test metrics."""
    try:
        parsed = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers", param_hint="--values")
    payload, path = pipeline.run_sweep(config, axis, parsed)
    for value, metrics in payload["results"].items():
        click.echo(f"{axis}={value}  " + "  ".join(f"{k} {v:.4f}" for k, v in metrics.items()))
    click.echo(f"sweep: {path}")
    return 0


def dispatch(argv: Sequence[str]) -> int:
    """Run one command line and map failures to exit statuses."""
    try:
        result = cli.main(args=list(argv), prog_name="misapp", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigurationError as exc:
        click.echo(f"error: invalid configuration field '{exc.field}': {exc}", err=True)
        return 1
    except ValidationError as exc:
        field = ".".join(str(p) for p in exc.errors()[0]["loc"]) if exc.errors() else "config"
        click.echo(f"error: invalid configuration field '{field}': {exc}", err=True)
        return 1
    except MISAppError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
