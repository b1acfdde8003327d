from collections.abc import Callable
from pathlib import Path
from typing import Any, get_args

import click

from servtime._types import AdvVariant, Family, MempoolVariant, ServiceFamily
from servtime._version import __version__

PathType = click.Path(dir_okay=False, path_type=Path)


def _execute(
    ctx: click.Context,
    command: str,
    overrides: dict[str, Any],
    stage: Callable[..., Any],
    *args: Any,
) -> None:
    """Resolve the run configuration, run one stage and map failures to exit codes."""
    from servtime.core.config import RunConfig, get_config
    from servtime.core.exceptions import ServtimeError

    try:
        user = get_config()
        cfg = RunConfig.resolve(
            command,
            config_file=ctx.obj.get("config_file"),
            overrides=overrides,
            user=user,
        )

        import torch

        torch.set_num_threads(max(1, int(user.get("general.threads", 1))))
        stage(cfg, *args)
    except ServtimeError as e:
        click.secho(f"error[{e.exit_code}] {type(e).__name__}: {e}", fg="red", err=True)
        ctx.exit(e.exit_code)


@click.group()
@click.version_option(version=__version__, prog_name="servtime")
@click.option("-v", "--verbose", is_flag=True, help="Show debug output.")
@click.option("-q", "--quiet", is_flag=True, help="Only show warnings and errors.")
@click.option(
    "--config",
    "config_file",
    type=PathType,
    default=None,
    help="Flat key = value TOML file overriding the defaults of the command.",
)
@click.pass_context
def cli(ctx: click.Context, verbose: bool, quiet: bool, config_file: Path | None) -> None:
    from servtime.core.log import setup_logging

    setup_logging(verbose=verbose, quiet=quiet)
    ctx.obj = {"config_file": config_file}


# --------------------------------------------------
# SIMULATE
# --------------------------------------------------
@cli.command(help="Simulate a synthetic queue trace.")
@click.option("--family", type=click.Choice(get_args(Family)), default=None)
@click.option("--horizon", type=float, default=None, help="Observation window T.")
@click.option("--seed", type=int, default=None)
@click.option("--base-rate", type=float, default=None, help="Hawkes background rate.")
@click.option("--alpha", type=float, default=None, help="Hawkes kernel amplitude.")
@click.option("--beta", type=float, default=None, help="Hawkes kernel decay.")
@click.option("--link-shift", type=float, default=None, help="Softplus link shift (nh-*).")
@click.option("--link-scale", type=float, default=None, help="Softplus link scale (nh-*).")
@click.option("--service-rate", type=float, default=None, help="Inverse mean service requirement.")
@click.option("--phases", type=int, default=None, help="Erlang phases of the service law.")
@click.option("--out", "output", type=PathType, required=True)
@click.pass_context
def simulate(ctx: click.Context, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_simulate

    _execute(ctx, "simulate", overrides, run_simulate, output)


@cli.command(name="simulate-mempool", help="Simulate a sawtooth mempool backlog.")
@click.option("--rate", type=float, default=None, help="Backlog growth per unit time.")
@click.option("--block-rate", type=float, default=None, help="Poisson rate of blocks.")
@click.option("--horizon", type=float, default=None)
@click.option("--drop-fraction", type=float, default=None, help="Backlog share taken per block.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "output", type=PathType, required=True)
@click.pass_context
def simulate_mempool(ctx: click.Context, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_simulate_mempool

    _execute(ctx, "simulate_mempool", overrides, run_simulate_mempool, output)


# --------------------------------------------------
# INGEST
# --------------------------------------------------
@cli.command(help="Validate and sort an event file, optionally splitting off a test suffix.")
@click.option("--data", type=PathType, required=True)
@click.option("--out", "output", type=PathType, required=True)
@click.option("--horizon", type=float, default=None, help="0 takes the latest time in the file.")
@click.option("--test-fraction", type=float, default=None)
@click.pass_context
def ingest(ctx: click.Context, data: Path, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_ingest

    _execute(ctx, "ingest", overrides, run_ingest, data, output)


# --------------------------------------------------
# TRAIN
# --------------------------------------------------
@cli.command(name="train-rpp", help="Fit the recurrent arrival model.")
@click.option("--data", type=PathType, required=True)
@click.option("--out", "output", type=PathType, required=True)
@click.option("--horizon", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--cell", type=click.Choice(["gru", "lstm"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--bptt", type=int, default=None, help="Events per truncated unroll.")
@click.option("--validation-fraction", type=float, default=None)
@click.option("--include-tail/--no-include-tail", default=None, help="Score the final open interval.")
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_rpp(ctx: click.Context, data: Path, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_train_rpp

    _execute(ctx, "train_rpp", overrides, run_train_rpp, data, output)


@cli.command(name="train-ns", help="Fit a parametric service model on a frozen arrival model.")
@click.option("--data", type=PathType, required=True)
@click.option("--rpp", type=PathType, required=True, help="Arrival model checkpoint.")
@click.option("--out", "output", type=PathType, required=True)
@click.option("--family", type=click.Choice(get_args(ServiceFamily)), default=None)
@click.option("--horizon", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--validation-fraction", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_ns(ctx: click.Context, data: Path, rpp: Path, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_train_ns

    _execute(ctx, "train_ns", overrides, run_train_ns, data, rpp, output)


@cli.command(name="train-adv", help="Fit an adversarial service model on a frozen arrival model.")
@click.option("--data", type=PathType, required=True)
@click.option("--rpp", type=PathType, required=True, help="Arrival model checkpoint.")
@click.option("--out", "output", type=PathType, required=True)
@click.option("--variant", type=click.Choice(get_args(AdvVariant)), default=None)
@click.option("--horizon", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--state-dim", type=int, default=None, help="Transition LSTM size (ras, ras_nh).")
@click.option("--noise-dim", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--bptt", type=int, default=None)
@click.option("--critic-steps", type=int, default=None)
@click.option("--lambda1", type=float, default=None, help="Lipschitz penalty weight.")
@click.option("--lambda2", type=float, default=None, help="Censoring penalty weight.")
@click.option("--lambda3", type=float, default=None, help="Matching penalty weight.")
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_adv(ctx: click.Context, data: Path, rpp: Path, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_train_adv

    _execute(ctx, "train_adv", overrides, run_train_adv, data, rpp, output)


@cli.command(name="train-mempool", help="Fit the mempool backlog, block and accepted models.")
@click.option("--data", type=PathType, required=True)
@click.option("--out", "output", type=PathType, required=True)
@click.option("--variant", type=click.Choice(get_args(MempoolVariant)), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--bptt", type=int, default=None)
@click.option("--critic-steps", type=int, default=None)
@click.option("--lambda1", type=float, default=None)
@click.option("--lambda3", type=float, default=None)
@click.option("--noise-dim", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_mempool(ctx: click.Context, data: Path, output: Path, **overrides: Any) -> None:
    from servtime.utils.pipeline import run_train_mempool

    _execute(ctx, "train_mempool", overrides, run_train_mempool, data, output)


# --------------------------------------------------
# INFERENCE
# --------------------------------------------------
@cli.command(name="sample-rpp", help="Sample arrivals from a trained arrival model.")
@click.option("--rpp", type=PathType, required=True)
@click.option("--out", "output", type=PathType, required=True)
@click.option("--history", type=PathType, default=None, help="Event file to continue from.")
@click.option("--horizon", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def sample_rpp(
    ctx: click.Context, rpp: Path, output: Path, history: Path | None, **overrides: Any
) -> None:
    from servtime.utils.pipeline import run_sample_rpp

    _execute(ctx, "sample_rpp", overrides, run_sample_rpp, rpp, output, history)


@cli.command(help="Write per-event (or per-block) predictions to CSV.")
@click.option("--model", "model_path", type=PathType, required=True)
@click.option("--rpp", type=PathType, default=None, help="Arrival checkpoint (service models).")
@click.option("--data", type=PathType, required=True)
@click.option("--out", "output", type=PathType, required=True)
@click.option("--horizon", type=float, default=None)
@click.option("--n-samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def predict(
    ctx: click.Context,
    model_path: Path,
    rpp: Path | None,
    data: Path,
    output: Path,
    **overrides: Any,
) -> None:
    from servtime.utils.pipeline import run_predict

    _execute(ctx, "predict", overrides, run_predict, model_path, rpp, data, output)


@cli.command(help="Score a model on the chronological test suffix of a trace.")
@click.option("--model", "model_path", type=PathType, required=True)
@click.option("--rpp", type=PathType, default=None, help="Arrival checkpoint (service models).")
@click.option("--data", type=PathType, required=True)
@click.option("--report", type=PathType, required=True, help="JSON report path.")
@click.option("--qq", type=PathType, default=None, help="Q-Q pairs CSV path.")
@click.option("--horizon", type=float, default=None)
@click.option("--n-samples", type=int, default=None)
@click.option("--n-quantiles", type=int, default=None)
@click.option("--test-fraction", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def evaluate(
    ctx: click.Context,
    model_path: Path,
    rpp: Path | None,
    data: Path,
    report: Path,
    qq: Path | None,
    **overrides: Any,
) -> None:
    from servtime.utils.pipeline import run_evaluate

    _execute(ctx, "evaluate", overrides, run_evaluate, model_path, rpp, data, report, qq)


# --------------------------------------------------
# CONFIG
# --------------------------------------------------
@cli.group(help="Manage user defaults.")
def config() -> None:
    pass


@config.command(name="get", help="Get a config value.")
@click.argument("key")
@click.pass_context
def config_get(ctx: click.Context, key: str) -> None:
    from servtime.core.config import get_config
    from servtime.core.exceptions import ConfigError

    try:
        click.echo(get_config().get(key))
    except ConfigError as e:
        click.secho(str(e), fg="red", err=True)
        ctx.exit(e.exit_code)


@config.command(name="set", help="Set a config value.")
@click.argument("key")
@click.argument("value")
@click.pass_context
def config_set(ctx: click.Context, key: str, value: str) -> None:
    from servtime.core.config import get_config
    from servtime.core.exceptions import ConfigError

    try:
        get_config().set(key, value)
    except ConfigError as e:
        click.secho(str(e), fg="red", err=True)
        ctx.exit(e.exit_code)


@config.command(name="list", help="List all configurations.")
@click.pass_context
def config_list(ctx: click.Context) -> None:
    from servtime.core.config import get_config
    from servtime.core.exceptions import ConfigError

    try:
        click.echo("\n".join(get_config().list()))
    except ConfigError as e:
        click.secho(str(e), fg="red", err=True)
        ctx.exit(e.exit_code)


if __name__ == "__main__":
    cli()
