import click

from necroseg import __version__
from necroseg.benchmark import run_benchmark
from necroseg.configuration.configuration import load_config
from necroseg.core import logger, seed_everything, set_verbosity
from necroseg.evaluate import run_evaluate, run_report
from necroseg.exceptions import Error
from necroseg.generate import run_generate
from necroseg.infer import run_infer
from necroseg.train import run_train_classifier, run_train_refiner
from necroseg.validate import run_validation


class ErrorHandlingGroup(click.Group):
    """Group that turns package errors into a logged message and an exit code"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except Error as e:
            logger.error(f"{e.name}: {e.message}")
            ctx.exit(e.exit_code)


@click.group(cls=ErrorHandlingGroup)
@click.version_option(__version__)
@click.pass_context
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Experiment YAML file, merged over the bundled defaults",
)
@click.option("--seed", type=int, default=None, help="Override the experiment seed")
@click.option("-w", "--workspace", type=click.Path(file_okay=False), default=None, help="Override the workspace directory")
@click.option("-t", "--threads", type=click.IntRange(min=1), default=None, help="Workers for generation and region refinement")
@click.option("--verbose", is_flag=True, help="Verbose mode")
def cli(ctx, config_path, seed, workspace, threads, verbose, no_args_is_help=True, **kwargs):
    """\b
    necroseg: synthetic tumor-necrosis segmentation with a LoRA patch classifier
    and a Brownian-bridge diffusion refiner
    \b
    """
    ctx.ensure_object(dict)
    set_verbosity(verbose)
    config = load_config(config_path).update(
        {"seed": seed, "paths.workspace": workspace, "threads": threads}
    )
    seed_everything(config.seed)
    ctx.obj["verbose"] = verbose
    ctx.obj["config"] = config


###################
# Data generation #
###################


@cli.command()
@click.pass_context
def generate(ctx, no_args_is_help=True, **kwargs):
    """\b
    Generate synthetic slides and the source, patch and region datasets
    """
    run_generate(**kwargs, **ctx.obj)


@cli.command()
@click.option(
    "-d",
    "--datasets",
    multiple=True,
    type=click.Choice(["source", "patches", "regions"]),
    help="Datasets to check, all by default",
)
@click.option(
    "-s",
    "--schema",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Manifest JSON schema, the bundled one by default",
)
@click.option("-m", "--markdown", is_flag=True, help="Output is in markdown format")
@click.pass_context
def validate(ctx, no_args_is_help=True, **kwargs):
    """\b
    Check dataset manifests: schema, files, geometry and split overlap
    """
    run_validation(workspace=ctx.obj["config"].workspace, verbose=ctx.obj["verbose"], **kwargs)


############
# Training #
############


@cli.command("train-classifier")
@click.pass_context
def train_classifier(ctx, no_args_is_help=True, **kwargs):
    """\b
    Pretrain the patch classifier on the source family and LoRA fine-tune it
    """
    run_train_classifier(**kwargs, **ctx.obj)


@cli.command("train-refiner")
@click.pass_context
def train_refiner(ctx, no_args_is_help=True, **kwargs):
    """\b
    Train the diffusion refiner on coarse masks of the region dataset
    """
    run_train_refiner(**kwargs, **ctx.obj)


#############
# Inference #
#############


@cli.command()
@click.argument("wsi", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def infer(ctx, no_args_is_help=True, **kwargs):
    """\b
    Segment slides into coarse and refined label rasters
    \b
    WSI: slide PNGs or JSON sidecars, the evaluation slides by default
    """
    run_infer(**kwargs, **ctx.obj)


##############
# Evaluation #
##############


@cli.command()
@click.pass_context
def evaluate(ctx, no_args_is_help=True, **kwargs):
    """\b
    Score coarse and refined rasters against ground truth
    """
    run_evaluate(**kwargs, **ctx.obj)


@cli.command()
@click.option("-m", "--markdown", is_flag=True, help="Output is in markdown format")
@click.pass_context
def report(ctx, no_args_is_help=True, **kwargs):
    """\b
    Print the evaluation tables
    """
    run_report(**kwargs, **ctx.obj)


@cli.command()
@click.option("-s", "--seeds", multiple=True, type=int, help="Seed to run, repeatable; the config seed and the following ones by default")
@click.option("-n", "--n-seeds", type=click.IntRange(min=1), default=3, show_default=True, help="Number of seeds when none are given")
@click.option("--min-gain", type=float, default=1.0, show_default=True, help="Required mean mIOU gain of refinement, in percentage points")
@click.pass_context
def benchmark(ctx, no_args_is_help=True, **kwargs):
    """\b
    Run the whole pipeline for several seeds and compare refined with coarse masks
    """
    run_benchmark(**kwargs, **ctx.obj)


if __name__ == "__main__":
    cli()
