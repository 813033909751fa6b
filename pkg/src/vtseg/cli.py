"""Command line entry point: ``vtseg <command> [options]``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .dataio import DegenerateSubjectError, GenerationError, SplitError
from .harness.checkpoint import CheckpointError
from .harness.config import deep_update, load_config, parse_override
from .harness.pipeline import TrainingDivergedError
from .harness.plots import PlotError
from .harness.runs import EvaluationError
from .phonology import UnknownPhonemeError

# exit code, category
ERROR_CATEGORIES = [
    (CheckpointError, 4, "checkpoint"),
    (TrainingDivergedError, 5, "divergence"),
    (EvaluationError, 6, "evaluation"),
    (PlotError, 7, "plot"),
    ((GenerationError, SplitError, DegenerateSubjectError, UnknownPhonemeError, FileNotFoundError), 3, "data"),
    ((KeyError, ValueError, TypeError), 2, "config"),
]


def _category(exc: BaseException) -> tuple[int, str]:
    for types, code, name in ERROR_CATEGORIES:
        if isinstance(exc, types):
            return code, name
    return 1, "internal"


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as exc:  # noqa: BLE001 - mapped to a diagnostic exit code
            code, name = _category(exc)
            click.echo(f"error [{name}]: {exc}", err=True)
            sys.exit(code)


@click.group(cls=_Group)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML run config.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/default", show_default=True,
              help="Run directory.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key, e.g. stage3.lr=3e-4.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, out, overrides, verbose):
    """Speech-guided vocal-tract segmentation pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s")
    upd: dict = {}
    for o in overrides:
        upd = deep_update(upd, parse_override(o))
    if seed is not None:
        upd["seed"] = seed
    ctx.obj = {"cfg": load_config(config_path, upd), "out": Path(out)}


def _progress(msg):
    click.echo(msg, err=True)


@main.command()
@click.option("--speakers", type=int, default=None)
@click.option("--tasks", type=int, default=None)
@click.option("--frames", type=int, default=None, help="Frames per task.")
@click.option("--size", type=int, default=None, help="Processed frame size (H = W).")
@click.pass_obj
def synth(obj, speakers, tasks, frames, size):
    """Generate the synthetic phantom corpus into OUT."""
    from .harness.config import RunConfig
    from .harness.runs import synth as do_synth

    d = obj["cfg"].to_dict()
    for key, v in (("n_speakers", speakers), ("n_tasks", tasks), ("frames_per_task", frames),
                   ("height", size), ("width", size)):
        if v is not None:
            d["data"][key] = v
    cfg = RunConfig.from_dict(d)
    click.echo(f"manifest {do_synth(cfg, obj['out'])}")


@main.command()
@click.pass_obj
def priors(obj):
    """Build subject prior tables for the training split."""
    from .harness.runs import build_priors

    click.echo(build_priors(obj["cfg"], obj["out"]))


@main.command()
@click.pass_obj
def pretrain(obj):
    """Stage 2: contrastive pretraining."""
    from .harness.runs import pretrain as do

    click.echo(do(obj["cfg"], obj["out"], _progress))


@main.command()
@click.option("--stage2", "stage2_path", type=click.Path(dir_okay=False), default=None,
              help="Stage-2 checkpoint (default OUT/stage2.pt).")
@click.pass_obj
def train(obj, stage2_path):
    """Stage 3: train the cross-attention segmenter on frozen encoders."""
    from .harness.runs import train as do

    click.echo(do(obj["cfg"], obj["out"], stage2_path, _progress))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None, help="Default OUT/stage3.pt.")
@click.option("--split", "split_tag", type=click.Choice(["SS-UT", "US-ST", "US-UT"]), default=None)
@click.option("--mode", type=click.Choice(["full", "image-only"]), default="image-only", show_default=True)
@click.pass_obj
def evaluate(obj, checkpoint, split_tag, mode):
    """Evaluate a Stage-3 checkpoint; writes per-frame and summary tables."""
    from .harness.runs import evaluate as do

    groups = do(obj["cfg"], obj["out"], checkpoint or obj["out"] / "stage3.pt", split_tag, mode)
    for key, s in groups.items():
        click.echo(f"{key[0]}\t{key[1]}\tDSC {s.dsc_mean:.2f} ± {s.dsc_std:.2f}\tASD {s.asd_mean:.2f} ± {s.asd_std:.2f} mm")


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--input", "input_dir", type=click.Path(file_okay=False, exists=True), required=True,
              help="Frames directory, or a corpus task directory for full mode.")
@click.option("--mode", type=click.Choice(["full", "image-only"]), default="image-only", show_default=True)
@click.pass_obj
def predict(obj, checkpoint, input_dir, mode):
    """Write per-frame mask rasters and a manifest for a directory of frames."""
    from .harness.runs import predict_dir

    click.echo(predict_dir(checkpoint, input_dir, obj["out"], mode))


@main.command()
@click.option("--seeds", default=None, help="Comma-separated seeds (default: the config seed).")
@click.option("--rows", default=None, help="Comma-separated subset of ablation rows.")
@click.pass_obj
def ablate(obj, seeds, rows):
    """Train and evaluate the stage ablation rows."""
    from .harness.ablation import ROW_NAMES
    from .harness.runs import ablate as do
    from .harness.runs import summarize_ablation

    seed_list = [int(s) for s in seeds.split(",")] if seeds else None
    row_list = tuple(rows.split(",")) if rows else ROW_NAMES
    result = do(obj["cfg"], obj["out"], seed_list, row_list, _progress)
    for line in summarize_ablation(result):
        click.echo("\t".join(map(str, line)))


@main.command()
@click.pass_obj
def plot(obj):
    """Render loss, Dice and ablation figures for OUT."""
    from .harness.plots import emit_plots

    for p in emit_plots(obj["out"]):
        click.echo(p)


if __name__ == "__main__":
    main()
