#!/usr/bin/env python3
"""
myoreg command-line interface.

    myoreg phantom <outdir>                      synthetic cycle dataset
    myoreg sdf <mask> <out>                      signed distance field of a mask
    myoreg register <dataset> <outdir>           train one cycle (checkpoints + losses.csv)
    myoreg evaluate <dataset> <regdir>           DSC / HD95 / Jacobian / TRE tables
    myoreg warp <checkpoint> <volume> <out>      pull a source volume onto the target grid
    myoreg track <regdir> <landmarks> <out>      carry frame-0 landmarks through a cycle
    myoreg export-field <checkpoint> <outdir>    dense displacement field in mm
    myoreg experiment <dataset> <outdir>         alpha x mode grid, table.csv
    myoreg plot <csv>... --out fig.png           DSC curves and landmark tracks

Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
"""

import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
import numpy as np
from rich.markup import escape
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__, storage
from .config import RegConfig, RegistrationMode, build_reg_config
from .console import console, err_console, set_quiet
from .errors import EXIT_OK, EXIT_USAGE, ConfigError, MyoregError
from .experiment import DEFAULT_ALPHAS, evaluate_registrations, run_experiment, run_meta, summarize
from .figures import as_curve, save_figure
from .metrics import dsc_curve
from .objective import LossBreakdown
from .phantom import build_phantom_spec, generate
from .pipeline import PairRegistration, run_cycle, track_landmarks, warp_mask, warp_volume
from .sdf import signed_distance_field


class MyoregGroup(click.Group):
    """click group that turns library errors into exit codes and one red line."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.exceptions.Abort:
            err_console.print("[yellow]Operation interrupted by user.[/yellow]")
            code = EXIT_USAGE
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except MyoregError as e:
            err_console.print(f"[red]✗ {escape(str(e))}[/red]")
            code = e.exit_code
        if standalone_mode:
            sys.exit(code)
        return code


class CycleProgress:
    """Progress bars for a cycle run: one task per pair, advanced every epoch."""

    def __init__(self, pairs: int, after_pair: Optional[Callable[[PairRegistration], None]] = None):
        self.pairs = pairs
        self.after_pair = after_pair
        self.done = 0
        self.task = None
        self.progress = Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=console,
        )

    def __enter__(self) -> "CycleProgress":
        self.progress.start()
        return self

    def __exit__(self, *exc) -> None:
        self.progress.stop()

    def on_pair_start(self, source: int, target: int, epochs: int) -> None:
        self.task = self.progress.add_task(
            f"pair {source:02d}->{target:02d} ({self.done + 1}/{self.pairs})", total=epochs
        )

    def on_epoch(self, epoch: int, loss: LossBreakdown) -> None:
        self.progress.update(self.task, advance=1)

    def on_pair_done(self, reg: PairRegistration) -> None:
        if self.after_pair is not None:
            self.after_pair(reg)
        self.done += 1
        self.progress.update(self.task, description=f"[green]✓ pair {reg.label}[/green]")

    def callbacks(self) -> Dict[str, Any]:
        return {"on_pair_start": self.on_pair_start, "on_epoch": self.on_epoch, "on_pair_done": self.on_pair_done}


def registration_options(command):
    """Options shared by register and experiment; unset flags fall back to --config, then defaults."""
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="YAML file with registration settings"),
        click.option("--lambda", "lam", type=float, help="Jacobian regularizer weight (default 0.05)"),
        click.option("--tau", type=float, help="clip of the Jacobian penalty (default 10)"),
        click.option("--epochs-first", type=int, help="epochs of the first pair (default 2000)"),
        click.option("--epochs-rest", type=int, help="epochs of warm-started pairs (default 1000)"),
        click.option("--lr", "learning_rate", type=float, help="Adam learning rate (default 1e-5)"),
        click.option("--batch", "batch_size", type=int, help="points per epoch (default 10000)"),
        click.option("--hidden-layers", type=int, help="sine layers (default 5)"),
        click.option("--width", type=int, help="neurons per sine layer (default 256)"),
        click.option("--omega", type=float, help="sine modulation (default 30)"),
        click.option("--dilation-mm", type=float, help="sampling-mask dilation radius (default 10)"),
        click.option("--precision", type=click.Choice(["float32", "float64"]), help="training numeric width"),
        click.option("--seed", type=int, help="seed of initialization and sampling (default 0)"),
        click.option("--force", is_flag=True, help="Overwrite a non-empty output directory"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _print_config(cfg: RegConfig, title: str) -> None:
    lines = [
        f"mode: {RegistrationMode(cfg.mode).value}",
        f"alpha={cfg.alpha} lambda={cfg.lam} tau={cfg.tau}",
        f"epochs {cfg.epochs_first}/{cfg.epochs_rest}, batch {cfg.batch_size}, lr {cfg.learning_rate:g}",
        f"SIREN {cfg.hidden_layers}x{cfg.width}, omega={cfg.omega:g}, {cfg.precision}, seed {cfg.seed}",
    ]
    console.print(Panel("\n".join(lines), title=title, border_style="blue"))


def _metrics_table(table, title: str) -> Table:
    view = Table(title=title, show_header=True, header_style="bold magenta")
    view.add_column("Pair", style="cyan", no_wrap=True)
    view.add_column("Cycle %", justify="right")
    view.add_column("DSC %", style="green", justify="right")
    view.add_column("HD95 mm", style="yellow", justify="right")
    view.add_column("det<=0", justify="right")
    if "tre_mean" in table:
        view.add_column("TRE mm", style="yellow", justify="right")
    for row in table.itertuples(index=False):
        cells = [
            f"{row.source:02d}->{row.target:02d}",
            f"{row.percent:.0f}",
            f"{100 * row.dsc:.2f}",
            f"{row.hd95:.3f}",
            f"{row.neg_jac_fraction:.4f}",
        ]
        if "tre_mean" in table:
            cells.append(f"{row.tre_mean:.3f}")
        view.add_row(*cells)
    return view


@click.group(cls=MyoregGroup)
@click.version_option(__version__, prog_name="myoreg")
@click.option("--quiet", is_flag=True, help="Only print errors")
def cli(quiet: bool):
    """SDF-guided SIREN registration of cardiac cycles."""
    set_quiet(quiet)


@cli.command()
@click.argument("outdir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--spec", "spec_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON phantom spec; flags override its entries")
@click.option("--frames", type=int, help="Frames per cycle (default 20)")
@click.option("--dims", type=int, nargs=3, help="Voxels per axis (default 64 64 32)")
@click.option("--spacing", type=float, nargs=3, help="mm per voxel (default 1 1 2)")
@click.option("--amplitude", type=float, help="In-plane contraction amplitude A in [0, 1)")
@click.option("--twist-deg", type=float, help="Apex-to-base twist at peak contraction")
@click.option("--noise-sigma", type=float, help="Gaussian noise standard deviation")
@click.option("--texture-amplitude", type=float, help="Angular wall texture amplitude")
@click.option("--seed", type=int, help="Texture and noise seed")
@click.option(
    "--dilation-mm",
    type=click.FloatRange(min=0.0),
    default=10.0,
    show_default=True,
    help="Sampling-mask dilation radius",
)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def phantom(outdir: Path, spec_file: Optional[Path], dilation_mm: float, force: bool, **flags):
    """Write a synthetic beating-ventricle dataset to OUTDIR."""
    spec = build_phantom_spec(spec_file, flags)
    storage.prepare_output_dir(outdir, force)
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(f"Rendering {spec.frames} frames...", total=None)
        frames, track = generate(spec, dilation_mm)
        storage.write_dataset(outdir, frames, track, {"spec": spec.model_dump(mode="json"), "dilation_mm": dilation_mm})
    console.print(
        f"[green]✓ Wrote {spec.frames} frames, masks, SDFs and {len(track.names)} landmarks to {outdir}[/green]"
    )


@cli.command()
@click.argument("mask", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
def sdf(mask: Path, out: Path):
    """Signed distance field (mm, negative inside) of a binary MASK."""
    grid = storage.read_volume(mask)
    storage.write_volume(out, signed_distance_field(grid), np.float32)
    console.print(f"[green]✓ Wrote {out}[/green]")


@cli.command()
@click.argument("dataset", type=click.Path(file_okay=False, path_type=Path))
@click.argument("outdir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--mode", type=click.Choice([m.value for m in RegistrationMode]), help="Cycle schedule")
@click.option("--alpha", type=float, help="SDF weight in [0, 1] (default 0.8)")
@registration_options
def register(dataset: Path, outdir: Path, config_file: Optional[Path], force: bool, **overrides):
    """Register every pair of the cycle in DATASET; write checkpoints to OUTDIR."""
    cfg = build_reg_config(config_file, overrides)
    frames = storage.load_dataset(dataset, cfg.dilation_mm)
    storage.prepare_output_dir(outdir, force)
    _print_config(cfg, f"Registering {len(frames)} frames")

    def save(reg: PairRegistration) -> None:
        name = storage.checkpoint_name(reg.source_index, reg.target_index)
        storage.write_checkpoint(outdir / "checkpoints" / name, reg)

    with CycleProgress(len(frames) - 1, after_pair=save) as progress:
        registrations = run_cycle(frames, cfg, **progress.callbacks())

    storage.write_csv(outdir / storage.LOSSES, storage.loss_table(registrations), cfg.echo())
    storage.write_run(outdir, registrations, run_meta(cfg, registrations), write_checkpoints=False)

    summary = Table(title="Registration Summary", show_header=True, header_style="bold magenta")
    summary.add_column("Pair", style="cyan", no_wrap=True)
    summary.add_column("Epochs", justify="right")
    summary.add_column("Initial loss", justify="right")
    summary.add_column("Final loss", style="green", justify="right")
    summary.add_column("Seconds", style="yellow", justify="right")
    for reg in registrations:
        summary.add_row(
            reg.label,
            str(len(reg.loss_trace)),
            f"{reg.loss_trace[0, 0]:.5f}",
            f"{reg.loss_trace[-1, 0]:.5f}",
            f"{reg.train_seconds:.1f}",
        )
    console.print(summary)
    console.print(f"[green]✓ {len(registrations)} checkpoints written to {outdir / 'checkpoints'}[/green]")


@cli.command()
@click.argument("dataset", type=click.Path(file_okay=False, path_type=Path))
@click.argument("regdir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--landmarks", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Ground-truth landmark file for TRE")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Metrics CSV (default REGDIR/metrics.csv)")
@click.option("--samples", type=int, default=10_000, show_default=True, help="Points per Jacobian statistic")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the Jacobian sample points")
def evaluate(dataset: Path, regdir: Path, landmarks: Optional[Path], out: Optional[Path], samples: int, seed: int):
    """Score the registrations in REGDIR against the masks of DATASET."""
    registrations, meta = storage.load_run(regdir)
    config = meta.get("config", {})
    mode = RegistrationMode(meta["mode"])
    frames = storage.load_dataset(dataset, float(config.get("dilation_mm", 10.0)))
    reference = storage.read_landmarks(landmarks) if landmarks is not None else None

    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(f"Evaluating {len(registrations)} registrations...", total=None)
        table, errors = evaluate_registrations(frames, registrations, mode, reference, samples, seed)

    out = out or regdir / "metrics.csv"
    storage.write_csv(out, table, config)
    storage.write_csv(out.with_name("curve.csv"), dsc_curve([table]), config)
    if errors is not None:
        storage.write_csv(out.with_name("tre.csv"), errors, config)

    console.print(_metrics_table(table, f"Metrics ({mode.value})"))
    means = summarize(table)
    line = f"mean DSC {means['dsc_percent']:.2f}%, mean HD95 {means['hd95_mm']:.3f} mm"
    if errors is not None:
        line += f", mean TRE {means['tre_mm']:.3f} mm"
    console.print(f"[green]✓ {line}[/green]")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("volume", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--mask/--continuous", "as_mask", default=None,
              help="Threshold at 0.5 or keep intensities (default: masks are detected from {0,1} values)")
def warp(checkpoint: Path, volume: Path, out: Path, as_mask: Optional[bool]):
    """Pull VOLUME (source frame) back onto the target grid of CHECKPOINT."""
    reg = storage.read_checkpoint(checkpoint)
    grid = storage.read_volume(volume)
    if as_mask is None:
        as_mask = bool(np.isin(grid.values, (0.0, 1.0)).all())
    if as_mask:
        storage.write_volume(out, warp_mask(reg, grid), np.int16)
    else:
        storage.write_volume(out, warp_volume(reg, grid), np.float32)
    console.print(f"[green]✓ Warped {'mask' if as_mask else 'volume'} with {reg.label} -> {out}[/green]")


@cli.command()
@click.argument("regdir", type=click.Path(file_okay=False, path_type=Path))
@click.argument("landmarks", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--iters", type=int, default=50, show_default=True, help="Fixed-point iterations per inversion")
@click.option("--tol", type=float, default=1e-4, show_default=True, help="Inversion residual tolerance (mm)")
def track(regdir: Path, landmarks: Path, out: Path, iters: int, tol: float):
    """Carry the frame-0 points of LANDMARKS through the cycle in REGDIR."""
    registrations, meta = storage.load_run(regdir)
    mode = RegistrationMode(meta["mode"])
    reference = storage.read_landmarks(landmarks)
    tracked = track_landmarks(registrations, reference.points[0], mode, reference.names, iters, tol)
    storage.write_landmarks(out, tracked, mode)
    worst = float(np.max(tracked.residuals)) if tracked.residuals.size else 0.0
    console.print(
        f"[green]✓ Tracked {len(tracked.names)} landmarks over {tracked.frames} frames "
        f"(max residual {worst:.2e} mm) -> {out}[/green]"
    )


@cli.command("export-field")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("outdir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def export_field(checkpoint: Path, outdir: Path, force: bool):
    """Dense displacement field (mm) of CHECKPOINT on its target grid."""
    reg = storage.read_checkpoint(checkpoint)
    storage.prepare_output_dir(outdir, force)
    storage.write_field(outdir, reg)
    console.print(f"[green]✓ Wrote ux/uy/uz and field.json for {reg.label} to {outdir}[/green]")


def _float_list(ctx, param, value: Optional[str]) -> Optional[List[float]]:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None


def _mode_list(ctx, param, value: Optional[str]) -> Optional[List[RegistrationMode]]:
    if value is None:
        return None
    try:
        return [RegistrationMode(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"modes must be sequential and/or nonsequential, got {value!r}") from None


@cli.command()
@click.argument("dataset", type=click.Path(file_okay=False, path_type=Path))
@click.argument("outdir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--alphas", callback=_float_list, help="Comma-separated alpha values (default 0,0.8,1)")
@click.option("--modes", callback=_mode_list, help="Comma-separated modes (default both)")
@registration_options
def experiment(
    dataset: Path,
    outdir: Path,
    alphas: Optional[Sequence[float]],
    modes: Optional[Sequence[RegistrationMode]],
    config_file: Optional[Path],
    force: bool,
    **overrides,
):
    """Run and score the cycle for every alpha and mode; write OUTDIR/table.csv."""
    cfg = build_reg_config(config_file, overrides)
    alphas = alphas or list(DEFAULT_ALPHAS)
    modes = modes or list(RegistrationMode)
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alphas: {alpha} is outside [0, 1]")
    frames = storage.load_dataset(dataset, cfg.dilation_mm)
    landmark_file = dataset / storage.LANDMARKS
    reference = storage.read_landmarks(landmark_file) if landmark_file.exists() else None
    storage.prepare_output_dir(outdir, force)

    def announce(mode: RegistrationMode, alpha: float) -> None:
        progress.done = 0
        console.print(f"\n[bold cyan]Run: {mode.value}, alpha={alpha:g}[/bold cyan]")

    with CycleProgress(len(frames) - 1) as progress:
        table = run_experiment(
            frames, cfg, outdir, alphas, modes, reference, on_run_start=announce, **progress.callbacks()
        )

    view = Table(title="Experiment Summary", show_header=True, header_style="bold magenta")
    view.add_column("Mode", style="cyan")
    view.add_column("alpha", justify="right")
    view.add_column("DSC %", style="green", justify="right")
    view.add_column("HD95 mm", style="yellow", justify="right")
    view.add_column("TRE mm", style="yellow", justify="right")
    for row in table.itertuples(index=False):
        view.add_row(row.mode, f"{row.alpha:g}", f"{row.dsc_percent:.2f}", f"{row.hd95_mm:.3f}", f"{row.tre_mm:.3f}")
    console.print(view)
    console.print(f"[green]✓ Wrote {outdir / 'table.csv'}[/green]")


@cli.command()
@click.argument("tables", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Output image (png, pdf, svg)"
)
@click.option("--tracks", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Tracked landmark file")
def plot(tables: Sequence[Path], out: Path, tracks: Optional[Path]):
    """DSC over the cycle from metrics or curve CSVs, optionally with landmark tracks."""
    curves = [as_curve(storage.read_csv(path), str(path)) for path in tables]
    labels = [path.parent.name or path.stem for path in tables]
    landmark_track = storage.read_landmarks(tracks) if tracks is not None else None
    save_figure(out, curves, labels, landmark_track)
    console.print(f"[green]✓ Wrote {out}[/green]")


def main():
    cli(prog_name="myoreg")


if __name__ == "__main__":
    main()
