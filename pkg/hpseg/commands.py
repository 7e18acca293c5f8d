"""hpseg command line: phantom, train, infer, eval, curate, ablate."""
import dataclasses
import json
from contextlib import contextmanager
from pathlib import Path

import click
import torch

from . import __version__
from .ablation import ROWS, AblationConfig, run_ablation
from .config import read_config_file, resolve, write_resolved
from .curate import CurateConfig, curate_studies, read_manifest
from .errors import ConfigError, HPSegError, VolumeFormatError, handle_error, logger
from .hierarchy import ALL_FORMATS, MASK_NAMES, TargetFormat
from .inference import infer
from .metrics import MetricsConfig, evaluate, summarize
from .network import load_checkpoint
from .phantom import PhantomSpec, as_format, format_masks, generate, label_masks
from .pipeline import CatalogEntry, CTVolume, load_catalog, write_catalog
from .trainer import MODES, TrainConfig, records_from_catalog, train
from .volume_io import read_volume, write_volume

SECTIONS = ("phantom", "train", "infer", "eval", "curate", "ablate")
FORMAT_VALUES = tuple(f.value for f in ALL_FORMATS)
FORMAT_CHOICE = click.Choice(FORMAT_VALUES, case_sensitive=False)
FORMAT_MASKS = {
    TargetFormat.LUNG: ("lung",),
    TargetFormat.LESION: ("lesion",),
    TargetFormat.SEPARATION: ("healthy", "ggo", "consolidation"),
    TargetFormat.AIRWAY: ("airway",),
    TargetFormat.VESSEL: ("vessel",),
}


@contextmanager
def reported_errors():
    """Turn library failures into a structured error and exit status 1."""
    try:
        yield
    except HPSegError as e:
        handle_error(e, kind=e.kind)
    except OSError as e:
        handle_error(f"I/O error: {e}", kind="io-error")


def file_section(ctx, name):
    path = ctx.obj['config']
    if not path:
        return {}
    data = read_config_file(path)
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}")
    return data.get(name, {})


def echo_config(ctx, command, config):
    """Write the fully resolved configuration before any work starts."""
    globals_ = {k: ctx.obj[k] for k in ('config', 'seed', 'out', 'format', 'threads')}
    return write_resolved({"command": command, "global": globals_, command: config}, ctx.obj['out'])


def selected_format(ctx):
    value = ctx.obj['format']
    return TargetFormat.parse(value) if value else None


@click.group()
@click.version_option(version=__version__)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run configuration file (.toml or .json).')
@click.option('--seed', type=click.IntRange(min=0), default=None,
              help='Seed overriding the configuration file.')
@click.option('--out', default='out', show_default=True, type=click.Path(file_okay=False),
              help='Output directory.')
@click.option('--format', 'target_format', type=FORMAT_CHOICE, default=None,
              help='Restrict the command to one target format.')
@click.option('--threads', type=click.IntRange(min=1), default=None, envvar='HPSEG_THREADS',
              show_envvar=True, help='CPU threads for torch.')
@click.pass_context
def hpseg(ctx, config_path, seed, out, target_format, threads):
    """Hierarchical partially labeled lung segmentation toolkit."""
    ctx.ensure_object(dict)
    ctx.obj['config'] = config_path
    ctx.obj['seed'] = seed
    ctx.obj['out'] = out
    ctx.obj['format'] = target_format
    ctx.obj['threads'] = threads
    if threads:
        torch.set_num_threads(threads)
        logger.debug(f"Using {threads} torch threads")


@hpseg.command()
@click.option('--count', type=click.IntRange(min=1), default=8, show_default=True,
              help='Number of phantoms to generate.')
@click.pass_context
def phantom(ctx, count):
    """Generate synthetic phantoms, their partial annotations and a catalog."""
    with reported_errors():
        spec = resolve(PhantomSpec, file_section(ctx, "phantom"), {"seed": ctx.obj['seed']})
        echo_config(ctx, "phantom", {"count": count, "spec": spec})
        fmt = selected_format(ctx)
        formats = [fmt] if fmt else list(ALL_FORMATS)
        out = Path(ctx.obj['out'])

        entries = []
        for i in range(count):
            ph = generate(dataclasses.replace(spec, seed=spec.seed + i))
            name = f"phantom_{i:03d}"
            ct_rel = f"{name}/ct.rvol"
            write_volume(out / ct_rel, ph.ct, ph.spacing, kind="ct")
            write_volume(out / name / "truth.rvol", ph.truth, ph.spacing, kind="labels", format_tag="silver")
            truth_slices = tuple(int(z) for z in range(ph.truth.shape[0]) if ph.truth[z].any())
            entries.append(CatalogEntry(f"{name}/truth.rvol", "silver", truth_slices, ct_rel))
            for f in formats:
                vol = as_format(ph, f)
                write_volume(out / name / f"{f.value}.rvol", vol.labels, ph.spacing, kind="labels",
                             format_tag=f.value)
                entries.append(CatalogEntry(f"{name}/{f.value}.rvol", f.value,
                                            tuple(vol.annotated_slices()), ct_rel))
        catalog = write_catalog(entries, out / "catalog.json")
        click.echo(f"Generated {count} phantoms; catalog at {catalog}")


@hpseg.command(name='train')
@click.option('--catalog', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Training catalog manifest.')
@click.option('--val-catalog', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Validation catalog; defaults to the training volumes.')
@click.option('--mode', type=click.Choice(MODES), default=None, help='Training mode.')
@click.option('--epochs', type=click.IntRange(min=1), default=None, help='Epoch budget.')
@click.pass_context
def train_command(ctx, catalog, val_catalog, mode, epochs):
    """Train the network (gold or silver-pretrain mode)."""
    with reported_errors():
        seed = ctx.obj['seed']
        overrides = {"seed": seed, "mode": mode, "epochs": epochs,
                     "model": {"seed": seed} if seed is not None else None}
        fmt = selected_format(ctx)
        if fmt:
            overrides["formats"] = [fmt.value]
        cfg = resolve(TrainConfig, file_section(ctx, "train"), overrides)
        echo_config(ctx, "train", cfg)

        crop = {"crop_lung": cfg.crop_lung, "patch_size": cfg.model.patch_size}
        records = records_from_catalog(load_catalog(catalog), **crop)
        val_records = records_from_catalog(load_catalog(val_catalog), **crop) if val_catalog else None
        result = train(cfg, records, ctx.obj['out'], val_records)
        click.echo(f"Checkpoint: {result.checkpoint} (best epoch {result.best_epoch})")
        click.echo(f"Log: {result.log}")


@hpseg.command(name='infer')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--volume', 'volume_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='CT volume in RVOL format.')
@click.pass_context
def infer_command(ctx, checkpoint, volume_path):
    """Predict the seven masks and the combined six-class volume."""
    with reported_errors():
        echo_config(ctx, "infer", {"checkpoint": checkpoint, "volume": volume_path})
        data, header = read_volume(volume_path)
        if header.kind != "ct":
            raise VolumeFormatError(f"{volume_path} holds '{header.kind}', expected a CT volume")
        model, _ = load_checkpoint(checkpoint)
        paths = infer(model, CTVolume(data, header.spacing), ctx.obj['out'])
        for name, path in paths.items():
            click.echo(f"{name}: {path}")


def load_masks(path):
    """Masks and spacing from a mask directory, a single-mask file or a six-class file."""
    path = Path(path)
    if path.is_dir():
        masks, spacing = {}, None
        for name in MASK_NAMES:
            candidate = path / f"{name}.rvol"
            if candidate.exists():
                data, header = read_volume(candidate)
                masks[name], spacing = data > 0, header.spacing
        if not masks:
            combined = path / "combined.rvol"
            if combined.exists():
                return load_masks(combined)
            raise VolumeFormatError(f"No mask volumes found in {path}")
        return masks, spacing

    data, header = read_volume(path)
    if header.kind != "labels":
        raise VolumeFormatError(f"{path} is not a label volume")
    tag = header.format
    if tag.startswith("mask:") and tag[5:] in MASK_NAMES:
        return {tag[5:]: data > 0}, header.spacing
    if tag in FORMAT_VALUES:
        return format_masks(data, TargetFormat(tag)), header.spacing
    return label_masks(data), header.spacing


@hpseg.command(name='eval')
@click.option('--pred', required=True, type=click.Path(exists=True), help='Predicted masks.')
@click.option('--truth', required=True, type=click.Path(exists=True), help='Reference masks.')
@click.option('--slicewise', is_flag=True, default=False, help='Add slice-wise Dice.')
@click.option('--branch-fraction', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--min-branch-length', type=click.FloatRange(min=0.0), default=None)
@click.pass_context
def eval_command(ctx, pred, truth, slicewise, branch_fraction, min_branch_length):
    """Score predicted masks against the reference."""
    with reported_errors():
        overrides = {"branch_fraction": branch_fraction, "min_branch_length": min_branch_length,
                     "slicewise": True if slicewise else None}
        cfg = resolve(MetricsConfig, file_section(ctx, "eval"), overrides)
        echo_config(ctx, "eval", {"pred": pred, "truth": truth, "metrics": cfg})

        pred_masks, _ = load_masks(pred)
        truth_masks, spacing = load_masks(truth)
        fmt = selected_format(ctx)
        if fmt:
            truth_masks = {k: v for k, v in truth_masks.items() if k in FORMAT_MASKS[fmt]}
        reports = evaluate(pred_masks, truth_masks, spacing, cfg, volume=Path(pred).name)
        if not reports:
            raise VolumeFormatError("Prediction and reference share no targets")

        out = Path(ctx.obj['out'])
        with open(out / "report.jsonl", "w", encoding="utf-8") as f:
            for report in reports:
                f.write(json.dumps(report.to_json(), sort_keys=True) + "\n")
        summarize(reports).to_csv(out / "summary.csv", index=False)
        for report in reports:
            click.echo(f"{report.target}: dice={report.dice:.4f}")


@hpseg.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Series metadata manifest (CSV or JSON).')
@click.option('--kernel-table', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--exclude', multiple=True, help='Description pattern to drop (repeatable).')
@click.pass_context
def curate(ctx, manifest, kernel_table, exclude):
    """Select one series per study."""
    with reported_errors():
        overrides = {"kernel_table": kernel_table, "exclude_patterns": list(exclude) or None}
        cfg = resolve(CurateConfig, file_section(ctx, "curate"), overrides)
        echo_config(ctx, "curate", cfg)

        records, errors = read_manifest(manifest)
        selections = curate_studies(records, cfg.table(), cfg.exclude_patterns)
        out = Path(ctx.obj['out'])
        with open(out / "selections.jsonl", "w", encoding="utf-8") as f:
            for selection in selections:
                line = selection.to_json()
                f.write(line + "\n")
                click.echo(line)
        if errors:
            with open(out / "row_errors.jsonl", "w", encoding="utf-8") as f:
                for err in errors:
                    f.write(json.dumps(dataclasses.asdict(err)) + "\n")
            click.echo(f"{len(errors)} manifest rows skipped", err=True)


@hpseg.command()
@click.option('--rows', multiple=True, type=click.Choice(list(ROWS)), help='Configurations to run.')
@click.pass_context
def ablate(ctx, rows):
    """Run the training-configuration ablation matrix."""
    with reported_errors():
        overrides = {"seed": ctx.obj['seed'], "rows": list(rows) or None}
        cfg = resolve(AblationConfig, file_section(ctx, "ablate"), overrides)
        echo_config(ctx, "ablate", cfg)
        summary = run_ablation(cfg, ctx.obj['out'])
        click.echo(summary.to_string(index=False))


if __name__ == '__main__':
    hpseg()
