"""Command-line interface: ``cacscore <command> [options]``.

Exit status is 0 on success, 1 when a computation fails (localisation,
divergence, non-finite values) and 2 for usage or input errors. Each
command writes a run manifest with input and output hashes next to its
output.
"""
from __future__ import annotations

import functools
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .ctvol import (CLINICAL_MIN_SLICES, PHANTOM_MIN_SLICES, BoundingBox, CtVolError, OversizeError, load_volume,
                    validate_for_scoring)
from .metrics import DegenerateAgreementError, agreement, evaluation_table_csv, EVAL_FIELDS
from .phantom import PhantomSpec, PlacementError, generate_cohort, load_manifest, split_sizes
from .refscore import read_report_csv, reports_to_csv, reports_to_json, score_volume
from .tensornet.checkpoint import CheckpointError, ModelCheckpoint
from .tensornet.layers import NonFiniteError

EXIT_FAILURE = 1
EXIT_USAGE = 2

_DEFAULT_SPEC = PhantomSpec()


# -- plumbing -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            if q.name.endswith(".run.json") or q.name == "run.json" or ".timing." in q.name:
                continue
            out[str(q)] = sha256_file(q)
    return out


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_run_manifest(where, command: str, config: dict, seeds: dict, inputs, outputs, timings: dict) -> Path:
    """Record a run. ``where`` is the output file (manifest goes beside it) or directory."""
    where = Path(where)
    path = where / "run.json" if where.is_dir() else where.with_name(where.name + ".run.json")
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "input_hashes": _hash_tree(inputs),
        "output_hashes": _hash_tree(outputs),
        "timings_seconds": timings,
    }
    write_text_atomic(path, json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Map library exceptions onto exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .pipeline.locator import LocalizationError
        from .pipeline.training import TrainingDivergedError

        try:
            return fn(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except (LocalizationError, TrainingDivergedError, NonFiniteError, PlacementError,
                DegenerateAgreementError) as exc:
            _fail(EXIT_FAILURE, str(exc))
        except (CtVolError, CheckpointError, OversizeError, FileNotFoundError, KeyError, ValueError) as exc:
            _fail(EXIT_USAGE, str(exc))
        except (RuntimeError, ArithmeticError) as exc:
            _fail(EXIT_FAILURE, str(exc))

    return wrapper


def int_tuple(n: int | None = None):
    def convert(ctx, param, value):
        if value is None or isinstance(value, tuple):
            return value
        try:
            out = tuple(int(v) for v in str(value).split(","))
        except ValueError:
            raise click.BadParameter("expected comma-separated integers") from None
        if n is not None and len(out) != n:
            raise click.BadParameter(f"expected {n} comma-separated integers")
        return out

    return convert


def float_tuple(n: int):
    def convert(ctx, param, value):
        if value is None or isinstance(value, tuple):
            return value
        try:
            out = tuple(float(v) for v in str(value).split(","))
        except ValueError:
            raise click.BadParameter("expected comma-separated numbers") from None
        if len(out) != n or not all(v > 0 for v in out):
            raise click.BadParameter(f"expected {n} positive comma-separated numbers")
        return out

    return convert


def _subjects_from(manifest, file, split):
    """``[(subject_id, volume, true box or None)]`` from a manifest or a single file."""
    if (manifest is None) == (file is None):
        raise click.UsageError("give exactly one of --manifest or --file")
    if file is not None:
        return [(None, load_volume(file), None)]
    entries, root = load_manifest(manifest)
    if split != "all":
        entries = [e for e in entries if e.get("split") == split]
    entries = sorted(entries, key=lambda e: e["subject_id"])
    return [(e["subject_id"], load_volume(root / e["file"]), BoundingBox.from_json(e["heart_box"]))
            for e in entries]


def _screen(subjects, min_slices, from_manifest):
    """Drop volumes failing the scoring exclusion rules; returns (kept, floor, exclusions)."""
    if min_slices is None:
        min_slices = PHANTOM_MIN_SLICES if from_manifest else CLINICAL_MIN_SLICES
    kept, excluded = [], []
    for sid, vol, box in subjects:
        verdict = validate_for_scoring(vol, min_slices)
        if verdict.accepted:
            kept.append((sid, vol, box))
        else:
            excluded.append({"subject_id": vol.subject_id, "reason": verdict.reason})
            click.echo(f"excluded {vol.subject_id}: {verdict.reason}", err=True)
    return kept, min_slices, excluded


def _box_for(mode, vol, true_box, locator):
    if mode == "full":
        return BoundingBox.full(vol)
    if mode == "true":
        if true_box is None:
            raise click.UsageError("--box true needs a phantom manifest with true heart boxes")
        return true_box
    return locator.predict(vol)


def _load_locator(box_mode, locator_dir):
    if box_mode != "locator":
        return None
    if locator_dir is None:
        raise click.UsageError("--box locator needs --locator DIR")
    from .pipeline.locator import HeartLocator

    return HeartLocator.load(locator_dir)


def _emit_reports(reports, out, as_json):
    text = reports_to_json(reports) if as_json else reports_to_csv(reports)
    if out is None:
        click.echo(text, nl=False)
    else:
        write_text_atomic(out, text)


# -- commands -------------------------------------------------------------------


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON file of per-command option defaults, e.g. {\"phantom\": {\"count\": 10}}.")
@click.pass_context
def main(ctx, config_file):
    """Coronary calcium scoring: phantoms, reference scores and ConvNet regression."""
    if config_file:
        try:
            defaults = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as exc:
            raise click.BadParameter(f"config is not valid JSON: {exc}", param_hint="--config") from None
        if not isinstance(defaults, dict):
            raise click.BadParameter("config must be a JSON object", param_hint="--config")
        ctx.default_map = defaults


@main.command()
@click.option("--count", type=click.IntRange(min=1), required=True, help="Number of subjects.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dims", callback=int_tuple(3), default=None, help="Volume size X,Y,Z in voxels.")
@click.option("--spacing", callback=float_tuple(3), default=None, help="Voxel size X,Y,Z in mm.")
@click.option("--lesions", callback=int_tuple(2), default=None, help="Lesion count range LO,HI.")
@click.option("--distractors", callback=int_tuple(2), default=None, help="Extra-cardiac calcium count range LO,HI.")
@click.option("--zero-fraction", type=click.FloatRange(0, 1), default=None,
              help="Fraction of subjects without coronary calcium.")
@click.option("--realism", is_flag=True, help="Untruncated background noise (breaks the exact ledger).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handle_errors
def phantom(count, seed, dims, spacing, lesions, distractors, zero_fraction, realism, out):
    """Generate a seeded phantom cohort with a ground-truth manifest."""
    t0 = time.perf_counter()
    kw = {"seed": seed}
    if dims or spacing:
        d = dims or _DEFAULT_SPEC.dims
        s = spacing or _DEFAULT_SPEC.spacing_mm
        # keep the heart at the same relative position
        old = [n * v for n, v in zip(_DEFAULT_SPEC.dims, _DEFAULT_SPEC.spacing_mm)]
        new = [n * v for n, v in zip(d, s)]
        kw.update(dims=d, spacing_mm=s,
                  heart_center=tuple(c * b / a for c, a, b in zip(_DEFAULT_SPEC.heart_center, old, new)))
    if lesions:
        kw["lesion_count_range"] = lesions
    if distractors:
        kw["distractor_count_range"] = distractors
    if zero_fraction is not None:
        kw["zero_lesion_fraction"] = zero_fraction
    if realism:
        kw["truncate_noise"] = False
    spec = PhantomSpec(**kw)
    generate_cohort(spec, count, out)
    sizes = dict(zip(("train", "validation", "test"), split_sizes(count)))
    click.echo(f"wrote {count} subjects to {out} (splits {sizes})")
    write_run_manifest(out, "phantom", spec.to_json(), {"seed": seed}, [], [out],
                       {"total": time.perf_counter() - t0})


BOX_CHOICE = click.Choice(["true", "locator", "full"])


@main.command()
@click.option("--manifest", type=click.Path(exists=True), help="Phantom cohort (directory or manifest.json).")
@click.option("--file", "file", type=click.Path(exists=True, dir_okay=False), help="A single CTVOL file.")
@click.option("--split", type=click.Choice(["all", "train", "validation", "test"]), default="all", show_default=True)
@click.option("--box", "box_mode", type=BOX_CHOICE, default="true", show_default=True)
@click.option("--locator", "locator_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Report file (stdout when omitted).")
@click.option("--min-slices", type=click.IntRange(min=1), default=None,
              help=f"Slice-count floor for exclusion (default {PHANTOM_MIN_SLICES} for cohorts, "
                   f"{CLINICAL_MIN_SLICES} for single files).")
@click.option("--json", "as_json", is_flag=True, help="JSON instead of CSV.")
@handle_errors
def score(manifest, file, split, box_mode, locator_dir, min_slices, out, as_json):
    """Reference Agatston and volume scores."""
    t0 = time.perf_counter()
    if file is not None and box_mode == "true":
        box_mode = "full"  # a lone file carries no heart box
    locator = _load_locator(box_mode, locator_dir)
    reports = []
    subjects, floor, excluded = _screen(_subjects_from(manifest, file, split), min_slices, manifest is not None)
    for sid, vol, true_box in subjects:
        rep = score_volume(vol, _box_for(box_mode, vol, true_box, locator))
        rep.extra["box_mode"] = box_mode
        reports.append(rep)
    _emit_reports(reports, out, as_json)
    if out:
        write_run_manifest(out, "score", {"box": box_mode, "split": split, "json": as_json, "min_slices": floor,
                                          "excluded": excluded}, {},
                           [p for p in (manifest, file, locator_dir) if p], [out],
                           {"total": time.perf_counter() - t0})


@main.command()
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--experiment", type=click.Choice(["i", "ii", "iii", "iv"]), default="i", show_default=True)
@click.option("--target", type=click.Choice(["agatston", "volume"]), default="agatston", show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--input-size", type=click.IntRange(min=64), default=64, show_default=True)
@click.option("--channels", callback=int_tuple(6), default=None, help="Six conv widths, e.g. 8,16,16,32,32,32.")
@click.option("--precision", type=click.Choice(["float32", "float64"]), default="float64", show_default=True,
              help="Compute precision; float32 trains about twice as fast.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint file.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="Per-epoch CSV (default: OUT.log.csv).")
@handle_errors
def train(manifest, experiment, target, epochs, batch_size, seed, input_size, channels, precision, out, log_path):
    """Train the slice regressor for one experiment."""
    from .pipeline.train import ExperimentVariant, TrainConfig, train_regressor

    t0 = time.perf_counter()
    variant = ExperimentVariant.parse(experiment, target)
    config = TrainConfig(epochs=epochs, batch_size=batch_size, input_size=input_size, seed=seed,
                         conv_channels=channels, dtype=precision)
    log_path = log_path or f"{out}.log.csv"

    def progress(row):
        click.echo(f"epoch {row['epoch']:3d}  train {row['train_mae']:.4f}  val {row['val_mae']:.4f}", err=True)

    ckpt = train_regressor(manifest, variant, config, log_path=log_path, on_epoch=progress)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    click.echo(f"best epoch {ckpt.metadata['best_epoch']} (validation MAE {ckpt.metadata['validation_mae']:.4f}); "
               f"{ckpt.n_params} parameters")
    write_run_manifest(out, "train", {"variant": experiment, "target": target, **config.to_json()},
                       {"seed": seed}, [manifest], [out], {"total": time.perf_counter() - t0})


@main.command("train-locator")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--precision", type=click.Choice(["float32", "float64"]), default="float64", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Directory for the three classifiers.")
@handle_errors
def train_locator_cmd(manifest, epochs, seed, precision, out):
    """Train the axial, coronal and sagittal heart classifiers."""
    from .pipeline.train import LocatorConfig, train_locator

    t0 = time.perf_counter()
    config = LocatorConfig(epochs=epochs, seed=seed, dtype=precision)
    loc = train_locator(manifest, config)
    loc.save(out)
    acc = {a: round(c.validation_accuracy_, 4) for a, c in loc.classifiers_.items()}
    click.echo(f"validation slice accuracy {acc}")
    write_run_manifest(out, "train-locator", config.to_json(), {"seed": seed}, [manifest], [out],
                       {"total": time.perf_counter() - t0})


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(exists=True))
@click.option("--file", "file", type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["all", "train", "validation", "test"]), default="test", show_default=True)
@click.option("--box", "box_mode", type=BOX_CHOICE, default="locator", show_default=True)
@click.option("--locator", "locator_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Report file (stdout when omitted).")
@click.option("--min-slices", type=click.IntRange(min=1), default=None,
              help=f"Slice-count floor for exclusion (default {PHANTOM_MIN_SLICES} for cohorts, "
                   f"{CLINICAL_MIN_SLICES} for single files).")
@click.option("--json", "as_json", is_flag=True)
@handle_errors
def predict(checkpoint, manifest, file, split, box_mode, locator_dir, min_slices, out, as_json):
    """Predict subject scores; prints per-subject wall-clock seconds."""
    from .pipeline.train import predict_subject, regressor_from

    t0 = time.perf_counter()
    ckpt = ModelCheckpoint.load(checkpoint)
    if ckpt.metadata.get("kind") != "regressor":
        raise click.UsageError("--checkpoint must be a regressor checkpoint")
    model, window = regressor_from(ckpt)
    locator = _load_locator(box_mode, locator_dir)
    reports, timing = [], ["subject_id,localization_seconds,inference_seconds,wall_seconds"]
    subjects, floor, excluded = _screen(_subjects_from(manifest, file, split), min_slices, manifest is not None)
    for sid, vol, true_box in subjects:
        box = None if box_mode == "locator" else _box_for(box_mode, vol, true_box, locator)
        rep = predict_subject(vol, model, locator=locator, box=box, window=window)
        reports.append(rep)
        e = rep.extra
        click.echo(f"{rep.subject_id}\t{e['wall_seconds']:.3f} s", err=True)
        timing.append(f"{rep.subject_id},{e['localization_seconds']!r},{e['inference_seconds']!r},"
                      f"{e['wall_seconds']!r}")
    if out:
        for rep in reports:
            for k in ("localization_seconds", "inference_seconds", "wall_seconds"):
                rep.extra.pop(k)
        _emit_reports(reports, out, as_json)
        timing_path = Path(out).with_name(Path(out).name + ".timing.csv")
        write_text_atomic(timing_path, "\n".join(timing) + "\n")
        write_run_manifest(out, "predict", {"box": box_mode, "split": split,
                                            "experiment": ckpt.metadata.get("experiment"),
                                            "target": ckpt.metadata.get("target_kind"),
                                            "min_slices": floor, "excluded": excluded}, {},
                           [p for p in (checkpoint, manifest, file, locator_dir) if p], [out],
                           {"total": time.perf_counter() - t0})
    else:
        _emit_reports(reports, None, as_json)


def _score_column(target: str) -> str:
    return "agatston" if target == "agatston" else "volume_mm3"


@main.command("eval")
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Reference score CSV from `score`.")
@click.option("--pred", "preds", type=(click.Choice(["i", "ii", "iii", "iv"]), click.Choice(["agatston", "volume"]),
                                       click.Path(exists=True, dir_okay=False)),
              multiple=True, required=True, help="VARIANT TARGET CSV; repeat per experiment.")
@click.option("--out", type=click.Path(dir_okay=False), help="Evaluation table (stdout when omitted).")
@click.option("--json", "as_json", is_flag=True)
@handle_errors
def evaluate(reference, preds, out, as_json):
    """Agreement table (ICC, kappa, accuracy, MAE) of predicted against reference scores."""
    t0 = time.perf_counter()
    ref = {r["subject_id"]: r for r in read_report_csv(reference)}
    rows = []
    for variant, target, path in preds:
        col = _score_column(target)
        pred = read_report_csv(path)
        missing = [p["subject_id"] for p in pred if p["subject_id"] not in ref]
        if missing:
            raise ValueError(f"{path}: subjects missing from the reference: {missing[:3]}")
        a = np.array([ref[p["subject_id"]][col] for p in pred])
        b = np.array([p[col] for p in pred])
        if np.any(np.isnan(a)) or np.any(np.isnan(b)):
            raise ValueError(f"{path}: no {target} scores to compare")
        rows.append((variant, target, agreement(a, b, categorical=target == "agatston")))
    if as_json:
        text = json.dumps([dict(zip(EVAL_FIELDS, (v, t, s.icc, *s.icc_ci95, s.kappa_linear, s.accuracy, s.mae)))
                           for v, t, s in rows], indent=1, sort_keys=True)
    else:
        text = evaluation_table_csv(rows)
    if out:
        write_text_atomic(out, text)
        write_run_manifest(out, "eval", {"preds": [list(p) for p in preds], "json": as_json}, {},
                           [reference, *[p[2] for p in preds]], [out], {"total": time.perf_counter() - t0})
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--file", "file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--box", "box_spec", default="full", show_default=True,
              help="'full', or X0,Y0,Z0,X1,Y1,Z1 (half-open voxel box).")
@click.option("--slices", "which", type=click.Choice(["calcified", "all"]), default="calcified", show_default=True,
              help="Slices with reference calcium only, or every slice in the box.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handle_errors
def saliency(checkpoint, file, box_spec, which, out):
    """Write saliency overlays (PNG) for slices of one volume."""
    from .pipeline.regressor import CalciumRegressor
    from .pipeline.saliency import SALIENCY_METHOD, overlay_png, saliency_maps
    from .pipeline.slices import prepare_slices

    t0 = time.perf_counter()
    vol = load_volume(file)
    if box_spec == "full":
        box = BoundingBox.full(vol)
    else:
        c = int_tuple(6)(None, None, box_spec)
        box = BoundingBox.make(c[:3], c[3:])
    ckpt = ModelCheckpoint.load(checkpoint)
    model = CalciumRegressor.from_checkpoint(ckpt)
    window = tuple(ckpt.metadata.get("window", (-1024, 3071)))
    batch = prepare_slices(vol, box, model.input_size, target_kind="agatston", window=window)
    keep = np.arange(len(batch)) if which == "all" else np.flatnonzero(batch.raw_targets > 0)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if len(keep):
        maps = saliency_maps(model.net_, batch.images[keep], batch.spacing[keep].astype(model.net_.dtype))
        for m, k in zip(maps, keep):
            path = outdir / f"{vol.subject_id or 'volume'}_z{int(batch.z[k]):03d}.png"
            overlay_png(batch.images[k], m, path)
            written.append(path.name)
    meta = {"method": SALIENCY_METHOD, "box": box.to_json(), "slices": written, "checkpoint": str(checkpoint)}
    write_text_atomic(outdir / "saliency.json", json.dumps(meta, indent=1, sort_keys=True))
    click.echo(f"wrote {len(written)} overlays to {outdir}")
    write_run_manifest(outdir, "saliency", {"box": box.to_json(), "slices": which}, {}, [checkpoint, file],
                       [outdir], {"total": time.perf_counter() - t0})


if __name__ == "__main__":  # pragma: no cover
    main()
