"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from . import report as rp
from .backbone import BackboneConfig
from .data import (
    CocoParseError,
    SyntheticConfig,
    cluster_anchors,
    filter_dataset,
    generate_synthetic,
    parse_coco,
    size_histogram,
    to_coco_dict,
)
from .gradcheck import gradcheck_suite
from .tensor import NonFiniteError
from .train import AttentionDetector, TrainConfig, TrainingDiverged, inspect_weights, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class NumericalFailure(click.ClickException):
    exit_code = EXIT_NUMERIC


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _load_coco(path):
    try:
        return parse_coco(path)
    except (OSError, CocoParseError) as exc:
        raise DataError(str(exc)) from exc


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Multiresolution attention fusion experiments."""


@cli.command("filter-coco")
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--max-area", default=1024, show_default=True, type=int, help="keep boxes with w*h strictly below this")
@click.option("--histogram-bin", default=4.0, show_default=True, help="bin width (px) for the size histogram CSV/figure")
def filter_coco(in_path, out_path, max_area, histogram_bin):
    """Write the small-object subset of a COCO instances file."""
    started = rp.now()
    ds = _load_coco(in_path)
    subset = filter_dataset(ds, max_area)
    out = Path(out_path)
    rp.write_json(out, to_coco_dict(subset))
    hist_csv = out.with_suffix(".sizes.csv")
    hist_png = out.with_suffix(".sizes.png")
    rows = size_histogram(subset.annotations, histogram_bin, max_size=max(32.0, histogram_bin))
    rp.write_csv(hist_csv, ("w_bin", "h_bin", "count"), rows)
    rp.plot_size_histogram(rows, histogram_bin, hist_png)
    rp.write_json(
        _manifest_path(out),
        rp.manifest("filter-coco", {"in": in_path, "max_area": max_area, "histogram_bin": histogram_bin}, None,
                    [out, hist_csv, hist_png], started),
    )
    dropped = len(ds.annotations) - len(subset.annotations)
    click.echo(f"retained {len(subset.annotations)} / dropped {dropped} annotations; "
               f"{len(subset.images)} of {len(ds.images)} images kept")


@cli.command("cluster-anchors")
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="JSON path; a CSV is written next to it")
@click.option("--scales", default=4, show_default=True)
@click.option("--ratios", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cluster_anchors_cmd(in_path, out_path, scales, ratios, seed):
    """Cluster box sizes into anchor scales (sqrt area) and aspect ratios (w/h)."""
    started = rp.now()
    ds = _load_coco(in_path)
    try:
        anchors = cluster_anchors(ds.annotations, scales, ratios, seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(out_path)
    csv_path = out.with_suffix(".csv")
    rp.write_json(out, anchors.to_json())
    rows = [("scale", i, v) for i, v in enumerate(anchors.scales)] + [("ratio", i, v) for i, v in enumerate(anchors.ratios)]
    rp.write_csv(csv_path, ("kind", "index", "value"), rows)
    rp.write_json(
        _manifest_path(out),
        rp.manifest("cluster-anchors", {"in": in_path, "scales": scales, "ratios": ratios}, seed, [out, csv_path], started),
    )
    if anchors.degenerate:
        click.echo("warning: fewer distinct values than clusters; centroids repeat", err=True)
    click.echo(f"scales {anchors.scales}\nratios {anchors.ratios}")


@cli.command("gradcheck")
@click.option("--seed", default=0, show_default=True, help="first of --n-seeds consecutive seeds")
@click.option("--n-seeds", default=5, show_default=True)
@click.option("--eps", default=1e-5, show_default=True)
@click.option("--tol", default=1e-4, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="optional CSV of per-case errors")
def gradcheck_cmd(seed, n_seeds, eps, tol, out_path):
    """Finite-difference check of every op and both learned fusion paths."""
    if eps <= 0:
        raise click.BadParameter("must be positive", param_hint="--eps")
    rows = gradcheck_suite(range(seed, seed + n_seeds), eps=eps)
    worst: dict[str, float] = {}
    for r in rows:
        worst[r["case"]] = max(worst.get(r["case"], 0.0), r["rel_error"])
    failed = [c for c, e in worst.items() if not e < tol]
    width = max(len(c) for c in worst)
    for case, err in worst.items():
        click.echo(f"{case:<{width}}  {err:.3e}  {'ok' if err < tol else 'FAIL'}")
    if out_path:
        rp.write_csv(out_path, ("case", "seed", "rel_error", "passed"),
                     [(r["case"], r["seed"], r["rel_error"], int(r["rel_error"] < tol)) for r in rows])
    if failed:
        raise NumericalFailure(f"{len(failed)} case(s) above tolerance {tol}: {', '.join(failed)}")


def _parse_switch(value):
    if value is None:
        return None
    try:
        new, step = value.split("@")
        return int(step), int(new)
    except ValueError:
        raise click.BadParameter("expected N@STEP, e.g. 2@500", param_hint="--switch-template")


def _synthetic_options(f):
    opts = [
        click.option("--n-images", default=1000, show_default=True),
        click.option("--n-eval", default=300, show_default=True),
        click.option("--image-size", default=64, show_default=True),
        click.option("--max-obj-size", default=8, show_default=True),
        click.option("--n-classes", default=3, show_default=True),
        click.option("--objects-per-image", default=1, show_default=True),
        click.option("--noise-std", default=0.1, show_default=True),
        click.option("--data-seed", default=0, show_default=True, help="training set seed; eval set uses data-seed+1"),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _datasets(n_images, n_eval, image_size, max_obj_size, n_classes, objects_per_image, noise_std, data_seed):
    common = dict(image_size=image_size, max_obj_size=max_obj_size, n_classes=n_classes,
                  objects_per_image=objects_per_image, noise_std=noise_std)
    try:
        train_cfg = SyntheticConfig(n_images=n_images, seed=data_seed, **common)
        eval_cfg = SyntheticConfig(n_images=n_eval, seed=data_seed + 1, **common)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    return train_cfg, generate_synthetic(train_cfg), eval_cfg, generate_synthetic(eval_cfg)


def _backbone_config(path, seed):
    if path is None:
        return BackboneConfig(seed=seed)
    try:
        return BackboneConfig.from_file(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _stage_dir(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))


def _commit_dir(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(stage.iterdir()):
        f.replace(out / f.name)
    stage.rmdir()


@cli.command("train")
@click.option("--fusion", type=click.Choice(["soft", "mrae", "hard"]), required=True)
@click.option("--template", type=int, default=None, help="template level for mrae (default 2)")
@click.option("--hard-level", type=int, default=None, help="level for hard attention (default: seeded random)")
@click.option("--switch-template", default=None, help="N@STEP: switch to template N at STEP (mrae only)")
@click.option("--steps", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", "base_lr", type=float, default=None, help="base learning rate of the 3-segment schedule (default 3e-2)")
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--dtype", type=click.Choice(["float64", "float32"]), default="float64", show_default=True)
@click.option("--upsample", type=click.Choice(["bilinear", "nearest"]), default="bilinear", show_default=True)
@click.option("--backbone-config", type=click.Path(dir_okay=False), default=None)
@_synthetic_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def train_cmd(fusion, template, hard_level, switch_template, steps, seed, base_lr, momentum, dtype, upsample,
              backbone_config, out_dir, **data_opts):
    """Train one fusion variant on the synthetic task and write its report."""
    from .train import three_segment_schedule, DESK_BASE_LR

    started = rp.now()
    try:
        config = TrainConfig(
            fusion=fusion,
            template=template,
            hard_level=hard_level,
            steps=steps,
            seed=seed,
            lr_schedule=three_segment_schedule(steps, base_lr if base_lr is not None else DESK_BASE_LR),
            momentum=momentum,
            switch_template_at=_parse_switch(switch_template),
            backbone=_backbone_config(backbone_config, seed),
            n_classes=data_opts["n_classes"],
            upsample_mode=upsample,
            dtype=dtype,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    train_cfg, train_set, eval_cfg, eval_set = _datasets(**data_opts)
    if not train_set:
        raise DataError("training set is empty (--n-images 0)")
    try:
        rep = train(config, train_set, eval_set or None)
    except (TrainingDiverged, NonFiniteError) as exc:
        raise NumericalFailure(str(exc)) from exc

    out = Path(out_dir)
    stage = _stage_dir(out)
    try:
        rows = [(i, loss, *w) for i, (loss, w) in enumerate(zip(rep.losses, rep.weights))]
        rp.write_csv(stage / "report.csv", rp.REPORT_COLUMNS, rows)
        rp.write_csv(stage / "logits.csv", ("step", "template", "d1", "d2", "d3"),
                     [(i, t, *d) for i, (t, d) in enumerate(zip(rep.templates, rep.logits))])
        summary = rep.summary()
        summary["data"] = {"train": vars(train_cfg), "eval": vars(eval_cfg)}
        rp.write_json(stage / "summary.json", summary)
        rp.write_json(stage / "timing.json", {
            "ms_per_step": float(np.mean(rep.step_ms)) if rep.step_ms else None,
            "step_ms": rep.step_ms,
        })
        title = f"{fusion}" + (f" template {config.template}" if config.template else "") + (
            f" level {config.hard_level}" if config.hard_level else "")
        rp.plot_training(rep.losses, rep.weights, stage / "training.png", title)
        outputs = ["report.csv", "logits.csv", "summary.json", "timing.json", "training.png"]
        rp.write_json(stage / "manifest.json", rp.manifest("train", summary, seed, [out / o for o in outputs], started))
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    _commit_dir(stage, out)
    score = rep.localization_score
    click.echo(f"{len(rep.losses)} steps; final loss {rep.final_loss}; eval loss {rep.eval_loss:.6g}; "
               f"localization score {score:.4f}" if rep.losses else f"0 steps; localization score {score:.4f}")


@cli.command("inspect")
@click.option("--fusion", type=click.Choice(["soft", "mrae", "hard"]), required=True)
@click.option("--template", type=int, default=None)
@click.option("--hard-level", type=int, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--n-images", default=10, show_default=True)
@click.option("--data-seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def inspect_cmd(fusion, template, hard_level, seed, n_images, data_seed, out_path):
    """Dump per-image attention weights of a freshly initialized model as JSON."""
    started = rp.now()
    try:
        config = TrainConfig(fusion=fusion, template=template, hard_level=hard_level, steps=0, seed=seed)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    data = generate_synthetic(SyntheticConfig(n_images=n_images, seed=data_seed))
    records = inspect_weights(AttentionDetector(config), data)
    out = Path(out_path)
    rp.write_json(out, records)
    rp.write_json(_manifest_path(out), rp.manifest("inspect", config.to_dict(), seed, [out], started))
    click.echo(f"wrote {len(records)} records to {out}")


def _report_row(run_dir: Path) -> dict:
    summary = json.loads((run_dir / "summary.json").read_text())
    timing_path = run_dir / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    cfg = summary["config"]
    w = summary.get("mean_train_weights") or [None, None, None]
    return {
        "run": run_dir.name,
        "fusion": cfg["fusion"],
        "template": cfg.get("template") or cfg.get("hard_level"),
        "steps": summary["steps"],
        "final_loss": summary["final_loss"],
        "eval_loss": summary.get("eval_loss"),
        "localization_score": summary["localization_score"],
        "a1": w[0],
        "a2": w[1],
        "a3": w[2],
        "ms_per_step": timing.get("ms_per_step"),
    }


@cli.command("compare")
@click.option("--reports", "report_dirs", required=True, multiple=True, type=click.Path(),
              help="run directory written by 'train', or a directory containing several")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="CSV path; .md and .png written alongside")
def compare_cmd(report_dirs, out_path):
    """Merge train reports into one comparison table."""
    started = rp.now()
    runs = []
    for d in report_dirs:
        d = Path(d)
        if (d / "summary.json").exists():
            runs.append(d)
        elif d.is_dir():
            runs.extend(sorted(p for p in d.iterdir() if (p / "summary.json").exists()))
    if not runs:
        raise DataError(f"no train reports found under {', '.join(report_dirs)}")
    try:
        rows = [_report_row(r) for r in runs]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable report: {exc}") from exc
    out = Path(out_path)
    cols = rp.COMPARE_COLUMNS
    rp.write_csv(out, cols, [[r[c] for c in cols] for r in rows])
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        md.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
    rp.atomic_write_text(out.with_suffix(".md"), "\n".join(md) + "\n")
    rp.plot_compare(rows, out.with_suffix(".png"))
    rp.write_json(_manifest_path(out), rp.manifest("compare", {"reports": [str(r) for r in runs]}, None,
                                                  [out, out.with_suffix(".md"), out.with_suffix(".png")], started))
    click.echo("\n".join(md))


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mrae", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return EXIT_USAGE
    except (DataError, NumericalFailure) as exc:
        exc.show()
        return exc.exit_code
    except click.ClickException as exc:  # usage errors
        exc.show()
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
