"""Command-line driver for the segmentation pipeline.

Subcommands: ``synth``, ``train-cnn``, ``train-sae``, ``infer``, ``eval`` and
``ablate``. Every option can also be supplied through a JSON object given
with ``--config``; options on the command line override the file.

Exit codes: 0 success, 2 usage or input error, 3 strict evaluation failure,
4 numeric divergence.

Every output directory receives ``config.json`` (the resolved options,
sorted keys) and ``run.json`` (the run record). Apart from the wall-clock
field of ``run.json``, all outputs are byte-identical for identical options.
Absolute metric values on synthetic phantoms are not comparable with
numbers reported on clinical data; the acceptance suite in ``tests`` is the
reference for expected behaviour.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .align3d import SliceStack, align_stack, fit_quadratic
from .dataio import (DatasetManifest, PhantomSpec, read_contour, read_manifest, synth_dataset,
                     write_contour, write_pgm, write_ppm)
from .deform import EnergyWeights, SnakeConfig
from .errors import Diverged, EmptyMask, LvSegError, SingularSystem
from .imaging import draw_contour, gray_to_rgb
from .infershape import StackedAE
from .locate import ArchVariant, LocatorCNN, crop_roi
from .metrics import EvalReport, format_report, score_slice
from .numerics import load_checkpoint, save_checkpoint
from .train import TrainConfig

log = logging.getLogger("lvseg")

EXIT_OK, EXIT_USAGE, EXIT_STRICT, EXIT_DIVERGED = 0, 2, 3, 4

# overlay colours (RGB): expert contour, traced stage-2 shape, refined contour
OVERLAY_COLORS = {"truth": (0, 255, 0), "initial": (255, 0, 0), "refined": (255, 255, 0)}

CNN_DEFAULTS = dict(lr=pipeline.CNN_CONFIG.learning_rate, epochs=pipeline.CNN_CONFIG.epochs,
                    batch_size=pipeline.CNN_CONFIG.batch_size, seed=0, depth="one_conv",
                    width=100, activation="sigmoid", pooling="average", pretrain=True,
                    stop_tolerance=1e-6, stop_window=5, checkpoint_interval=10, split="train")
SAE_DEFAULTS = dict(lr=pipeline.SAE_CONFIG.learning_rate, epochs=pipeline.SAE_CONFIG.epochs,
                    batch_size=pipeline.SAE_CONFIG.batch_size, seed=0, loss="composite",
                    init="zeros", finetune=False, stop_tolerance=1e-6, stop_window=5,
                    cnn=None, oracle_roi=False, split="train")
INFER_DEFAULTS = dict(cnn=None, sae=None, oracle_roi=False, oracle_shape=False, refine="snake",
                      align=False, split="validation", overlays=True,
                      alpha=list(asdict(EnergyWeights()).values()))
DEFAULTS = {
    "synth": dict(count=250, seed=0, noise_std=0.04, jitter_std=0.0, slices_per_stack=10,
                  val_fraction=0.2, maxval=65535),
    "train-cnn": CNN_DEFAULTS,
    "train-sae": SAE_DEFAULTS,
    "infer": INFER_DEFAULTS,
    "eval": dict(out=None, strict=False, split="validation", mm_per_pixel=None),
    "ablate": dict(grid="cnn", seed=0, cnn_epochs=CNN_DEFAULTS["epochs"],
                   sae_epochs=SAE_DEFAULTS["epochs"], refine="snake"),
}

# CNN architecture variants and the stacked-autoencoder alternatives
ABLATION_GRIDS = {
    "cnn": [("original", {}), ("deeper", {"depth": "two_conv"}), ("width200", {"width": 200}),
            ("relu", {"activation": "relu"}), ("maxpool", {"pooling": "max"})],
    "sae": [("original", {}), ("mse_only", {"loss": "mse_only"}),
            ("init_normal", {"init": "normal"}), ("init_uniform", {"init": "uniform"})],
}
ABLATION_GRIDS["all"] = ABLATION_GRIDS["cnn"] + ABLATION_GRIDS["sae"][1:]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Option handling
# ---------------------------------------------------------------------------

def _opt(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="lvseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"lvseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    _opt(p, "--out", type=Path)
    _opt(p, "--count", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--noise-std", type=float)
    _opt(p, "--jitter-std", type=float, help="per-slice centre jitter (px)")
    _opt(p, "--slices-per-stack", type=int)
    _opt(p, "--val-fraction", type=float, help="fraction of stacks labelled validation")
    _opt(p, "--maxval", type=int, choices=(255, 65535))

    for name in ("train-cnn", "train-sae"):
        p = sub.add_parser(name, help=f"train the {'locator CNN' if name == 'train-cnn' else 'stacked autoencoder'}")
        _opt(p, "--manifest", type=Path)
        _opt(p, "--out", type=Path)
        _opt(p, "--lr", type=float)
        _opt(p, "--epochs", type=int)
        _opt(p, "--batch-size", type=int)
        _opt(p, "--seed", type=int)
        _opt(p, "--stop-tolerance", type=float)
        _opt(p, "--stop-window", type=int)
        _opt(p, "--split", choices=("train", "validation", "all"))
        if name == "train-cnn":
            _opt(p, "--depth", choices=("one_conv", "two_conv"))
            _opt(p, "--width", type=int)
            _opt(p, "--activation", choices=("sigmoid", "relu"))
            _opt(p, "--pooling", choices=("average", "max"))
            _opt(p, "--no-pretrain", dest="pretrain", action="store_false")
            _opt(p, "--checkpoint-interval", type=int)
        else:
            _opt(p, "--cnn", type=Path, help="train-cnn output directory")
            _opt(p, "--oracle-roi", action="store_true", help="crop around expert contours")
            _opt(p, "--loss", choices=("composite", "mse_only"))
            _opt(p, "--init", choices=("zeros", "normal", "uniform"))
            _opt(p, "--finetune", action="store_true")

    p = sub.add_parser("infer", help="segment slices and write contours")
    _opt(p, "--manifest", type=Path)
    _opt(p, "--out", type=Path)
    _opt(p, "--cnn", type=Path)
    _opt(p, "--sae", type=Path)
    _opt(p, "--oracle-roi", action="store_true")
    _opt(p, "--oracle-shape", action="store_true")
    _opt(p, "--refine", choices=pipeline.REFINE_MODES)
    _opt(p, "--align", action="store_true")
    _opt(p, "--split", choices=("train", "validation", "all"))
    _opt(p, "--no-overlays", dest="overlays", action="store_false")
    _opt(p, "--alpha", type=float, nargs=3, metavar=("LEN", "REG", "SHAPE"))

    p = sub.add_parser("eval", help="score predicted contours against the manifest")
    _opt(p, "--manifest", type=Path)
    _opt(p, "--pred", type=Path, help="directory of <slice_id>.txt contours")
    _opt(p, "--out", type=Path)
    _opt(p, "--strict", action="store_true")
    _opt(p, "--split", choices=("train", "validation", "all"))
    _opt(p, "--mm-per-pixel", type=float)

    p = sub.add_parser("ablate", help="train and score a grid of variants")
    _opt(p, "--manifest", type=Path)
    _opt(p, "--out", type=Path)
    _opt(p, "--grid", help="cnn, sae, all, or a JSON file of [name, overrides] pairs")
    _opt(p, "--seed", type=int)
    _opt(p, "--cnn-epochs", type=int)
    _opt(p, "--sae-epochs", type=int)
    _opt(p, "--refine", choices=pipeline.REFINE_MODES)

    for action in sub.choices.values():
        action.add_argument("--config", type=Path, help="JSON file of options")
    return parser


def resolve(args):
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[args.command])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        known = set(opts) | {"manifest", "out", "pred"}
        unknown = sorted(set(k.replace("-", "_") for k in loaded) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update(given)
    for key in ("manifest", "out", "pred", "cnn", "sae"):
        if opts.get(key) is not None:
            opts[key] = Path(opts[key])
    required = {"synth": ("out",), "eval": ("manifest", "pred")}.get(args.command,
                                                                      ("manifest", "out"))
    for key in required:
        if opts.get(key) is None:
            raise UsageError(f"--{key} is required")
    return opts


def _jsonable(opts):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(opts.items())}


def write_config(out_dir, opts, extra=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command_options": _jsonable(opts), "version": __version__}
    if extra:
        snapshot.update(extra)
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def write_run_record(out_dir, opts, losses=None, report=None, artifacts=(), started=None):
    record = {"config": _jsonable(opts), "losses": list(losses or []),
              "final_metrics": None if report is None else {
                  "dice": report.dice, "conformity": report.conformity, "apd_px": report.apd,
                  "missing": sum(s.missing for s in report.per_slice)},
              "artifacts": sorted(str(a) for a in artifacts),
              "wall_clock_s": None if started is None else round(time.perf_counter() - started, 3)}
    (out_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def write_losses(path, losses):
    lines = ["epoch\tloss"] + [f"{i}\t{v!r}" for i, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path, split):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    manifest = read_manifest(path)
    if split != "all":
        manifest = manifest.subset(split)
    if not manifest.entries:
        raise UsageError(f"manifest {path} has no {split} entries")
    return manifest


def load_all(manifest: DatasetManifest):
    images, contours = [], []
    for e in manifest.entries:
        im, c = manifest.load(e)
        images.append(im)
        contours.append(c)
    return images, contours


def cnn_config(opts):
    return TrainConfig(learning_rate=opts["lr"], epochs=opts["epochs"],
                       batch_size=opts["batch_size"], seed=opts["seed"], depth=opts["depth"],
                       width=opts["width"], activation=opts["activation"],
                       pooling=opts["pooling"], stop_tolerance=opts["stop_tolerance"],
                       stop_window=opts["stop_window"],
                       checkpoint_interval=opts["checkpoint_interval"])


def sae_config(opts):
    return TrainConfig(learning_rate=opts["lr"], epochs=opts["epochs"],
                       batch_size=opts["batch_size"], seed=opts["seed"], loss_mode=opts["loss"],
                       init_scheme=opts["init"], finetune=opts["finetune"],
                       stop_tolerance=opts["stop_tolerance"], stop_window=opts["stop_window"])


def load_cnn(cnn_dir) -> LocatorCNN:
    cnn_dir = Path(cnn_dir)
    try:
        cfg = json.loads((cnn_dir / "config.json").read_text(encoding="utf-8"))["train_config"]
    except (OSError, KeyError, ValueError):
        raise UsageError(f"{cnn_dir} is not a train-cnn output directory") from None
    variant = ArchVariant(cfg["depth"], cfg["width"], cfg["activation"], cfg["pooling"])
    return LocatorCNN.from_tensors(load_checkpoint(cnn_dir / "cnn.ckpt"), variant)


def load_sae(sae_dir) -> StackedAE:
    path = Path(sae_dir) / "sae.ckpt"
    if not path.is_file():
        raise UsageError(f"{sae_dir} is not a train-sae output directory")
    return StackedAE.from_tensors(load_checkpoint(path))


def boxes_for(opts, images, contours):
    if opts["oracle_roi"]:
        return pipeline.oracle_boxes(contours), None
    if opts.get("cnn") is None:
        raise UsageError("either --cnn or --oracle-roi is required")
    return pipeline.locate(load_cnn(opts["cnn"]), images)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(opts):
    if opts["count"] < 1:
        raise UsageError("--count must be positive")
    if not 0.0 <= opts["val_fraction"] < 1.0:
        raise UsageError("--val-fraction must lie in [0, 1)")
    try:
        spec = PhantomSpec(seed=opts["seed"], noise_std=opts["noise_std"],
                           jitter_std=opts["jitter_std"],
                           slices_per_stack=opts["slices_per_stack"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    started = time.perf_counter()
    out = opts["out"]
    synth_dataset(spec, opts["count"], out, opts["maxval"], opts["val_fraction"])
    write_config(out, opts, {"phantom_spec": _jsonable(asdict(spec))})
    write_run_record(out, opts, artifacts=["manifest.tsv", "truth.tsv"], started=started)
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_train_cnn(opts):
    started = time.perf_counter()
    manifest = load_split(opts["manifest"], opts["split"])
    cfg = cnn_config(opts)
    out = opts["out"]
    write_config(out, opts, {"train_config": cfg.to_dict()})
    images, contours = load_all(manifest)

    def checkpoint(epoch, loss, model):
        log.info("cnn epoch %d loss %.6g", epoch, loss)
        if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(out / "cnn.ckpt", model.to_tensors())

    fit = pipeline.fit_locator(images, contours, cfg, opts["pretrain"], checkpoint)
    model, bank = fit.model, fit.filters
    save_checkpoint(out / "cnn.ckpt", model.to_tensors())
    artifacts = ["cnn.ckpt", "losses.tsv"]
    if bank is not None:
        save_checkpoint(out / "filters.ckpt", {"conv_filters": bank.filters, "conv_bias": bank.bias})
        write_losses(out / "filter_losses.tsv", bank.history.checkpoints)
        artifacts += ["filters.ckpt", "filter_losses.tsv"]
    write_losses(out / "losses.tsv", fit.losses)
    # inspection outputs: predicted 32x32 masks and ROI crops for the first slices
    boxes, masks = pipeline.locate(model, images[:8])
    (out / "inspect").mkdir(exist_ok=True)
    for e, m, b, im in zip(manifest.entries, masks, boxes, images):
        write_pgm(out / "inspect" / f"{e.slice_id}_mask32.pgm", m, 255)
        write_pgm(out / "inspect" / f"{e.slice_id}_roi.pgm", crop_roi(im, b), 255)
    write_run_record(out, opts, fit.losses, artifacts=artifacts, started=started)
    print(f"final train MSE {fit.losses[-1]:.6f} after {len(fit.losses)} epochs")
    return EXIT_OK


def cmd_train_sae(opts):
    started = time.perf_counter()
    manifest = load_split(opts["manifest"], opts["split"])
    cfg = sae_config(opts)
    out = opts["out"]
    write_config(out, opts, {"train_config": cfg.to_dict()})
    images, contours = load_all(manifest)
    boxes, _ = boxes_for(opts, images, contours)
    rois, masks = pipeline.sae_training_pairs(images, contours, boxes)
    fit = pipeline.fit_shape_model(rois, masks, cfg)
    save_checkpoint(out / "sae.ckpt", fit.model.to_tensors())
    write_losses(out / "losses.tsv", fit.losses)
    write_losses(out / "ae1_losses.tsv", fit.layers.ae1_history.losses)
    write_losses(out / "ae2_losses.tsv", fit.layers.ae2_history.losses)
    (out / "inspect").mkdir(exist_ok=True)
    for e, p in zip(manifest.entries[:8], fit.model.predict(rois[:8])):
        write_pgm(out / "inspect" / f"{e.slice_id}_shape64.pgm", p, 255)
    write_run_record(out, opts, fit.losses, started=started,
                     artifacts=["sae.ckpt", "losses.tsv", "ae1_losses.tsv", "ae2_losses.tsv"])
    print(f"final output-layer MSE {fit.losses[-1]:.6f}")
    return EXIT_OK


def align_contours(manifest: DatasetManifest, contours: dict):
    """Per-stack quadratic alignment of predicted contours (stacks with < 3 slices are copied)."""
    aligned = {}
    for stack_id, entries in sorted(manifest.stacks().items()):
        have = [e for e in entries if e.slice_id in contours]
        try:
            stack = SliceStack.from_contours([e.slice_index for e in have],
                                             [contours[e.slice_id] for e in have])
            done = align_stack(stack, fit_quadratic(stack))
            aligned.update({e.slice_id: s.contour for e, s in zip(have, done.slices)})
        except (SingularSystem, LvSegError) as exc:
            log.warning("stack %s not aligned: %s", stack_id, exc)
            aligned.update({e.slice_id: contours[e.slice_id] for e in have})
    return aligned


def cmd_infer(opts):
    started = time.perf_counter()
    manifest = load_split(opts["manifest"], opts["split"])
    out = opts["out"]
    weights = EnergyWeights(*opts["alpha"])
    write_config(out, opts, {"snake": asdict(SnakeConfig()), "energy_weights": asdict(weights)})
    images, truths = load_all(manifest)
    boxes, masks32 = boxes_for(opts, images, truths)
    if not opts["oracle_shape"]:
        if opts.get("sae") is None:
            raise UsageError("either --sae or --oracle-shape is required")
        shape_model = load_sae(opts["sae"])
    for sub in ("contours", "initial", "masks") + (("overlays",) if opts["overlays"] else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    refined, rows = {}, ["# slice_id\tbox_row\tbox_col\tstatus"]
    for k, (e, im, truth, box) in enumerate(zip(manifest.entries, images, truths, boxes)):
        oracle = pipeline.shape_target(truth, box) if opts["oracle_shape"] else None
        try:
            res = pipeline.segment(im, box, None if oracle is not None else shape_model,
                                   opts["refine"], oracle, weights=weights)
        except (EmptyMask, LvSegError) as exc:
            rows.append(f"{e.slice_id}\t{box.center[0]}\t{box.center[1]}\tfailed: {exc}")
            continue
        rows.append(f"{e.slice_id}\t{box.center[0]}\t{box.center[1]}\tok")
        refined[e.slice_id] = res.contour
        write_contour(out / "contours" / f"{e.slice_id}.txt", res.contour)
        write_contour(out / "initial" / f"{e.slice_id}.txt", res.initial)
        write_pgm(out / "masks" / f"{e.slice_id}_shape64.pgm", res.mask64, 255)
        write_pgm(out / "masks" / f"{e.slice_id}_roi.pgm", crop_roi(im, box), 255)
        if masks32 is not None:
            write_pgm(out / "masks" / f"{e.slice_id}_mask32.pgm", masks32[k], 255)
        if opts["overlays"]:
            rgb = gray_to_rgb(im)
            draw_contour(rgb, truth, OVERLAY_COLORS["truth"])
            draw_contour(rgb, res.initial, OVERLAY_COLORS["initial"])
            draw_contour(rgb, res.contour, OVERLAY_COLORS["refined"])
            write_ppm(out / "overlays" / f"{e.slice_id}.ppm", rgb)
    artifacts = ["contours", "initial", "masks", "slices.tsv"]
    if opts["align"]:
        (out / "aligned").mkdir(exist_ok=True)
        for sid, c in align_contours(manifest, refined).items():
            write_contour(out / "aligned" / f"{sid}.txt", c)
        artifacts.append("aligned")
    (out / "slices.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    report = evaluate(manifest, out / "contours")
    (out / "report.tsv").write_text(format_report(report), encoding="utf-8")
    write_run_record(out, opts, report=report, artifacts=artifacts + ["report.tsv"],
                     started=started)
    print(f"{len(refined)}/{len(manifest)} slices segmented; mean dice {_show(report.dice)}")
    return EXIT_OK


def _show(v):
    return "NA" if v is None else f"{v:.4f}"


def evaluate(manifest: DatasetManifest, pred_dir, mm_per_pixel=None) -> EvalReport:
    report = EvalReport(mm_per_pixel=mm_per_pixel)
    for e in manifest.entries:
        _, truth = manifest.load(e)
        path = Path(pred_dir) / f"{e.slice_id}.txt"
        auto = read_contour(path) if path.is_file() else None
        report.per_slice.append(score_slice(e.slice_id, auto, truth, (256, 256)))
    return report


def cmd_eval(opts):
    manifest = load_split(opts["manifest"], opts["split"])
    if not Path(opts["pred"]).is_dir():
        raise UsageError(f"prediction directory not found: {opts['pred']}")
    report = evaluate(manifest, opts["pred"], opts["mm_per_pixel"])
    text = format_report(report)
    if opts["out"] is not None:
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    missing = sum(s.missing for s in report.per_slice)
    if opts["strict"] and missing:
        print(f"{missing} of {len(report.per_slice)} slices have no prediction", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def _grid(spec):
    if spec in ABLATION_GRIDS:
        return ABLATION_GRIDS[spec]
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown grid {spec!r}")
    cells = [(str(n), dict(o)) for n, o in json.loads(path.read_text(encoding="utf-8"))]
    if not any(n == "original" for n, _ in cells):
        cells.insert(0, ("original", {}))
    return cells


def run_cell(opts, overrides, train, val, cache):
    """Train both stages for one grid cell and score the validation split."""
    cnn_opts = dict(CNN_DEFAULTS, seed=opts["seed"], epochs=opts["cnn_epochs"])
    cnn_opts.update({k: v for k, v in overrides.items() if k in CNN_DEFAULTS})
    sae_opts = dict(SAE_DEFAULTS, seed=opts["seed"], epochs=opts["sae_epochs"])
    sae_opts.update({k: v for k, v in overrides.items() if k in SAE_DEFAULTS})
    unknown = set(overrides) - set(CNN_DEFAULTS) - set(SAE_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown grid keys {sorted(unknown)}")
    cnn_cfg = cnn_config(cnn_opts)
    key = json.dumps(cnn_cfg.to_dict(), sort_keys=True) + str(cnn_opts["pretrain"])
    if key not in cache:
        cache[key] = pipeline.fit_locator(train[0], train[1], cnn_cfg, cnn_opts["pretrain"])
    loc = cache[key]
    boxes, _ = pipeline.locate(loc.model, train[0])
    rois, masks = pipeline.sae_training_pairs(train[0], train[1], boxes)
    fit = pipeline.fit_shape_model(rois, masks, sae_config(sae_opts))
    vboxes, _ = pipeline.locate(loc.model, val[0])
    report = EvalReport()
    for sid, im, truth, box in zip(val[2], val[0], val[1], vboxes):
        try:
            c = pipeline.segment(im, box, fit.model, opts["refine"]).contour
        except LvSegError:
            c = None
        report.per_slice.append(score_slice(sid, c, truth, (256, 256)))
    return cnn_cfg, sae_config(sae_opts), loc.losses, fit.losses, report


def cmd_ablate(opts):
    started = time.perf_counter()
    out = opts["out"]
    cells = _grid(opts["grid"])
    write_config(out, opts, {"grid": cells})
    tm, vm = load_split(opts["manifest"], "train"), load_split(opts["manifest"], "validation")
    train = load_all(tm)
    val = (*load_all(vm), [e.slice_id for e in vm.entries])
    rows, cache = [], {}
    for name, overrides in cells:
        cell_dir = out / "cells" / name
        cell_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            cnn_cfg, sae_cfg, cnn_losses, sae_losses, report = run_cell(opts, overrides, train,
                                                                        val, cache)
        except (LvSegError, FloatingPointError) as exc:
            log.error("cell %s failed: %s", name, exc)
            rows.append((name, None, None, None, f"failed: {exc}"))
            continue
        write_config(cell_dir, dict(opts, cell=name, overrides=overrides),
                     {"cnn_config": cnn_cfg.to_dict(), "sae_config": sae_cfg.to_dict()})
        write_losses(cell_dir / "cnn_losses.tsv", cnn_losses)
        write_losses(cell_dir / "sae_losses.tsv", sae_losses)
        (cell_dir / "report.tsv").write_text(format_report(report), encoding="utf-8")
        write_run_record(cell_dir, dict(opts, cell=name), cnn_losses, report,
                         ["cnn_losses.tsv", "sae_losses.tsv", "report.tsv"], t0)
        rows.append((name, report.dice, report.conformity, report.apd, "ok"))
        log.info("cell %s dice %s", name, _show(report.dice))
    (out / "ablation.tsv").write_text(format_ablation(rows, opts["seed"]), encoding="utf-8")
    write_run_record(out, opts, artifacts=["ablation.tsv", "cells"], started=started)
    sys.stdout.write(format_ablation(rows, opts["seed"]))
    return EXIT_OK


def format_ablation(rows, seed):
    """Cells ranked by validation Dice (failed cells last, in grid order)."""
    ok = sorted((r for r in rows if r[1] is not None), key=lambda r: -r[1])
    bad = [r for r in rows if r[1] is None]
    lines = ["rank\tcell\tdice\tconformity\tapd_px\tseed\tstatus"]
    for i, (name, dm, cc, ap, status) in enumerate(ok + bad, start=1):
        lines.append("\t".join([str(i) if dm is not None else "-", name, _show(dm), _show(cc),
                                _show(ap), str(seed), status]))
    return "\n".join(lines) + "\n"


COMMANDS = {"synth": cmd_synth, "train-cnn": cmd_train_cnn, "train-sae": cmd_train_sae,
            "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](resolve(args))
    except UsageError as exc:
        print(f"lvseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Diverged as exc:
        print(f"lvseg {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except LvSegError as exc:
        print(f"lvseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
