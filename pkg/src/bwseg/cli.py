"""Command-line entry point: ``bwseg <subcommand> ...``.

Exit codes
----------
== =====================================================
0  success
1  internal error (bug)
2  usage error: unknown flag, bad argument value
3  missing input file or directory
4  configuration error: schema violation, invalid values
5  data error: malformed file, inconsistent inputs
== =====================================================

Errors are reported as a single JSON line on stderr, e.g.
``{"error": "missing_file", "exit_code": 3, "message": "..."}``.
Progress goes to stderr; stdout carries only JSON summaries.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4, 5

log = logging.getLogger("bwseg")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def _missing(msg):
    return CliError("missing_file", EXIT_MISSING, msg)


def _config(msg):
    return CliError("config", EXIT_CONFIG, msg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, f"{self.prog}: {message}")


# -- config handling -----------------------------------------------------------------

def _schema_registry():
    from referencing import Registry, Resource

    reg = Registry()
    files = resources.files("bwseg") / "schemas"
    for f in files.iterdir():
        if f.name.endswith(".schema.json"):
            reg = reg.with_resource(f.name, Resource.from_contents(json.loads(f.read_text())))
    return reg


def load_config(path, schema: str) -> dict:
    """Read a JSON config and validate it against ``schemas/<schema>.schema.json``."""
    import jsonschema

    path = Path(path)
    if not path.is_file():
        raise _missing(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise _config(f"{path}: invalid JSON ({e})") from None
    reg = _schema_registry()
    sch = reg.contents(f"{schema}.schema.json")
    validator = jsonschema.Draft202012Validator(sch, registry=reg)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        raise _config(f"{path}: {where}: {e.message}")
    return cfg


def _need(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise _missing(f"{what} not found: {p}")
    return p


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _emit(summary: dict):
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------------

def cmd_phantom(args):
    from .fileio import write_series
    from .phantom import DatasetVariation, PhantomConfig, make_dataset, make_phantom_series

    run = load_config(args.config, "phantom_run")
    try:
        base = PhantomConfig(**run.get("phantom", {}))
        var = DatasetVariation(**run.get("variation", {}))
    except (TypeError, ValueError) as e:
        raise _config(str(e)) from None
    if args.seed is not None:
        base.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = run.get("format", ".raw")
    full = bool(run.get("full_labels", False))
    if "n_subjects" not in run:
        series = make_phantom_series(base, subject_id="phantom")
        write_series(series, out, ext)
        _dump({"config": base.to_dict()}, out / "phantom.json")
        _emit({"subjects": 1, "frames": series.T})
        return
    try:
        ds = make_dataset(run["n_subjects"], base, base.seed, var)
    except ValueError as e:
        raise _config(str(e)) from None
    listing = {"train": [], "val": [], "test": []}
    for rec in ds.subjects:
        log.info("writing %s (%s)", rec.subject_id, rec.split)
        write_series(rec.series(full_labels=full), out / rec.subject_id, ext)
        listing[rec.split].append(f"{rec.subject_id}/manifest.json")
    _dump({**listing, "dataset": ds.to_dict(), "digest": ds.digest(), "variation": var.to_dict()},
          out / "dataset.json")
    _emit({"subjects": len(ds.subjects), **{k: len(v) for k, v in listing.items()}, "digest": ds.digest()})


def _preprocess_volume(v, args):
    from .volgrid import crop_or_pad, normalize_p90, resample_linear, split_interleaved

    if not args.no_split:
        v = split_interleaved(v)[args.which]
    if args.target_spacing:
        v = resample_linear(v, args.target_spacing)
    if not args.no_normalize:
        v = normalize_p90(v)
    if args.dims:
        v = crop_or_pad(v, args.dims)
    return v


def _preprocess_label(y, args):
    from .volgrid import LabelMap, Volume, crop_or_pad, resample_linear, split_interleaved

    if not args.no_split:
        y = split_interleaved(Volume(y.data, y.spacing))[args.which]
        y = LabelMap(y.data, y.spacing)
    if args.target_spacing:
        r = resample_linear(Volume(y.data, y.spacing), args.target_spacing)
        y = LabelMap(r.data >= 0.5, r.spacing)
    if args.dims:
        y = crop_or_pad(y, args.dims)
    return y


def cmd_preprocess(args):
    from .fileio import read_label, read_series, read_volume, write_label, write_series, write_volume
    from .volgrid import BoldSeries

    src = _need(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if src.suffix == ".json" or src.is_dir():
        s = read_series(src)
        frames = [_preprocess_volume(f, args) for f in s.frames]
        labels = {t: _preprocess_label(y, args) for t, y in s.labels.items()}
        write_series(BoldSeries(frames, s.phase_bounds, labels, s.subject_id), out, args.format)
        _emit({"frames": len(frames), "dims": list(frames[0].dims), "spacing": list(frames[0].spacing)})
        return
    v = _preprocess_volume(read_volume(src), args)
    write_volume(v, out / f"volume{args.format}", {"source": str(args.input)})
    if args.label:
        y = _preprocess_label(read_label(_need(args.label, "label")), args)
        write_label(y, out / f"label{args.format}", {"source": str(args.label)})
    _emit({"dims": list(v.dims), "spacing": list(v.spacing)})


def cmd_boundary(args):
    from .boundary import boundary_band, signed_distance, weight_map
    from .fileio import read_label, write_label, write_volume
    from .volgrid import LabelMap, Volume

    y = read_label(_need(args.label, "label"))
    try:
        wm = weight_map(y, args.w1, args.w2, args.K)
        sdf = signed_distance(y, args.metric)
    except ValueError as e:
        raise CliError("data", EXIT_DATA, str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = {"w1": wm.w1, "w2": wm.w2, "K": wm.K, "source": str(args.label)}
    write_volume(Volume(wm.data, y.spacing), out / "weights.raw", prov)
    write_volume(Volume(sdf.data, y.spacing), out / "sdf.raw", {"metric": sdf.metric, "source": str(args.label)})
    write_label(LabelMap(boundary_band(y, args.K), y.spacing), out / "band.raw", prov)
    _emit({"band_voxels": int(boundary_band(y, args.K).sum()), "w1": wm.w1, "w2": wm.w2, "K": wm.K})


def cmd_augment_preview(args):
    from .augment import AugmentConfig, augment_sample, sample_rng
    from .fileio import read_series, write_label, write_volume
    from .volgrid import normalize_p90

    s = read_series(_need(args.series, "series manifest"))
    cfg = AugmentConfig(**load_config(args.config, "augment_config")) if args.config else AugmentConfig()
    if args.frame not in s.labels:
        raise CliError("data", EXIT_DATA, f"frame {args.frame} has no label in {args.series}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    v, y = normalize_p90(s.frames[args.frame]), s.labels[args.frame]
    seed = args.seed if args.seed is not None else 0
    for i in range(args.n):
        va, ya = augment_sample(v, y, cfg, sample_rng(seed, i))
        write_volume(va, out / f"aug{i:03d}_volume.raw", {"seed": seed, "copy": i})
        write_label(ya, out / f"aug{i:03d}_label.raw", {"seed": seed, "copy": i})
    _emit({"copies": args.n, "seed": seed})


def _train_inputs(raw: dict, base: Path):
    def resolve(p):
        q = Path(p)
        return q if q.is_absolute() else base / q

    if "dataset" in raw:
        ds_path = resolve(raw["dataset"])
        if not ds_path.is_file():
            raise _config(f"dataset listing not found: {ds_path}")
        listing = json.loads(ds_path.read_text())
        train = [ds_path.parent / p for p in listing["train"]]
        val = [ds_path.parent / p for p in listing.get("val", [])]
    else:
        train = [resolve(p) for p in raw["train"]]
        val = [resolve(p) for p in raw.get("val", [])]
    for kind, paths in (("train", train), ("val", val)):
        for p in paths:
            if not (p.is_file() or (p.is_dir() and (p / "manifest.json").is_file())):
                raise _config(f"{kind} series not found: {p}")
    return train, val


def cmd_train(args):
    import torch

    from .fileio import read_series
    from .unet import TrainConfig, save_checkpoint, train

    raw = load_config(args.config, "train_config")
    train_paths, val_paths = _train_inputs(raw, Path(args.config).parent)
    opts = {k: v for k, v in raw.items() if k not in ("dataset", "train", "val")}
    if args.loss:
        opts["loss"] = {**opts.get("loss", {}), "name": args.loss}
        opts["loss"].pop("base", None)
        opts["loss"].pop("boundary_weighting", None)
    if args.seed is not None:
        opts["seed"] = args.seed
    if args.epochs is not None:
        opts["epochs"] = args.epochs
    try:
        cfg = TrainConfig.from_dict(opts)
    except (TypeError, ValueError) as e:
        raise _config(str(e)) from None
    train_s = [read_series(p) for p in train_paths]
    val_s = [read_series(p) for p in val_paths]
    for s in train_s:
        if not s.labels:
            raise _config(f"training series {s.subject_id!r} has no labeled frames")

    def progress(rec):
        log.info("epoch %d loss %.5f train_dice %.4f val_dice %s", rec["epoch"], rec["train_loss"],
                 rec["train_dice"], rec.get("val_dice"))

    torch.manual_seed(cfg.seed)
    net, history = train(train_s, val_s, cfg, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best = max((r["val_dice"] for r in history if "val_dice" in r), default=None)
    save_checkpoint(out / "model.ckpt", net, cfg.input_dims, history,
                    {"train_config": cfg.to_dict(), "best_epoch": net.best_epoch})
    _dump(history, out / "history.json")
    _dump(cfg.to_dict(), out / "train_config.json")
    _emit({"best_epoch": net.best_epoch, "best_val_dice": best, "checkpoint": "model.ckpt"})


def _ckpt(path):
    from .unet import load_checkpoint

    p = _need(path, "checkpoint")
    if p.is_dir():
        p = _need(p / "model.ckpt", "checkpoint")
    try:
        return load_checkpoint(p)
    except ValueError as e:
        raise CliError("data", EXIT_DATA, str(e)) from None


def cmd_segment(args):
    from .fileio import read_series, write_label
    from .timeseries import segment_series

    net, header = _ckpt(args.ckpt)
    s = read_series(_need(args.input, "series manifest"))
    pred = segment_series(net, s, args.stride, header["input_dims"], args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t, m in zip(pred.indices, pred.masks):
        name = f"pred{t:04d}{args.format}"
        write_label(m, out / name, {"frame": t, "subject_id": s.subject_id})
        files.append(name)
    _dump({"version": 1, "subject_id": s.subject_id, "stride": args.stride, "indices": pred.indices,
           "files": files, "empty": pred.empty}, out / "predictions.json")
    _emit({"frames": len(files), "empty": int(sum(pred.empty))})


def read_predictions(directory):
    from .fileio import read_label
    from .timeseries import SeriesPrediction

    d = _need(directory, "predictions directory")
    listing = _need(d / "predictions.json", "predictions listing")
    meta = json.loads(listing.read_text())
    masks = [read_label(d / f) for f in meta["files"]]
    return SeriesPrediction(meta["indices"], masks, meta["empty"]), meta


def cmd_evaluate(args):
    from .fileio import read_series
    from .metrics import evaluate_pair, summarize, write_csv
    from .timeseries import phase_sensitivity

    if len(args.pred) != len(args.gt):
        raise CliError("usage", EXIT_USAGE, "--pred and --gt need the same number of entries")
    reports = []
    for pdir, gpath in zip(args.pred, args.gt):
        pred, _ = read_predictions(pdir)
        s = read_series(_need(gpath, "ground-truth manifest"))
        lookup = dict(zip(pred.indices, pred.masks))
        for t, lab in s.labels.items():
            if t not in lookup:
                continue
            if lookup[t].dims != lab.dims:
                raise CliError("data", EXIT_DATA, f"prediction {t} dims {lookup[t].dims} != truth {lab.dims}")
            reports.append(evaluate_pair(s.frames[t], lab, lookup[t], subject_id=s.subject_id,
                                         frame_index=t, phase=s.phase(t)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(reports, out)
    sens = phase_sensitivity(reports)
    _emit({"rows": len(reports),
           **{k: summarize([getattr(r, k) for r in reports]) for k in ("dice", "hd95_mm", "assd_mm", "rel_bold_error")},
           "sensitivity": {m: sens.mean(m) for m in ("dice", "hd95_mm", "assd_mm", "rel_bold_error")},
           "sensitivity_subjects": len(sens.per_subject)})


def _series_and_pred(args):
    from .fileio import read_series
    from .timeseries import SeriesPrediction

    s = read_series(_need(args.series, "series manifest"))
    if args.pred:
        pred, _ = read_predictions(args.pred)
    else:
        pred = SeriesPrediction.from_labels(s, args.stride)
    return s, pred


def cmd_consistency(args):
    from .timeseries import consistency

    s, pred = _series_and_pred(args)
    try:
        rep = consistency(s, pred)
    except ValueError as e:
        raise CliError("data", EXIT_DATA, str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(rep.to_dict(), out / "consistency.json")
    _emit({"pairs": len(rep.pairs), "summary": rep.summary})


def cmd_hyperoxia(args):
    from .timeseries import consistency, oxygenation_response, write_trace_csv

    s, pred = _series_and_pred(args)
    try:
        rep = oxygenation_response(s, pred, args.plateau, args.baseline_window)
    except ValueError as e:
        raise CliError("data", EXIT_DATA, str(e)) from None
    cons = consistency(s, pred) if len(pred.indices) > 1 else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(rep.to_dict(), out / "hyperoxia.json")
    write_trace_csv(s, pred, rep, cons, out / "trace.csv")
    _emit({"b_N": rep.b_N, "b_H": rep.b_H, "delta_b": rep.delta_b})


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker/thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bwseg", description="Boundary-weighted placenta segmentation pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("phantom", parents=[common], help="generate phantom series or a dataset")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_phantom)

    q = sub.add_parser("preprocess", parents=[common], help="split, resample, normalize, crop/pad")
    q.add_argument("--in", dest="input", required=True, help="volume file or series manifest")
    q.add_argument("--label", help="label aligned with --in (single volume mode)")
    q.add_argument("--out", required=True)
    q.add_argument("--which", type=int, choices=(0, 1), default=0, help="which interleaved half to keep")
    q.add_argument("--no-split", action="store_true")
    q.add_argument("--target-spacing", type=float, nargs=3, default=None)
    q.add_argument("--no-normalize", action="store_true")
    q.add_argument("--dims", type=int, nargs=3, default=None)
    q.add_argument("--format", choices=(".raw", ".nii"), default=".raw")
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("boundary", parents=[common], help="weight map, band and signed distance of a label")
    q.add_argument("--label", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--w1", type=float, default=40.0)
    q.add_argument("--w2", type=float, default=1.0)
    q.add_argument("--K", "-K", type=int, default=11)
    q.add_argument("--metric", choices=("voxel", "mm"), default="voxel")
    q.set_defaults(func=cmd_boundary)

    q = sub.add_parser("augment-preview", parents=[common], help="write augmented copies of a labeled frame")
    q.add_argument("--series", required=True)
    q.add_argument("--frame", type=int, required=True)
    q.add_argument("--config")
    q.add_argument("--n", type=int, default=4)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_augment_preview)

    q = sub.add_parser("train", parents=[common], help="train a network")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--loss", choices=("ce", "dice", "focal", "ce+dice", "focal+dice", "bw-ce", "bw-focal",
                                      "bw-ce+dice", "bw-focal+dice"))
    q.add_argument("--epochs", type=int)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("segment", parents=[common], help="segment every stride-th frame of a series")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--stride", type=int, default=2)
    q.add_argument("--format", choices=(".raw", ".nii"), default=".raw")
    q.set_defaults(func=cmd_segment)

    q = sub.add_parser("evaluate", parents=[common], help="metrics of predictions against labeled frames")
    q.add_argument("--pred", required=True, nargs="+")
    q.add_argument("--gt", required=True, nargs="+")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_evaluate)

    for name, func, what in (("consistency", cmd_consistency, "consecutive-frame consistency"),
                             ("hyperoxia", cmd_hyperoxia, "hyperoxia response of the mean signal")):
        q = sub.add_parser(name, parents=[common], help=what)
        q.add_argument("--series", required=True)
        q.add_argument("--pred", help="predictions directory; ground-truth labels if omitted")
        q.add_argument("--stride", type=int, default=2, help="stride over labels when --pred is omitted")
        q.add_argument("--out", required=True)
        if name == "hyperoxia":
            q.add_argument("--plateau", type=int, default=10)
            q.add_argument("--baseline-window", type=int, default=None)
        q.set_defaults(func=func)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .fileio import FormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        import torch

        torch.set_num_threads(max(1, args.threads))
        args.func(args)
        return EXIT_OK
    except CliError as e:
        err = e
    except FileNotFoundError as e:
        err = CliError("missing_file", EXIT_MISSING, str(e))
    except FormatError as e:
        err = CliError("data", EXIT_DATA, str(e))
    except ValueError as e:
        err = CliError("data", EXIT_DATA, str(e))
    except Exception as e:  # noqa: BLE001
        err = CliError("internal", EXIT_INTERNAL, f"{type(e).__name__}: {e}")
    sys.stderr.write(json.dumps({"error": err.kind, "exit_code": err.code, "message": str(err)}) + "\n")
    return err.code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
