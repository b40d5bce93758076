"""Command-line entry point: synth, train, infer, eval, ablate.

Configs are JSON files whose keys mirror the owning dataclasses; flags
override file values, unknown keys are rejected, and every command writes
the fully materialized settings to resolved-config.json in its output
directory. Progress goes to stderr; machine-readable output only to files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, MissingInput, VwsegError

log = logging.getLogger("vwseg")

_EXIT_CONFIG = 2
_EXIT_MISSING = 3
_EXIT_DATA = 4


def _configure_threads() -> None:
    # must run before numpy is first imported to take effect
    cap = os.environ.get("VWV_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return doc


def _build_dataclass(cls, mapping: dict, label: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown {label} config keys: {', '.join(unknown)}")
    try:
        return cls(**mapping)
    except TypeError as e:
        raise ConfigError(f"bad {label} config: {e}") from e


def _write_resolved(out_dir, doc: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from . import synth

    doc = _load_config_file(args.config)
    num_videos = doc.pop("num_videos", 4)
    prefix = doc.pop("prefix", "video")
    if args.videos is not None:
        num_videos = args.videos
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.frames is not None:
        doc["num_frames"] = args.frames
    if "resolution" in doc:
        doc["resolution"] = tuple(doc["resolution"])
    if "occlusion" in doc:
        doc["occlusion"] = [tuple(o) for o in doc["occlusion"]]
    cfg = _build_dataclass(synth.SynthConfig, doc, "synth")

    out = Path(args.out)
    records = synth.generate_dataset(out, cfg, num_videos, prefix=prefix)
    resolved = dataclasses.asdict(cfg)
    resolved["resolution"] = list(cfg.resolution)
    resolved["occlusion"] = [list(o) for o in cfg.occlusion]
    resolved["num_videos"] = num_videos
    resolved["prefix"] = prefix
    _write_resolved(out, resolved)
    log.info("wrote %d videos under %s", len(records), out)
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from . import dataio, encoder, figures, metatrain

    doc = _load_config_file(args.config)
    enc_doc = doc.pop("encoder", {})
    if not isinstance(enc_doc, dict):
        raise ConfigError("'encoder' must be a JSON object")
    if args.episodes is not None:
        doc["episodes"] = args.episodes
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = _build_dataclass(metatrain.TrainConfig, doc, "train")
    enc_cfg = _build_dataclass(encoder.EncoderConfig, enc_doc, "encoder")

    dataset = [dataio.load_video(r) for r in dataio.scan_dataset(args.data)]
    out = Path(args.out)
    _write_resolved(out, {**dataclasses.asdict(cfg),
                          "encoder": dataclasses.asdict(enc_cfg)})
    params, trace = metatrain.meta_train(
        dataset, cfg, encoder_config=enc_cfg,
        checkpoint_dir=out if cfg.checkpoint_every > 0 else None)
    encoder.save_checkpoint(params, out / "checkpoint")
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, f"{v:.8f}"])
    if trace:
        figures.save_loss_curve(trace, out / "loss_curve.png")
    log.info("saved checkpoint to %s after %d episodes", out / "checkpoint",
             len(trace))
    return 0


# ---------------------------------------------------------------- infer

def _format_per_class(d: dict) -> str:
    return ";".join(f"{c}:{d[c]}" for c in sorted(d))


def _write_adapt_log(path, logbook) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "round", "regions_removed", "words_before",
                    "words_after", "proposed", "accepted"])
        for r in logbook.records:
            w.writerow([r.frame_index, r.round_index, r.regions_removed,
                        r.words_before, r.words_after,
                        _format_per_class(r.proposed),
                        _format_per_class(r.accepted)])


def _write_timing(path, seconds) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "seconds"])
        for t, s in enumerate(seconds):
            w.writerow([t, f"{s:.6f}"])


def cmd_infer(args) -> int:
    from . import adapt, dataio, dictionary, encoder

    doc = _load_config_file(args.adapt_config)
    dict_doc = doc.pop("dictionary", {})
    if not isinstance(dict_doc, dict):
        raise ConfigError("'dictionary' must be a JSON object")
    if args.delta is not None:
        doc["delta"] = args.delta
    if args.alpha is not None:
        doc["alpha"] = args.alpha
    if args.k is not None:
        dict_doc["k_foreground"] = args.k
    acf = _build_dataclass(adapt.AdaptConfig, doc, "adapt")
    dcfg = _build_dataclass(dictionary.DictionaryConfig, dict_doc, "dictionary")

    params = encoder.load_checkpoint(args.checkpoint)
    rec = dataio.scan_video(args.video)
    video = dataio.load_video(rec)
    out = Path(args.out)
    _write_resolved(out, {**dataclasses.asdict(acf),
                          "dictionary": dataclasses.asdict(dcfg),
                          "bbox": bool(args.bbox)})

    emb0 = encoder.encode(params, video.frames[0], video=rec.name, frame_index=0)
    if args.bbox:
        if video.boxes is None:
            raise MissingInput(f"{rec.root}: bbox_00000.txt required for --bbox")
        dict0 = adapt.init_from_bbox(emb0, video.boxes, dcfg, acf)
        first_mask = None
    else:
        if 0 not in video.masks:
            raise MissingInput(f"{rec.root}: mask_00000.pgm required")
        first_mask = video.masks[0]
        dict0 = dictionary.build_dictionary(emb0, first_mask, dcfg)

    preds, logbook, dict_final = adapt.run_video(
        params, dict0, video.frames, first_mask, acf, video=rec.name)
    for t, pred in enumerate(preds):
        dataio.write_mask(out / f"mask_{t:05d}.pgm", pred)
    _write_adapt_log(out / "adapt_log.csv", logbook)
    _write_timing(out / "timing.csv", logbook.frame_seconds)
    log.info("%s: %d frames, words %d -> %d, %d adaptation rounds",
             rec.name, len(preds), len(dict0), len(dict_final),
             len(logbook.records))
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    from . import figures, metrics

    report = metrics.evaluate_run(args.pred, args.gt, tolerance=args.tolerance,
                                  include_timing=args.timing)
    out = Path(args.out)
    _write_resolved(out, {
        "pred": str(args.pred),
        "gt": str(args.gt),
        "tolerance": report.boundary_tolerance,
        "include_timing": bool(args.timing),
    })
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    report.write_per_frame_csv(out / "per_frame.csv")
    figures.save_iou_curves(report, out / "iou_curves.png")
    log.info("dataset J %.4f F %.4f J&F %.4f over %d objects",
             report.dataset_j, report.dataset_f, report.dataset_jf,
             len(report.objects))
    return 0


# ---------------------------------------------------------------- ablate

_SWEEP_DEFAULTS = {
    "k": ["1", "2", "4", "8", "16"],
    "delta": ["NA", "10", "5", "2", "1"],
    "alpha": ["0.1", "0.25", "0.5", "1.0", "2.0"],
    "repr": ["prototype", "nearest", "words"],
}


def _nearest_dictionary(emb0, mask, dcfg):
    """Every support pixel becomes its own word (k = n limit)."""
    from . import dictionary as D

    grid = emb0.grid
    h, w, dim = grid.shape
    flat = grid.reshape(-1, dim)
    lab = mask.ravel()
    words = [D.VisualWord(flat[i].copy(), int(lab[i]), 1, 0, 0)
             for i in range(flat.shape[0])]
    return D.Dictionary(words, int(mask.max()), dcfg)


def _setting_for(sweep: str, value: str, dcfg, acf):
    """Per-sweep-value dictionary and adaptation configs."""
    if sweep == "k":
        return (dataclasses.replace(dcfg, k_foreground=int(value)),
                dataclasses.replace(acf, delta=0), "words")
    if sweep == "delta":
        delta = 0 if value == "NA" else int(value)
        if value != "NA" and delta <= 0:
            raise ConfigError(f"delta value must be positive or NA: {value}")
        return dcfg, dataclasses.replace(acf, delta=delta), "words"
    if sweep == "alpha":
        return dcfg, dataclasses.replace(acf, alpha=float(value)), "words"
    if sweep == "repr":
        if value == "prototype":
            return (dataclasses.replace(dcfg, k_foreground=1,
                                        background_multiplier=1),
                    dataclasses.replace(acf, delta=0), "words")
        if value == "nearest":
            return dcfg, dataclasses.replace(acf, delta=0), "nearest"
        if value == "words":
            return dcfg, dataclasses.replace(acf, delta=0), "words"
        raise ConfigError(f"unknown repr value: {value}")
    raise ConfigError(f"unknown sweep: {sweep}")


def _video_scores(params, video, name, dcfg, acf, mode):
    """(J, F, part consistency or None) for one video under one setting."""
    import numpy as np

    from . import adapt, dictionary, encoder, matcher, metrics
    from .errors import EmptyInput, TooFewFrames

    if 0 not in video.masks:
        raise MissingInput(f"{name}: mask_00000.pgm required")
    mask0 = video.masks[0]
    emb0 = encoder.encode(params, video.frames[0], video=name, frame_index=0)
    if mode == "nearest":
        dict0 = _nearest_dictionary(emb0, mask0, dcfg)
    else:
        dict0 = dictionary.build_dictionary(emb0, mask0, dcfg)
    preds, _, _ = adapt.run_video(params, dict0, video.frames, mask0, acf,
                                  video=name)
    classes = sorted(int(v) for v in np.unique(mask0) if v > 0)
    eval_frames = [t for t in sorted(video.masks) if t > 0]
    js, fs = [], []
    for c in classes:
        js.append(float(np.mean([metrics.iou(preds[t], video.masks[t], c)
                                 for t in eval_frames])))
        fs.append(float(np.mean([metrics.boundary_f(preds[t], video.masks[t], c)
                                 for t in eval_frames])))
    pc = None
    part_frames = [t for t in ([0] + eval_frames) if t in video.parts]
    if acf.delta == 0 and 0 in video.parts and len(part_frames) >= 2:
        scores = []
        for c in classes:
            wmaps, pmaps = [], []
            for t in part_frames:
                emb = emb0 if t == 0 else encoder.encode(
                    params, video.frames[t], video=name, frame_index=t)
                wmaps.append(matcher.word_assignment(emb, dict0, class_id=c))
                pmaps.append(np.where(video.masks[t] == c, video.parts[t], 0))
            try:
                scores.append(metrics.part_consistency(wmaps, pmaps))
            except (EmptyInput, TooFewFrames):
                continue
        if scores:
            pc = float(np.mean(scores))
    return float(np.mean(js)), float(np.mean(fs)), pc


def cmd_ablate(args) -> int:
    import numpy as np

    from . import adapt, dataio, dictionary, encoder, figures

    doc = _load_config_file(args.config)
    dict_doc = doc.pop("dictionary", {})
    if not isinstance(dict_doc, dict):
        raise ConfigError("'dictionary' must be a JSON object")
    acf = _build_dataclass(adapt.AdaptConfig, doc, "adapt")
    dcfg = _build_dataclass(dictionary.DictionaryConfig, dict_doc, "dictionary")

    values = (args.values.split(",") if args.values
              else list(_SWEEP_DEFAULTS[args.sweep]))
    params = encoder.load_checkpoint(args.checkpoint)
    videos = [(r.name, dataio.load_video(r, with_parts=True))
              for r in dataio.scan_dataset(args.data)]

    out = Path(args.out)
    _write_resolved(out, {**dataclasses.asdict(acf),
                          "dictionary": dataclasses.asdict(dcfg),
                          "sweep": args.sweep, "values": values})
    rows = []
    for value in values:
        run_dcfg, run_acf, mode = _setting_for(args.sweep, value, dcfg, acf)
        per_j, per_f, per_pc = [], [], []
        for name, video in videos:
            j, f, pc = _video_scores(params, video, name, run_dcfg, run_acf, mode)
            per_j.append(j)
            per_f.append(f)
            if pc is not None:
                per_pc.append(pc)
        rows.append((value, float(np.mean(per_j)), float(np.mean(per_f)),
                     float(np.mean(per_pc)) if per_pc else None))
        log.info("%s=%s: J %.4f F %.4f", args.sweep, value, rows[-1][1],
                 rows[-1][2])

    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "j_mean", "f_mean", "part_consistency"])
        for value, j, fv, pc in rows:
            w.writerow([value, f"{j:.6f}", f"{fv:.6f}",
                        "" if pc is None else f"{pc:.4f}"])
    series = {"J": [r[1] for r in rows], "F": [r[2] for r in rows]}
    if all(r[3] is not None for r in rows):
        series["part consistency / 100"] = [r[3] / 100.0 for r in rows]
    figures.save_sweep([r[0] for r in rows], series, args.sweep,
                       out / "sweep.png", xticks_as_labels=True)
    return 0


# ---------------------------------------------------------------- parser

def _make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vwseg",
        description="Visual-word video object segmentation pipeline.")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=None)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="meta-train the pixel encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="segment one video with a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--adapt-config", default=None)
    i.add_argument("--out", required=True)
    i.add_argument("--bbox", action="store_true",
                   help="initialize from frame-0 boxes instead of the mask")
    i.add_argument("--delta", type=int, default=None)
    i.add_argument("--alpha", type=float, default=None)
    i.add_argument("--k", type=int, default=None,
                   help="foreground words per class")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tolerance", type=int, default=None)
    e.add_argument("--timing", action="store_true",
                   help="fold timing.csv into the report")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one knob and tabulate scores")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--sweep", required=True, choices=sorted(_SWEEP_DEFAULTS))
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--values", default=None,
                   help="comma-separated sweep values overriding the defaults")
    a.set_defaults(fn=cmd_ablate)
    return p


def _fail(exc: Exception, code: int) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    _configure_threads()
    args = _make_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.fn(args) or 0)
    except ConfigError as e:
        return _fail(e, _EXIT_CONFIG)
    except MissingInput as e:
        return _fail(e, _EXIT_MISSING)
    except DataError as e:
        return _fail(e, _EXIT_DATA)
    except VwsegError as e:
        return _fail(e, 1)


if __name__ == "__main__":
    sys.exit(main())
