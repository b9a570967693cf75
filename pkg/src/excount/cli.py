"""Command-line entry point.

Subcommands: ``synth`` (generate a dataset), ``train``, ``eval``, ``count``
(one image), and ``gradcheck`` (verify every backward pass). Defaults can come
from an INI config file whose sections match the command names; explicit flags
win over file values, and the fully resolved configuration is written next to
the outputs so any run can be reproduced exactly.

Exit codes: 0 on success; 1 with a single ``error: <reason>`` line on stderr
otherwise.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, mixed_scale_config, tiny_config
from .data import (
    load_dataset,
    load_sample,
    build_synthetic_dataset,
    make_splits,
    resize_shortest_side,
    write_splits,
)
from .geometry import build_exemplar_set
from .imageops import bilinear_resize, to_float
from .metrics import compute_metrics, stratify_by_exemplar_scale, throughput
from .model import CountingModel
from .normalizer import save_count_map
from .optim import AdamW
from .presets import PRESETS
from .selfcheck import run_all_checks
from .training import TrainConfig, TrainingDiverged, fit, predict_counts
from .visualizer import render, visualize

MODEL_PRESETS = {
    "tiny": tiny_config,
    "mixed": mixed_scale_config,
    "full": ModelConfig,
}


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("EXCOUNT_OUT_ROOT", "runs"))
        out = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, values: dict) -> None:
    cp = configparser.ConfigParser()
    cp[command] = {k: str(v) for k, v in values.items() if v is not None}
    with open(out / "run_config.ini", "w") as fh:
        cp.write(fh)


def _file_defaults(config_path: str | None, section: str) -> dict:
    if not config_path:
        return {}
    cp = configparser.ConfigParser()
    read = cp.read(config_path)
    if not read:
        raise FileNotFoundError(f"config file not found: {config_path}")
    return dict(cp[section]) if cp.has_section(section) else {}


def _cast_like(default, raw: str):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if default is not None:
        return type(default)(raw)
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def _merge(args: argparse.Namespace, parser_defaults: dict, file_vals: dict) -> None:
    # precedence: explicit flag > config file > built-in default
    for key, filed in file_vals.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            continue
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, _cast_like(parser_defaults.get(attr), filed))


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    if args.preset not in PRESETS:
        raise ValueError(f"unknown preset {args.preset!r}; options: {sorted(PRESETS)}")
    out = _out_dir(args, "synth")
    categories = PRESETS[args.preset]()
    records = build_synthetic_dataset(out, categories, args.n, args.seed)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    names = ("train", "val") if len(ratios) == 2 else ("train", "val", "test")
    splits = make_splits(records, ratios, args.seed, names=names,
                         category_disjoint=args.category_disjoint)
    write_splits(splits, out)
    _write_resolved(out, "synth", vars(args))
    counts = {k: len(v) for k, v in splits.items()}
    print(f"wrote {len(records)} scenes to {out} (splits: {counts})")
    return 0


# -- train ------------------------------------------------------------------------


def _load_split_samples(data_dir: Path, split: str, image_size: int):
    anns = load_dataset(data_dir, split)
    samples = []
    for a in anns:
        s = load_sample(data_dir, a)
        samples.append(resize_shortest_side(s, image_size))
    return samples


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    mcfg = MODEL_PRESETS[args.model_preset]()
    tcfg = TrainConfig(
        base_lr=args.lr,
        epochs=args.epochs,
        weight_decay=args.weight_decay,
        mosaic_prob=args.mosaic_prob,
        seed=args.seed,
    )
    out = _out_dir(args, "train")
    train_samples = _load_split_samples(data_dir, args.train_split, mcfg.image_size)
    val_samples = _load_split_samples(data_dir, args.val_split, mcfg.image_size)

    model = CountingModel(mcfg, seed=args.seed)
    opt = AdamW(model.parameters(), weight_decay=tcfg.weight_decay)
    start_epoch = 0
    if args.resume:
        ck_cfg, arrays, extra = load_checkpoint(args.resume)
        if ck_cfg.to_dict() != mcfg.to_dict():
            raise ValueError("checkpoint model config does not match --model-preset")
        model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt/")})
        opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("opt/")})
        start_epoch = int(extra.get("epoch", -1)) + 1

    def checkpoint_cb(kind: str, info: dict):
        if kind == "best":
            save_checkpoint(out / "best.ckpt", mcfg, model.state_arrays(),
                            extra={"epoch": info["epoch"], "val_mae": info["val_mae"],
                                   "train": tcfg.to_dict()})
        else:
            arrays = model.state_arrays()
            arrays.update(info["opt"].state_arrays())
            save_checkpoint(out / "last.ckpt", mcfg, arrays,
                            extra={"epoch": info["epoch"], "train": tcfg.to_dict()})

    _write_resolved(out, "train", vars(args))
    try:
        result = fit(train_samples, val_samples, model, tcfg, out_dir=out,
                     checkpoint_cb=checkpoint_cb, start_epoch=start_epoch,
                     end_epoch=args.stop_after, optimizer=opt)
    except TrainingDiverged as e:
        print(f"error: {e}; last good checkpoint kept at {out / 'last.ckpt'}", file=sys.stderr)
        return 1
    save_checkpoint(out / "final.ckpt", mcfg, result.final_state,
                    extra={"epoch": tcfg.epochs - 1, "train": tcfg.to_dict()})
    for rec in result.history[-3:]:
        print(f"epoch {rec.epoch}: loss={rec.train_loss:.5f} val_mae={rec.val_mae:.3f}")
    print(f"best val MAE {result.best_val_mae:.3f} at epoch {result.best_epoch}; "
          f"checkpoints in {out}")
    return 0


# -- eval --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    mcfg, arrays, _ = load_checkpoint(args.checkpoint)
    model = CountingModel(mcfg, seed=0)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt/")})
    samples = _load_split_samples(Path(args.data), args.split, mcfg.image_size)
    out = _out_dir(args, "eval")
    report_lines = [f"model: {model.parameter_count()} parameters"]
    payload: dict = {"shots": args.shots, "parameters": model.parameter_count()}

    if args.shots == 3:
        preds, gts = predict_counts(model, samples)
        rep = compute_metrics(preds, gts)
        report_lines.append("3-shot: " + rep.format_line())
        payload["metrics"] = rep.to_dict()
        scale_priors = [
            build_exemplar_set(s.exemplar_image, s.boxes, mcfg.exemplar_size).scale_prior
            for s in samples
        ]
        small, large = stratify_by_exemplar_scale(
            scale_priors, preds, gts, small_max=args.small_max, large_min=args.large_min
        )
        for rep_s in (small, large):
            if rep_s is not None:
                report_lines.append("stratum " + rep_s.format_line())
                payload.setdefault("strata", []).append(rep_s.to_dict())
    else:
        per_exemplar = []
        max_l = max(len(s.boxes) for s in samples)
        for ei in range(max_l):
            preds, gts = predict_counts(model, samples, exemplar_index=ei)
            per_exemplar.append(compute_metrics(preds, gts))
        maes = [r.mae for r in per_exemplar]
        rmses = [r.rmse for r in per_exemplar]
        report_lines.append(
            f"1-shot over {len(per_exemplar)} exemplar choices: "
            f"MAE={np.mean(maes):.4f}±{np.std(maes):.4f} "
            f"RMSE={np.mean(rmses):.4f}±{np.std(rmses):.4f}"
        )
        payload["metrics_per_exemplar"] = [r.to_dict() for r in per_exemplar]

    if args.fps:
        probe = samples[0]
        exset = build_exemplar_set(probe.exemplar_image, probe.boxes, mcfg.exemplar_size)
        tp = throughput(lambda: model.infer(probe.image, exset), warmup=args.fps_warmup,
                        iters=args.fps_iters)
        report_lines.append(tp.format_line())
        payload["fps"] = tp.fps
        payload["ms_per_frame"] = tp.ms_per_frame

    _write_resolved(out, "eval", vars(args))
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    for line in report_lines:
        print(line)
    (out / "report.txt").write_text("".join(line + "\n" for line in report_lines))
    return 0


# -- count ---------------------------------------------------------------------------


def _parse_boxes(spec: str) -> list[tuple[float, float, float, float]]:
    boxes = []
    for part in spec.split(";"):
        vals = [float(v) for v in part.split(",")]
        if len(vals) != 4 or vals[2] <= vals[0] or vals[3] <= vals[1]:
            raise ValueError(f"malformed box {part!r}; expected x1,y1,x2,y2 with x2>x1, y2>y1")
        boxes.append(tuple(vals))
    if not (1 <= len(boxes) <= 3):
        raise ValueError(f"need 1-3 boxes, got {len(boxes)}")
    return boxes


def cmd_count(args) -> int:
    mcfg, arrays, _ = load_checkpoint(args.checkpoint)
    model = CountingModel(mcfg, seed=0)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt/")})
    with Image.open(args.image) as im:
        raster = to_float(np.asarray(im.convert("RGB")))
    boxes = _parse_boxes(args.boxes)

    # resize shortest side to the model's input size, centre-crop square,
    # and move the boxes through the same transform
    h, w = raster.shape[:2]
    target = mcfg.image_size
    f = target / min(h, w)
    nh, nw = (target, int(round(w * f))) if h <= w else (int(round(h * f)), target)
    raster = bilinear_resize(raster, nh, nw)
    y0 = (nh - target) // 2
    x0 = (nw - target) // 2
    raster = raster[y0 : y0 + target, x0 : x0 + target]
    tboxes = []
    for b in boxes:
        bb = (b[0] * f - x0, b[1] * f - y0, b[2] * f - x0, b[3] * f - y0)
        if bb[0] < 0 or bb[1] < 0 or bb[2] > target or bb[3] > target:
            raise ValueError(f"box {b} falls outside the model's centre crop")
        tboxes.append(bb)

    exset = build_exemplar_set(raster, tboxes, mcfg.exemplar_size)
    result = model.infer(raster, exset)
    out = _out_dir(args, "count")
    save_count_map(out / "count_map.txt", result.count_map.values)
    for mode in ("detection", "density"):
        vis = visualize(result.count_map, result.attention.match_map, result.magnitude, mode)
        render(vis, raster, str(out / f"{mode}.png"))
    _write_resolved(out, "count", vars(args))
    print(f"count: {result.count:.3f}")
    print(f"branch: {result.branch} (k={mcfg.branch_ks[result.branch - 1]} px, "
          f"scale prior {exset.scale_prior:.2f})")
    print(f"outputs in {out}")
    return 0


# -- gradcheck -----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    reports = run_all_checks(
        eps=args.eps, tol=args.tol, seeds=args.seeds, max_coords=args.max_coords,
        inject_bug=args.inject_bug,
    )
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed "
          f"(eps={args.eps}, tol={args.tol}, seeds={args.seeds})")
    return 1 if failed else 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="excount",
                                description="exemplar-conditioned counting pipeline")
    p.add_argument("--config", help="INI file with per-command default sections")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--out", default=None)
    ps.add_argument("--n", type=int, default=200)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    ps.add_argument("--ratios", default="0.8,0.2")
    ps.add_argument("--category-disjoint", action="store_true")

    pt = sub.add_parser("train", help="train a model on a dataset directory")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", default=None)
    pt.add_argument("--model-preset", default="tiny", choices=sorted(MODEL_PRESETS))
    pt.add_argument("--epochs", type=int, default=30)
    pt.add_argument("--lr", type=float, default=1e-3)
    pt.add_argument("--weight-decay", type=float, default=1e-4)
    pt.add_argument("--mosaic-prob", type=float, default=0.3)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--train-split", default="train.txt")
    pt.add_argument("--val-split", default="val.txt")
    pt.add_argument("--resume", default=None)
    pt.add_argument("--stop-after", type=int, default=None,
                    help="train only the first N epochs of the schedule (resume later)")

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--split", default="val.txt")
    pe.add_argument("--out", default=None)
    pe.add_argument("--shots", type=int, default=3, choices=(1, 3))
    pe.add_argument("--fps", action="store_true", default=True)
    pe.add_argument("--no-fps", dest="fps", action="store_false")
    pe.add_argument("--fps-warmup", type=int, default=3)
    pe.add_argument("--fps-iters", type=int, default=12)
    pe.add_argument("--small-max", type=float, default=32.0)
    pe.add_argument("--large-min", type=float, default=96.0)

    pc = sub.add_parser("count", help="count one image given exemplar boxes")
    pc.add_argument("--checkpoint", required=True)
    pc.add_argument("--image", required=True)
    pc.add_argument("--boxes", required=True,
                    help="x1,y1,x2,y2[;x1,y1,x2,y2...] in original image pixels")
    pc.add_argument("--out", default=None)

    pg = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    pg.add_argument("--eps", type=float, default=1e-5)
    pg.add_argument("--tol", type=float, default=1e-4)
    pg.add_argument("--seeds", type=int, default=5)
    pg.add_argument("--max-coords", type=int, default=6)
    pg.add_argument("--inject-bug", action="store_true")
    return p


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for sp in parser._subparsers._group_actions
                for a in sp.choices[args.command]._actions}
    try:
        file_vals = _file_defaults(args.config, args.command)
        _merge(args, defaults, file_vals)
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 0
    except Exception as e:  # single machine-parsable error line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
