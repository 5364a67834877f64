"""``diffcd`` command line: synth | train-diffusion | train-cd | eval | infer.

Exit codes: 0 ok, 1 I/O or load failure, 2 usage or configuration error,
3 numeric failure (non-finite loss or activations).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from diffcd.cdnet import evaluate, metrics_from_counts, confusion, threshold
from diffcd.cli.checkpoint import dump_json, load_checkpoint, save_checkpoint
from diffcd.cli.config import RunConfig, load_config, parse_config
from diffcd.denoiser import Denoiser
from diffcd.errors import ConfigError, ContractError, LoadError, NumericError, ShapeError
from diffcd.numerics import Rng, Tensor, no_grad
from diffcd.pgm import from_pixels, prob_to_pixels, read_pgm, write_pgm
from diffcd.pipeline import (
    STREAM_INIT, cd_forward, eval_denoise_loss, pair_features, predict, train_cd, train_cd_joint,
    train_diffusion,
)
from diffcd.synthdata import read_dataset, write_dataset

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
TAU_GRID = [round(0.05 * i, 2) for i in range(1, 20)]


def _out(msg: str) -> None:
    print(msg, flush=True)


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is not None:
        cfg.train.seed = seed
    return cfg.validate()


def _split(path, what: str):
    if path is None:
        raise ConfigError(f"no {what} dataset given (flag or data.{what} in the config)")
    pairs = read_dataset(path)
    if not pairs:
        raise LoadError(f"{path}: dataset is empty")
    a = np.stack([p.img_a for p in pairs])
    b = np.stack([p.img_b for p in pairs])
    m = np.stack([p.mask for p in pairs])
    idx = [int(p.meta.get("index", i)) for i, p in enumerate(pairs)]
    return a, b, m, idx


def _load_backbone(path) -> tuple[Denoiser, RunConfig]:
    params, manifest = load_checkpoint(path, "diffusion")
    cfg = parse_config(manifest["config"])
    return Denoiser(cfg.unet_obj(), params), cfg


def _load_models(diffusion_dir, cd_dir):
    model, _ = _load_backbone(diffusion_dir)
    heads, manifest = load_checkpoint(cd_dir, "cd")
    cfg = parse_config(manifest["config"])
    backbone = {k[9:]: v for k, v in heads.items() if k.startswith("backbone.")}
    if backbone:
        model = Denoiser(model.cfg, backbone)
    heads = {k: v for k, v in heads.items() if not k.startswith("backbone.")}
    return model.frozen(), heads, cfg


# commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    scene = cfg.scene_obj(args.seed)
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    write_dataset(scene, args.count, args.out)
    _out(str(Path(args.out) / "manifest.json"))
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    if args.steps is not None:
        cfg.train.steps = args.steps
    cfg.validate()
    a, b, _, _ = _split(args.data or cfg.data.train, "train")
    images = np.concatenate([a, b], axis=0)
    schedule = cfg.schedule_obj()
    model = Denoiser.create(cfg.unet_obj(), Rng(cfg.train.seed).fork(STREAM_INIT))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    initial = eval_denoise_loss(model, images, schedule, seed=cfg.train.seed)
    losses = train_diffusion(model, images, schedule, cfg.train.steps, batch=cfg.train.batch,
                             lr=cfg.train.lr, seed=cfg.train.seed)
    final = eval_denoise_loss(model, images, schedule, seed=cfg.train.seed)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows([i, repr(v)] for i, v in enumerate(losses))
    save_checkpoint(out, "diffusion", model.params, cfg.to_dict(),
                    {"eval_loss": {"initial": initial, "final": final}})
    _out(f"eval loss {initial:.6f} -> {final:.6f} after {cfg.train.steps} steps; checkpoint {out}")
    return EXIT_OK


def cmd_train_cd(args) -> int:
    model, backbone_cfg = _load_backbone(args.diffusion)
    cfg = load_config(args.config) if args.config else backbone_cfg
    # the backbone defines the architecture and schedule
    cfg.unet, cfg.schedule = backbone_cfg.unet, backbone_cfg.schedule
    if args.fdaf is not None:
        cfg.fdaf.mode = "dual" if args.fdaf == "on" else "off"
    if args.epochs is not None:
        cfg.cd.epochs = args.epochs
    cfg = _apply_seed(cfg, args.seed)
    a, b, m, idx = _split(args.data or cfg.data.train, "train")
    val_dir = args.val or cfg.data.val
    val = _split(val_dir, "val") if val_dir else None
    cd = cfg.cd_obj()
    schedule = cfg.schedule_obj()
    ts = cfg.cd.timesteps

    def report(epoch, loss, vf1):
        extra = "" if vf1 is None else f" val_f1 {vf1:.4f}"
        _out(f"epoch {epoch} loss {loss:.6f}{extra}")

    if args.unfreeze:
        heads, history = train_cd_joint(model, a, b, m, ts, schedule, cd,
                                        val=val[:3] if val else None,
                                        backbone_lr_scale=cfg.cd.backbone_lr_scale,
                                        feature_seed=cfg.train.seed, callback=report)
        heads.update({f"backbone.{k}": v for k, v in model.params.items()})
    else:
        frozen = model.frozen()
        fa, fb = pair_features(frozen, a, b, ts, schedule, cfg.train.seed, idx)
        val_feats = None
        if val:
            va, vb = pair_features(frozen, val[0], val[1], ts, schedule, cfg.train.seed, val[3])
            val_feats = (va, vb, val[2])
        heads, history = train_cd(fa, fb, m, cd, val=val_feats, callback=report)
    out = Path(args.out)
    save_checkpoint(out, "cd", heads, cfg.to_dict(), {"history": asdict(history), "unfrozen": bool(args.unfreeze)})
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_f1"])
        for e, loss in enumerate(history.epoch_loss):
            writer.writerow([e, repr(loss), repr(history.val_f1[e]) if history.val_f1 else ""])
    _out(f"checkpoint {out}")
    return EXIT_OK


def _best_tau(probs: np.ndarray, masks: np.ndarray) -> dict:
    best = None
    for tau in TAU_GRID:
        f1 = metrics_from_counts(*confusion(threshold(probs, tau), masks)).f1
        if best is None or f1 > best["f1"]:
            best = {"tau": tau, "f1": f1}
    return best


def cmd_eval(args) -> int:
    out = Path(args.out)
    if args.predictions:
        _, _, masks, idx = _split(args.data, "test")
        preds = np.stack([(read_pgm(Path(args.predictions) / f"M_{i}.pgm")[0] >= 128).astype(np.uint8)
                          for i in idx])
        probs, tau, config, best = None, None, None, None
    else:
        if not args.diffusion or not args.cd:
            raise ConfigError("eval needs --diffusion and --cd checkpoints (or --predictions)")
        model, heads, cfg = _load_models(args.diffusion, args.cd)
        a, b, masks, idx = _split(args.data or cfg.data.test, "test")
        cd = cfg.cd_obj()
        tau = cd.tau if args.tau is None else args.tau
        fa, fb = pair_features(model, a, b, cfg.cd.timesteps, cfg.schedule_obj(), cfg.train.seed, idx)
        probs = predict(heads, fa, fb, cd, masks.shape[-1])
        preds = threshold(probs, tau)
        config = cfg.to_dict()
        best = _best_tau(probs, masks)
    overall = evaluate(preds, masks, tau)
    per_sample = [{"index": i, **evaluate(p, t, tau).to_dict()} for i, p, t in zip(idx, preds, masks)]
    report = {"metrics": overall.to_dict(), "best_tau": best, "per_sample": per_sample,
              "count": len(idx), "config": config}
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report)
    if args.heatmaps:
        if probs is None:
            raise ConfigError("--heatmaps needs model predictions, not --predictions")
        for i, p in zip(idx, probs):
            write_pgm(out / f"heat_{i}.pgm", prob_to_pixels(p))
    _out(f"f1 {overall.f1:.4f} iou {overall.iou:.4f} oa {overall.oa:.4f}; report {out / 'report.json'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    pa, ma = read_pgm(args.a)
    pb, mb = read_pgm(args.b)
    if pa.shape != pb.shape:
        raise ShapeError(f"image extents differ: {args.a} is {pa.shape}, {args.b} is {pb.shape}")
    model, heads, cfg = _load_models(args.diffusion, args.cd)
    if args.seed is not None:
        cfg.train.seed = args.seed
    a = from_pixels(pa, ma)[None, None]
    b = from_pixels(pb, mb)[None, None]
    cd = cfg.cd_obj()
    tau = cd.tau if args.tau is None else args.tau
    fa, fb = pair_features(model, a, b, cfg.cd.timesteps, cfg.schedule_obj(), cfg.train.seed)
    with no_grad():
        cmap, fused = cd_forward(heads, fa, fb, cd, pa.shape[-1])
    prob = cmap.prob[0, 0]
    mask = threshold(prob, tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "mask.pgm", mask.astype(np.int64) * 255)
    write_pgm(out / "heatmap.pgm", prob_to_pixels(prob))
    for lvl, (flow_ab, _) in enumerate(fused.flows):
        mag = np.sqrt((flow_ab.data[0] ** 2).sum(axis=0))
        bound = cd.max_flow * flow_ab.shape[-1] / pa.shape[-1]
        write_pgm(out / f"flow_l{lvl}.pgm", np.rint(np.clip(mag / bound, 0, 1) * 255).astype(np.int64))
    _out(f"changed fraction {mask.mean():.4f}; outputs in {out}")
    return EXIT_OK


# argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="diffcd", description="Diffusion-feature change detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--count", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-diffusion", parents=[common], help="pretrain the denoiser")
    p.add_argument("--data", help="dataset directory (default: data.train)")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("train-cd", parents=[common], help="train alignment and change heads")
    p.add_argument("--diffusion", required=True, help="diffusion checkpoint directory")
    p.add_argument("--data", help="training dataset (default: data.train)")
    p.add_argument("--val", help="validation dataset (default: data.val)")
    p.add_argument("--fdaf", choices=["on", "off"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--unfreeze", action="store_true", help="fine-tune the denoiser jointly")
    p.set_defaults(func=cmd_train_cd)

    p = sub.add_parser("eval", parents=[common], help="evaluate on a labelled split")
    p.add_argument("--diffusion")
    p.add_argument("--cd")
    p.add_argument("--data", help="test dataset (default: data.test of the CD run)")
    p.add_argument("--tau", type=float)
    p.add_argument("--heatmaps", action="store_true")
    p.add_argument("--predictions", help="directory of M_<i>.pgm masks to score instead of a model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict the change mask of one pair")
    p.add_argument("--diffusion", required=True)
    p.add_argument("--cd", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"diffcd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"diffcd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, OSError) as exc:
        print(f"diffcd: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
