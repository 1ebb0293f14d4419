"""Command-line entry point: ``comofusion <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.

Configuration is a flat YAML mapping (see ``CONFIG_KEYS``); values from
``--config`` are overridden by ``--set KEY=VALUE`` and then by dedicated flags.
"""
import argparse
import csv
import json
import logging
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__, _kernels
from .errors import ValidationError
from .imgcore import list_images, load_gray, save_gray
from .inference import fuse_pair, load_backbone, load_head, save_fusion
from .metrics import evaluate
from .nets import FusionNetwork
from .schedule import c_out, c_skip, make_schedule
from .training import (
    CMTrainConfig,
    FusionTrainConfig,
    load_cm,
    load_pairs,
    save_cm,
    train_consistency,
    train_fusion,
)

log = logging.getLogger("comofusion")

SCHEDULE_KEYS = ("epsilon", "T", "rho", "N", "sigma_data")
CM_KEYS = ("distance", "huber_c", "ema_mu", "batch_size", "crop", "steps", "lr", "checkpoint_every", "widths")
FUSION_KEYS = ("lambda_tradeoff", "epsilon_div", "batch_size", "lr", "epochs", "crop")
CONFIG_KEYS = (
    ("ir_dir", "vis_dir", "seed", "feature_source")
    + SCHEDULE_KEYS
    + tuple("cm_" + k for k in CM_KEYS)
    + tuple("fusion_" + k for k in FUSION_KEYS)
)


# ---------------------------------------------------------------- config
def load_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a flat mapping")
    return doc


def parse_overrides(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(args):
    cfg = load_config(args.config)
    cfg.update(parse_overrides(args.set))
    for key in ("ir_dir", "vis_dir", "seed", "feature_source"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    unknown = sorted(set(cfg) - set(CONFIG_KEYS))
    if unknown:
        raise ValidationError(f"unknown config keys {unknown}; known keys: {', '.join(CONFIG_KEYS)}")
    cfg.setdefault("seed", 0)
    return cfg


def _section(cfg, prefix, keys):
    return {k: cfg[prefix + k] for k in keys if prefix + k in cfg}


def _build(factory, **kw):
    try:
        return factory(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad config value: {exc}") from exc


def schedule_from(cfg):
    return _build(make_schedule, **{k: cfg[k] for k in SCHEDULE_KEYS if k in cfg})


def cm_config_from(cfg):
    return _build(CMTrainConfig, seed=cfg.get("seed", 0), **_section(cfg, "cm_", CM_KEYS))


def fusion_config_from(cfg):
    return _build(FusionTrainConfig, seed=cfg.get("seed", 0),
                  feature_source=cfg.get("feature_source", "encoder"), **_section(cfg, "fusion_", FUSION_KEYS))


def _require_dirs(cfg):
    for key in ("ir_dir", "vis_dir"):
        if key not in cfg:
            raise ValidationError(f"{key} is required (flag --{key.replace('_', '-')} or config key)")
        if not Path(cfg[key]).is_dir():
            raise FileNotFoundError(f"{key} {cfg[key]} is not a directory")


# ---------------------------------------------------------------- manifest
def _git_describe():
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if res.returncode != 0:
        return None
    return res.stdout.strip() or None


def versions():
    import PIL

    out = {
        "comofusion": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "pillow": PIL.__version__,
        "kernel_backend": _kernels.BACKEND,
    }
    if _kernels.HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


def write_manifest(out_dir, command, argv, config, outputs, extra=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": config.get("seed"),
        "versions": versions(),
        "git_describe": _git_describe(),
        "created_unix": time.time(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def write_loss_csv(path, history, start=1):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in enumerate(history, start):
            w.writerow([k, repr(float(v))])


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_device(name):
    if name not in (None, "cpu"):
        raise ValidationError(f"device {name!r} not supported; this build trains and infers on cpu only")


# ---------------------------------------------------------------- commands
def cmd_train_cm(args, argv):
    cfg = resolve_config(args)
    _require_dirs(cfg)
    if args.steps is not None:
        cfg["cm_steps"] = args.steps
    schedule = schedule_from(cfg)
    tcfg = cm_config_from(cfg)
    pairs = load_pairs(cfg["ir_dir"], cfg["vis_dir"])
    out = _out_dir(args)
    resume = None
    if args.resume:
        resume, meta = load_cm(args.resume, tcfg)
        if meta["schedule"] != schedule.params():
            raise ValidationError(
                f"resume checkpoint schedule {meta['schedule']} differs from configured {schedule.params()}"
            )
    log.info("training consistency model on %d pairs for %d steps", len(pairs), tcfg.steps)
    result = train_consistency(pairs, tcfg, schedule, checkpoint_dir=out, resume=resume)
    ckpt_path = out / "cm.safetensors"
    save_cm(ckpt_path, result, tcfg, schedule)
    loss_path = out / "cm_loss.csv"
    write_loss_csv(loss_path, result.history)
    cfg_echo = {**cfg, **{"cm_" + k: v for k, v in tcfg.to_dict().items()}, **schedule.params()}
    write_manifest(out, "train-cm", argv, cfg_echo, {"checkpoint": ckpt_path, "loss_csv": loss_path})
    print(f"wrote {ckpt_path} ({result.step} steps, final loss {result.history[-1]:.5f})")
    return 0


def cmd_train_fusion(args, argv):
    cfg = resolve_config(args)
    _require_dirs(cfg)
    if args.epochs is not None:
        cfg["fusion_epochs"] = args.epochs
    cm, ck_schedule, cm_meta = load_backbone(args.cm)
    given = {k: cfg[k] for k in SCHEDULE_KEYS if k in cfg}
    if given:
        configured = make_schedule(**{**ck_schedule.params(), **given})
        if configured != ck_schedule:
            print("schedule mismatch between config and checkpoint", file=sys.stderr)
            print(f"  config:     {json.dumps(configured.params(), sort_keys=True)}", file=sys.stderr)
            print(f"  checkpoint: {json.dumps(ck_schedule.params(), sort_keys=True)}", file=sys.stderr)
            raise ValidationError("checkpoint/schedule mismatch")
    fcfg = fusion_config_from(cfg)
    pairs = load_pairs(cfg["ir_dir"], cfg["vis_dir"])
    out = _out_dir(args)
    torch.manual_seed(fcfg.seed)
    head = FusionNetwork(tuple(cm_meta["widths"]))
    log.info("training fusion head (%s features) on %d pairs", fcfg.feature_source, len(pairs))
    result = train_fusion(pairs, cm, head, fcfg, ck_schedule)
    ckpt_path = out / "fusion.safetensors"
    save_fusion(ckpt_path, head, fcfg, ck_schedule, cm_meta, result.history)
    loss_path = out / "fusion_loss.csv"
    write_loss_csv(loss_path, result.history)
    cfg_echo = {**cfg, **{"fusion_" + k: v for k, v in fcfg.to_dict().items()}, **ck_schedule.params()}
    write_manifest(out, "train-fusion", argv, cfg_echo,
                   {"checkpoint": ckpt_path, "loss_csv": loss_path, "cm_checkpoint": args.cm})
    print(f"wrote {ckpt_path} ({len(result.history)} steps, final loss {result.history[-1]:.5f})")
    return 0


def _fuse_jobs(ir, vis, out):
    ir, vis, out = Path(ir), Path(vis), Path(out)
    if ir.is_dir() != vis.is_dir():
        raise ValidationError("--ir and --vis must both be files or both be directories")
    if not ir.is_dir():
        return [(ir, vis, out if out.suffix else out / ir.name)]
    irs, viss = list_images(ir), list_images(vis)
    orphans = sorted(irs.keys() ^ viss.keys())
    if orphans:
        raise ValidationError(f"unpaired files: {orphans}")
    if not irs:
        raise ValidationError(f"no images in {ir}")
    return [(irs[n], viss[n], out / (Path(n).stem + ".png")) for n in sorted(irs)]


def cmd_fuse(args, argv):
    cfg = resolve_config(args)
    cm, schedule, _ = load_backbone(args.cm)
    head, head_meta = load_head(args.fusion)
    source = head_meta["feature_source"]
    if args.feature_source is not None and args.feature_source != source:
        raise ValidationError(f"fusion head was trained on {source} features, not {args.feature_source}")
    if head_meta["schedule"] != schedule.params():
        raise ValidationError(
            f"fusion checkpoint schedule {head_meta['schedule']} differs from backbone {schedule.params()}"
        )
    jobs = _fuse_jobs(args.ir, args.vis, args.out)
    timings = {}
    for ir_path, vis_path, out_path in jobs:
        fused, seconds = fuse_pair(cm, head, load_gray(ir_path), load_gray(vis_path), schedule, source)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_gray(fused, out_path)
        timings[out_path.name] = seconds
        log.info("fused %s in %.4f s", out_path.name, seconds)
    manifest_dir = jobs[0][2].parent
    write_manifest(manifest_dir, "fuse", argv, {**cfg, "feature_source": source},
                   {"images": manifest_dir, "cm_checkpoint": args.cm, "fusion_checkpoint": args.fusion},
                   {"seconds_per_image": timings, "mean_seconds": float(np.mean(list(timings.values())))})
    print(f"fused {len(jobs)} image(s), mean forward time {np.mean(list(timings.values())):.4f} s")
    return 0


def cmd_evaluate(args, argv):
    for d in (args.fused_dir, args.vis_dir, args.ir_dir):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    report = evaluate(args.fused_dir, args.vis_dir, args.ir_dir, method=args.method,
                      dataset=args.dataset, workers=args.workers)
    for err in report.errors:
        print(f"skipped {err['name']}: {err['error']}", file=sys.stderr)
    if not report.records:
        raise ValidationError("no fused/visible/infrared triples could be evaluated")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    if args.csv:
        report.to_csv(args.csv)
    print(json.dumps(report.aggregate, indent=2))
    return 0


def cmd_schedule_dump(args, argv):
    cfg = resolve_config(args)
    s = schedule_from(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "t", "c_skip", "c_out"])
        for i in range(1, s.N + 1):
            t = float(s.t(i))
            w.writerow([i, repr(t), repr(float(c_skip(t, s))), repr(float(c_out(t, s)))])
    print(f"wrote {s.N} rows to {out}")
    return 0


# ---------------------------------------------------------------- parser
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--device", default="cpu", help="only 'cpu' is supported")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="comofusion", description="Consistency-model infrared/visible image fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    tc = sub.add_parser("train-cm", parents=[common], help="stage 1: consistency training")
    tc.add_argument("--ir-dir", dest="ir_dir")
    tc.add_argument("--vis-dir", dest="vis_dir")
    tc.add_argument("--steps", type=int)
    tc.add_argument("--resume", help="stage-1 checkpoint to continue from")
    tc.add_argument("--out", required=True, help="output directory")
    tc.set_defaults(func=cmd_train_cm)

    tf = sub.add_parser("train-fusion", parents=[common], help="stage 2: fusion head training")
    tf.add_argument("--cm", required=True, help="stage-1 checkpoint")
    tf.add_argument("--ir-dir", dest="ir_dir")
    tf.add_argument("--vis-dir", dest="vis_dir")
    tf.add_argument("--epochs", type=int)
    tf.add_argument("--feature-source", dest="feature_source", choices=("encoder", "decoder"))
    tf.add_argument("--out", required=True, help="output directory")
    tf.set_defaults(func=cmd_train_fusion)

    fu = sub.add_parser("fuse", parents=[common], help="fuse an image pair or two directories")
    fu.add_argument("--cm", required=True)
    fu.add_argument("--fusion", required=True)
    fu.add_argument("--ir", required=True, help="infrared image or directory")
    fu.add_argument("--vis", required=True, help="visible image or directory")
    fu.add_argument("--feature-source", dest="feature_source", choices=("encoder", "decoder"))
    fu.add_argument("--out", required=True, help="output PNG path or directory")
    fu.set_defaults(func=cmd_fuse)

    ev = sub.add_parser("evaluate", parents=[common], help="six-metric report over a fused directory")
    ev.add_argument("--fused-dir", required=True)
    ev.add_argument("--vis-dir", required=True)
    ev.add_argument("--ir-dir", required=True)
    ev.add_argument("--method", default="comofusion")
    ev.add_argument("--dataset")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--csv", help="also write per-image CSV here")
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.set_defaults(func=cmd_evaluate)

    sd = sub.add_parser("schedule-dump", parents=[common], help="write (i, t_i, c_skip, c_out) as CSV")
    sd.add_argument("--out", required=True)
    sd.set_defaults(func=cmd_schedule_dump)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_device(args.device)
        return args.func(args, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
