"""Command line entry point: ``pisnet <synth|pretrain|train|eval|sweep|ablate|visualize>``.

Every command takes an optional JSON config file (``--config``) with
``synth`` and ``train`` sections; explicit flags and ``--set key=value``
overrides win over file values. The effective config is echoed as
``config.json`` into the run's output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data_pipeline import SynthConfig, load_image, read_manifest, write_dataset
from .errors import (
    BatchError, CheckpointError, ConfigError, ContractError, GenerationError, IngestionError,
    LayoutError, NumericError, ProtocolError, ShapeError,
)
from .evaluation import VARIANTS, ablation_run, evaluate, sweep
from .model_core import qgab_forward
from .training import (
    MetricsLog, TrainConfig, load_checkpoint, pretrain_backbone, pretrain_state, save_checkpoint,
    train_qgab,
)

log = logging.getLogger("pisnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_DATA_ERRORS = (OSError, IngestionError, GenerationError, LayoutError, ShapeError, ProtocolError,
                BatchError, CheckpointError, ContractError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``section.key=value`` overrides (value parsed as JSON when possible)."""
    cfg = json.loads(json.dumps(cfg))
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p} is not a section")
        node[leaf] = _parse_value(value)
    return cfg


def _section(cfg: dict, name: str, cls):
    values = dict(cfg.get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {name} option(s): {sorted(unknown)}")
    if cls is SynthConfig and "multi_scale" in values:
        values["multi_scale"] = tuple(values["multi_scale"])
    if cls is TrainConfig:
        return TrainConfig.from_dict(values)
    return cls(**values)


def echo_config(out: Path, cfg: dict, **sections):
    out.mkdir(parents=True, exist_ok=True)
    effective = dict(cfg)
    for name, obj in sections.items():
        effective[name] = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    with open(out / "config.json", "w") as f:
        json.dump(effective, f, indent=2, sort_keys=True)
        f.write("\n")
    return effective


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma separated list of numbers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_FLAG_TYPES = {"int": int, "float": float, "str": str, "bool": _bool}


def add_dataclass_flags(parser, cls, section: str, skip=()):
    """One ``--field-name`` flag per scalar field of ``cls``, stored as ``section__field``."""
    for f in dataclasses.fields(cls):
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if f.name in skip or kind not in _FLAG_TYPES:
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f"{section}__{f.name}",
                            type=_FLAG_TYPES[kind], metavar=kind.upper())


def collect_flags(args, cfg: dict) -> dict:
    """Fold explicit dataclass flags (and ``--seed``) into ``cfg``; flags win."""
    for key, value in vars(args).items():
        if "__" in key and value is not None:
            section, name = key.split("__", 1)
            cfg.setdefault(section, {})[name] = value
    if getattr(args, "seed", None) is not None:
        for section in ("synth", "train"):
            cfg.setdefault(section, {})["seed"] = args.seed
    return cfg


def _train_config(args, cfg: dict) -> TrainConfig:
    return _section(cfg, "train", TrainConfig)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    synth = _section(cfg, "synth", SynthConfig)
    out = Path(args.out)
    manifest = write_dataset(synth, out)
    echo_config(out, cfg, synth=synth)
    log.info("wrote %d entries to %s", len(manifest.entries), out)
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    tcfg = dataclasses.replace(_train_config(args, cfg), stage="pretrain")
    out = Path(args.out)
    echo_config(out, cfg, train=tcfg)
    manifest = read_manifest(args.manifest)
    metrics = MetricsLog(out / "metrics.jsonl")
    model = pretrain_backbone(manifest, tcfg, metrics=metrics)
    save_checkpoint(pretrain_state(model, tcfg), out / "backbone.pt")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out)
    manifest = read_manifest(args.manifest)
    if args.resume:
        state = load_checkpoint(args.resume)
        tcfg = state.cfg
        echo_config(out, cfg, train=tcfg)
        state.metrics = MetricsLog(out / "metrics.jsonl", append=True)
        model = state.model
    else:
        if not args.backbone:
            raise UsageError("train needs --backbone (a pretrain checkpoint) or --resume")
        base = load_checkpoint(args.backbone)
        cfg["train"] = {**base.cfg.to_dict(), **cfg.get("train", {}), "stage": "qgab"}
        tcfg = _train_config(args, cfg)
        echo_config(out, cfg, train=tcfg)
        model = base.model
        state = None
    ckpt = out / "checkpoint.pt"
    # checkpoints only ever hold completed epochs; a failing epoch leaves the last one intact
    state = train_qgab(manifest, model, tcfg, state=state,
                       metrics=None if state else MetricsLog(out / "metrics.jsonl"),
                       on_epoch_end=lambda s: save_checkpoint(s, ckpt))
    save_checkpoint(state, ckpt)
    return EXIT_OK


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def cmd_eval(args, cfg: dict) -> int:
    state = load_checkpoint(args.ckpt)
    manifest = read_manifest(args.manifest)
    use_qgab = state.model.qgab_trained and not args.plain
    report, _ = evaluate(state.model, manifest, state.cfg.image_size, use_qgab, args.rerank_top,
                         args.max_rank)
    payload = {"checkpoint": str(args.ckpt), "manifest": str(args.manifest), "use_qgab": use_qgab,
               "rerank_top": args.rerank_top, **report.to_dict()}
    if args.report:
        _write_json(args.report, payload)
    print(json.dumps(report.summary()))
    return EXIT_OK


def _backbone_for(args, cfg: dict, manifest):
    tcfg = _train_config(args, cfg)
    if args.backbone:
        base = load_checkpoint(args.backbone)
        tcfg = TrainConfig.from_dict({**base.cfg.to_dict(), **cfg.get("train", {}), "stage": "qgab"})
        return base.model, tcfg
    return pretrain_backbone(manifest, tcfg), tcfg


def cmd_sweep(args, cfg: dict) -> int:
    out = Path(args.out)
    manifest = read_manifest(args.manifest)
    model, tcfg = _backbone_for(args, cfg, manifest)
    echo_config(out, cfg, train=tcfg)
    cells = sweep(manifest, _floats(args.alpha), _floats(args.beta), tcfg, model, args.max_rank)
    _write_json(out / "sweep.json", {"cells": cells})
    for c in cells:
        print(f"alpha={c['alpha']:g} beta={c['beta']:g} rank1={c['rank1']:.4f} mAP={c['mAP']:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    out = Path(args.out)
    manifest = read_manifest(args.manifest)
    model, tcfg = _backbone_for(args, cfg, manifest)
    echo_config(out, cfg, train=tcfg)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    results = ablation_run(manifest, variants, tcfg, model, args.max_rank)
    _write_json(out / "ablation.json", {v: r.to_dict() for v, r in results.items()})
    for v, r in results.items():
        s = r.summary()
        print(f"{v:<12} rank1={s['rank1']:.4f} mAP={s['mAP']:.4f}")
    return EXIT_OK


def attention_heatmap(model, query_image: torch.Tensor, gallery_image: torch.Tensor) -> torch.Tensor:
    """Attention of ``gallery_image`` under ``query_image``, upsampled to image size."""
    model.eval()
    with torch.no_grad():
        g = model.features(gallery_image[None])
        q = model.features(query_image[None])
        _, att = qgab_forward(g, q, model.qgab)
        up = F.interpolate(att[:, None], size=gallery_image.shape[-2:], mode="bilinear",
                           align_corners=False)
    return up[0, 0].clamp(0.0, 1.0)


def render_overlay(image: torch.Tensor, heat: torch.Tensor, alpha: float = 0.5) -> np.ndarray:
    """Blend a ``jet`` coloured heatmap (blue low, red high) over an RGB image in [0, 1].

    The colormap spans the absolute attention range [0, 1], so a gallery that
    barely responds to the query stays blue instead of being stretched.
    """
    from matplotlib import colormaps

    colors = colormaps["jet"](heat.numpy())[..., :3]
    rgb = image.permute(1, 2, 0).numpy()
    return np.clip((1 - alpha) * rgb + alpha * colors, 0.0, 1.0)


def cmd_visualize(args, cfg: dict) -> int:
    from PIL import Image

    state = load_checkpoint(args.ckpt)
    size = tuple(state.cfg.image_size)
    query = torch.from_numpy(load_image(args.query, size))
    gallery_raw = Image.open(args.gallery).convert("RGB")
    gallery = torch.from_numpy(load_image(args.gallery, size))
    heat = attention_heatmap(state.model, query, gallery)
    overlay = render_overlay(gallery, heat)
    img = Image.fromarray((overlay * 255).round().astype(np.uint8))
    # written at the gallery file's own resolution
    img = img.resize(gallery_raw.size, Image.BILINEAR)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    img.save(out)
    print(f"attention max={float(heat.max()):.4f} mean={float(heat.mean()):.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file with 'synth' and 'train' sections")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.base_lr=0.01")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pisnet", description="Query-guided person re-id on multi-person galleries.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    add_dataclass_flags(s, SynthConfig, "synth", skip=("seed",))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain the backbone on single crops")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    add_dataclass_flags(s, TrainConfig, "train", skip=("seed",))
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train the attention stage")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--backbone", help="checkpoint written by 'pretrain'")
    s.add_argument("--resume", help="checkpoint written by an interrupted 'train'")
    add_dataclass_flags(s, TrainConfig, "train", skip=("seed",))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--rerank-top", type=int)
    s.add_argument("--max-rank", type=int, default=20)
    s.add_argument("--report")
    s.add_argument("--plain", action="store_true", help="score without query guidance")
    s.set_defaults(func=cmd_eval)

    for name, func, text in (("sweep", cmd_sweep, "loss weight grid"),
                             ("ablate", cmd_ablate, "component ablation")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--manifest", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--backbone", help="pretrain checkpoint; pretrains afresh when omitted")
        s.add_argument("--max-rank", type=int, default=20)
        add_dataclass_flags(s, TrainConfig, "train", skip=("seed",))
        if name == "sweep":
            s.add_argument("--alpha", default="0,0.5,1,1.5,2")
            s.add_argument("--beta", default="0,0.25,0.5,0.75,1")
        else:
            s.add_argument("--variants", help=f"comma separated subset of {','.join(VARIANTS)}")
        s.set_defaults(func=func)

    s = sub.add_parser("visualize", parents=[common], help="attention heatmap of one pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = collect_flags(args, apply_overrides(load_config(args.config), args.set))
        return args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"pisnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"pisnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"pisnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
