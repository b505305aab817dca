"""Command-line entry point: ``mtcvae <subcommand> [options]``.

Configuration comes from an INI file (sections ``data``, ``model``, ``train``,
``eval``) plus flags.  Every config key is also a flag (``--beta 5``); anything else
can be set with ``--set section.key=value``.  Each run writes
``resolved_config.ini`` next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .datakit import (
    CONTENT, MOTION, N_FOLDS, SPLIT_MODES, Dataset, MovingMNISTConfig, ShapesConfig,
    generate_moving_mnist, generate_moving_shapes, load_dataset, save_dataset, save_videos,
    split_dataset,
)
from .model import ModelConfig

log = logging.getLogger("mtcvae")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class DataSettings:
    generator: str = "shapes"  # shapes | mmnist
    n_videos: int = 2000
    T: int = 16
    H: int = 32
    W: int = 32
    C: int = 1
    n_directions: int = 8
    mnist_images: str = ""
    mnist_labels: str = ""
    split: str = "soft"
    fold: int = 0
    split_seed: int = 0


@dataclass
class EvalSettings:
    fvae_train_votes: int = 800
    fvae_eval_votes: int = 200
    fvae_batch: int = 64
    mig_bins: int = 20
    eval_seed: int = 0
    reenact_pairs: int = 50


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 10.0
    all_pairs: bool = False


@dataclass
class ModelSettings:
    c: int = 5
    O: int = 2
    dim_z: int = 8
    dim_w: int = 4
    beta: float = 1.0
    lam: float = 1.0
    base_filters: int = 8
    partial_r: Optional[int] = None


SECTIONS = {"data": DataSettings, "model": ModelSettings, "train": TrainSettings, "eval": EvalSettings}
KEY_SECTION = {f.name: s for s, cls in SECTIONS.items() for f in fields(cls)}


@dataclass
class ResolvedConfig:
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    warnings: List[str] = field(default_factory=list)

    def model_config(self, dims=None) -> ModelConfig:
        T, H, W, C = dims if dims is not None else (self.data.T, self.data.H, self.data.W, self.data.C)
        return ModelConfig(height=H, width=W, channels=C, **asdict(self.model))

    def train_config(self):
        from .trainer import TrainConfig
        return TrainConfig(partial_r=self.model.partial_r, **asdict(self.train))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {k: "none" if v is None else str(v) for k, v in asdict(getattr(self, name)).items()}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _convert(raw: str, default, name: str):
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if default is None:  # optional int
        if text.lower() in ("", "none"):
            return None
        return int(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _check(cfg: ResolvedConfig) -> List[str]:
    problems = []
    d = cfg.data
    if d.generator not in ("shapes", "mmnist"):
        problems.append(f"data.generator must be 'shapes' or 'mmnist', got {d.generator!r}")
    if d.split not in SPLIT_MODES:
        problems.append(f"data.split must be one of {SPLIT_MODES}, got {d.split!r}")
    if not 0 <= d.fold < N_FOLDS:
        problems.append(f"data.fold must be in [0, {N_FOLDS - 1}]")
    if min(d.n_videos, d.T, d.H, d.W, d.C) < 1:
        problems.append("data dims and n_videos must be positive")
    problems += [f"model: {p}" for p in cfg.model_config().validate()]
    problems += [f"train: {p}" for p in cfg.train_config().validate()]
    e = cfg.eval
    if min(e.fvae_train_votes, e.fvae_eval_votes, e.fvae_batch, e.mig_bins) < 1:
        problems.append("eval: vote counts, batch and bins must be >= 1")
    if e.fvae_batch < 2:
        problems.append("eval.fvae_batch must be >= 2 to estimate a variance")
    return problems


def parse_config(path=None, overrides: Optional[Dict[str, str]] = None) -> ResolvedConfig:
    """Resolve defaults <- config file <- overrides.

    ``overrides`` maps ``key`` or ``section.key`` to a string value.  Unknown keys,
    unparsable values and violated invariants are collected and raised together as
    a ConfigError.
    """
    problems: List[str] = []
    values: Dict[str, Dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            if not cp.read(path):
                raise ConfigError([f"config file {path} not found"])
        except configparser.Error as exc:
            raise ConfigError([f"{path}: {exc}"])
        for section in cp.sections():
            if section not in SECTIONS:
                problems.append(f"unknown section [{section}]")
                continue
            for key, val in cp[section].items():
                values[section][key] = val
    for key, val in (overrides or {}).items():
        if "." in key:
            section, name = key.split(".", 1)
        else:
            section, name = KEY_SECTION.get(key, ""), key
        if section not in SECTIONS:
            problems.append(f"unknown key {key!r}")
            continue
        values[section][name] = str(val)
    resolved = {}
    for section, cls in SECTIONS.items():
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for name, raw in values[section].items():
            if name not in defaults:
                problems.append(f"unknown key {section}.{name}")
                continue
            try:
                kwargs[name] = _convert(raw, defaults[name], f"{section}.{name}")
            except ValueError:
                problems.append(f"{section}.{name}: cannot parse {raw!r} as "
                                f"{type(defaults[name]).__name__ if defaults[name] is not None else 'int or none'}")
        resolved[section] = cls(**kwargs)
    if problems:
        raise ConfigError(problems)
    cfg = ResolvedConfig(**resolved)
    problems = _check(cfg)
    if problems:
        raise ConfigError(problems)
    if cfg.model.O == 1 and cfg.model.lam > 0:
        msg = "O=1 with lam>0: the blind reenactment term is identically zero"
        cfg.warnings.append(msg)
        warnings.warn(msg)
    return cfg


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key")
    g = p.add_argument_group("config keys")
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if f.name == "seed":
                continue
            g.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V",
                           help=f"{section}.{f.name} (default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtcvae", description="Chunk-wise content/motion video VAE")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="render a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dataset")

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)

    def model_cmd(name, help_):
        q = sub.add_parser(name, help=help_)
        _add_config_flags(q)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        return q

    p = model_cmd("reconstruct", "reconstruct videos chunk by chunk")
    p.add_argument("--video", action="append", required=True, help="video id (repeatable)")
    p.add_argument("--grid", help="PNG with one input row and one output row per video")

    p = model_cmd("reenact", "animate a source video with a driving video's motion")
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True)
    p.add_argument("--grid", help="PNG with source, driving and output rows")

    p = model_cmd("traverse", "latent traversals")
    p.add_argument("--video", required=True)
    p.add_argument("--to", help="second video for an interpolation")
    p.add_argument("--subspace", choices=("full", "content", "motion"), default="full")
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--unit", type=int, help="single latent unit to sweep instead")
    p.add_argument("--space", choices=("content", "motion"), default="content")
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--grid", help="PNG with one row per traversal step")

    p = model_cmd("evaluate", "FVAE/MIG/SAP/SSIM/FID over the configured test split")
    p = model_cmd("classify", "downstream linear content and motion accuracy")
    return parser


def _overrides(args) -> Dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError([f"--set expects SECTION.KEY=VALUE, got {item!r}"])
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for name in KEY_SECTION:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            out[name] = v
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = str(args.seed)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args, cfg: ResolvedConfig) -> dict:
    d = cfg.data
    if d.generator == "shapes":
        # default shape sizes are set for 32x32 frames; scale them with the frame
        ratio = min(d.H, d.W) / 32.0
        scales = tuple(s * ratio for s in ShapesConfig.scales)
        shapes = ShapesConfig(n_videos=d.n_videos, T=d.T, H=d.H, W=d.W, C=d.C,
                              n_directions=d.n_directions, scales=scales)
        ds = generate_moving_shapes(shapes, args.seed)
    else:
        if not d.mnist_images or not d.mnist_labels:
            raise ConfigError(["data.mnist_images and data.mnist_labels are required for mmnist"])
        mm = MovingMNISTConfig(n_videos=d.n_videos, T=d.T, H=d.H, W=d.W, n_directions=d.n_directions)
        ds = generate_moving_mnist(d.mnist_images, d.mnist_labels, mm, args.seed)
    for mode in SPLIT_MODES:
        try:
            tr, te = split_dataset(ds, mode, d.fold, d.split_seed)
            ds.splits[f"{mode}/{d.fold}"] = {"train": tr, "test": te}
        except ValueError as exc:
            log.warning("split %s skipped: %s", mode, exc)
    frames, manifest = save_dataset(ds, args.out, args.name)
    return {"manifest": str(manifest), "videos": len(ds)}


def _load_split(cfg: ResolvedConfig, data: Dataset):
    return split_dataset(data, cfg.data.split, cfg.data.fold, cfg.data.split_seed)


def cmd_train(args, cfg: ResolvedConfig) -> dict:
    from .trainer import train
    data = load_dataset(args.data)
    train_ids, test_ids = _load_split(cfg, data)
    mc = cfg.model_config(data.dims)
    tc = cfg.train_config()
    out = Path(args.out)
    model, history = train(data, train_ids, mc, tc, out_dir=out, progress=args.verbose)
    (out / "split.json").write_text(json.dumps({"mode": cfg.data.split, "fold": cfg.data.fold,
                                                "train": train_ids, "test": test_ids}))
    return {"checkpoint": str(out / "checkpoint.mtcv"), "final": history[-1].as_dict()}


def _model_and_data(args):
    from .model import load_checkpoint
    model, mc = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if (mc.height, mc.width, mc.channels) != data.dims[1:]:
        raise ValueError(f"checkpoint expects {mc.height}x{mc.width}x{mc.channels} frames, "
                         f"dataset has {data.dims[1:]}")
    return model.eval(), mc, data


def _video(data: Dataset, vid: str) -> np.ndarray:
    return data.float_frames(data.index_of(vid))


def cmd_reconstruct(args, cfg) -> dict:
    from .inference import reconstruct_video, save_grid_png
    model, mc, data = _model_and_data(args)
    inputs = [_video(data, v) for v in args.video]
    outputs = [reconstruct_video(model, x, mc.c) for x in inputs]
    save_videos(outputs, args.out, "reconstruction", [f"{v}-rec" for v in args.video])
    if args.grid:
        save_grid_png([r for pair in zip(inputs, outputs) for r in pair], args.grid)
    from .metrics import ssim_video
    return {"ssim": {v: ssim_video(x, y) for v, x, y in zip(args.video, inputs, outputs)}}


def cmd_reenact(args, cfg) -> dict:
    from .inference import reenact, save_grid_png
    from .metrics import align_length, ssim_video
    model, mc, data = _model_and_data(args)
    src, drv = _video(data, args.source), _video(data, args.driving)
    out = reenact(model, src, drv, mc.c)
    save_videos([out], args.out, "reenactment", [f"{args.source}-by-{args.driving}"])
    if args.grid:
        save_grid_png([src, drv, out], args.grid)
    return {"ssim_vs_source": ssim_video(align_length(src, out.shape[0]), out)}


def cmd_traverse(args, cfg) -> dict:
    from .inference import DEFAULT_SWEEP, save_grid_png, traverse_between, traverse_unit
    model, mc, data = _model_and_data(args)
    a = _video(data, args.video)
    if args.unit is not None:
        values = args.values or list(DEFAULT_SWEEP)
        rows = traverse_unit(model, a, args.unit, args.space, values, mc.c)
    else:
        if not args.to:
            raise ConfigError(["traverse needs --to VIDEO or --unit N"])
        rows = traverse_between(model, a, _video(data, args.to), args.subspace, args.steps, mc.c)
    save_videos(rows, args.out, "traversal")
    if args.grid:
        save_grid_png(rows, args.grid)
    return {"rows": len(rows)}


def _codes(model, mc, data, ids):
    from .metrics import extract_codes
    return extract_codes(model, data, ids, mc.c)


def cmd_evaluate(args, cfg: ResolvedConfig) -> dict:
    from . import metrics
    from .inference import reconstruct_video, reenact
    model, mc, data = _model_and_data(args)
    _, test_ids = _load_split(cfg, data)
    e = cfg.eval
    table = _codes(model, mc, data, test_ids)
    two = table.two_factor()
    fcfg = metrics.FactorVAEConfig(e.fvae_train_votes, e.fvae_eval_votes, e.fvae_batch)
    notes = {}
    try:
        fvae = metrics.factor_vae_score(metrics.TableSampler(two), 2, fcfg, e.eval_seed, two.codes)
    except ValueError as exc:  # collapsed codes: report and keep scoring the rest
        fvae, notes["fvae"] = None, str(exc)
        log.warning("fvae not computed: %s", exc)
    scores = {
        "fvae": fvae,
        "mig": metrics.mig(two.codes, two.labels, e.mig_bins),
        "sap": metrics.sap(two.codes, two.labels, e.eval_seed),
    }
    if table.labels.shape[1] > 2:
        scores["mig_multi"] = metrics.mig(table.codes, table.labels, e.mig_bins)
        scores["sap_multi"] = metrics.sap(table.codes, table.labels, e.eval_seed)
    real = [_video(data, v) for v in test_ids]
    rec = [reconstruct_video(model, x, mc.c) for x in real]
    scores["ssim_reconstruction"] = float(np.mean([metrics.ssim_video(x, y) for x, y in zip(real, rec)]))
    rng = np.random.default_rng(e.eval_seed)
    n = min(e.reenact_pairs, len(real))
    src_idx = rng.choice(len(real), n, replace=False)
    drv_idx = rng.permutation(src_idx)
    reen = [reenact(model, real[i], real[j], mc.c) for i, j in zip(src_idx, drv_idx)]
    scores["ssim_reenactment"] = float(np.mean(
        [metrics.ssim_video(metrics.align_length(real[i], r.shape[0]), r) for i, r in zip(src_idx, reen)]))
    fa = metrics.pooled_frame_features(real)
    fb = metrics.pooled_frame_features(reen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_features(out / "features_real.bin", fa)
    metrics.write_features(out / "features_reenacted.bin", fb)
    scores["fid_reenactment"] = metrics.fid(fa, fb)
    rows = [{"metric": k, "split": f"{cfg.data.split}/{cfg.data.fold}", "value": v,
             "config": asdict(cfg.eval), **({"note": notes[k]} if k in notes else {})}
            for k, v in scores.items()]
    metrics.write_report(out / "report.json", rows)
    return scores


def cmd_classify(args, cfg: ResolvedConfig) -> dict:
    from . import metrics
    model, mc, data = _model_and_data(args)
    _, test_ids = _load_split(cfg, data)
    two = _codes(model, mc, data, test_ids).two_factor()
    seed = cfg.eval.eval_seed
    scores = {
        "content_accuracy": metrics.downstream_linear_accuracy(two.space(CONTENT), two.labels[:, 0], seed),
        "motion_accuracy": metrics.downstream_linear_accuracy(two.space(MOTION), two.labels[:, 1], seed),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out / "classify.json",
                         [{"metric": k, "split": f"{cfg.data.split}/{cfg.data.fold}", "value": v}
                          for k, v in scores.items()])
    return scores


COMMANDS = {
    "generate-data": cmd_generate, "train": cmd_train, "reconstruct": cmd_reconstruct,
    "reenact": cmd_reenact, "traverse": cmd_traverse, "evaluate": cmd_evaluate,
    "classify": cmd_classify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg = parse_config(args.config, _overrides(args))
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        cfg.write(args.out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=1, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
