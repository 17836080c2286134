"""``satformula`` command line: synth | recover | eval | sweep.

Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
4 runtime failure.

Configuration is a flat JSON object whose keys are the fields of
:class:`RunConfig`. Precedence: command-line flags, then the config file,
then the defaults. ``recover`` and ``sweep`` echo the resolved config into
the output directory as ``config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Optional

from . import __version__
from .expr import ExprError, ExprSyntaxError, parse, to_infix
from .indices import TASKS, UnknownIndexError, get_index
from .nn.model import EncoderConfig, SeqModelConfig
from .objectives import LossWeights
from .search import BfgsConfig

log = logging.getLogger("satformula")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    # dataset
    task: str = "ndvi"
    data: Optional[str] = None
    out: str = "run"
    seed: int = 0
    n_samples: int = 20
    size: int = 64
    smoothness: int = 2
    # training
    lr: float = 1e-4
    iterations: int = 100
    stage1_epochs: int = 50
    batch_size: int = 4
    stage1: bool = True
    stage2: bool = True
    mlp_hidden: tuple = (32, 16)
    mlp_epochs: int = 400
    mlp_lr: float = 1e-3
    test_fraction: float = 0.2
    # search
    beam_width: int = 4
    decode_max_len: int = 32
    quick_bfgs_iters: int = 20
    max_refine: int = 24
    bfgs_max_iters: int = 500
    grad_tol: float = 1e-10
    # loss weights
    lambda_con: float = 0.5
    lambda_mse: float = 1.0
    lambda_ce: float = 0.5
    lambda_phy: float = 0.1
    # image encoder
    patch_size: int = 4
    embed_dim: int = 16
    stages: int = 2
    blocks_per_stage: int = 2
    window: int = 4
    enc_heads: int = 4
    out_dim: int = 128
    mlp_ratio: int = 2
    per_band_encoders: bool = False
    # sequence models
    seq_layers: int = 2
    seq_heads: int = 4
    seq_hidden: int = 64
    seq_max_len: int = 64
    ffn_ratio: int = 2
    fusion_heads: int = 4

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}

    @classmethod
    def resolve(cls, file_values: dict, overrides: dict) -> "RunConfig":
        unknown = (set(file_values) | set(overrides)) - cls.keys()
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(sorted(unknown))}", EXIT_USAGE)
        merged = {**file_values, **overrides}
        defaults = cls()
        typed = {}
        for f in fields(cls):
            if f.name not in merged:
                continue
            typed[f.name] = _coerce(f.name, merged[f.name], getattr(defaults, f.name))
        return cls(**typed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_con, self.lambda_mse, self.lambda_ce, self.lambda_phy)

    def train_config(self):
        from .pipeline import TrainConfig

        return TrainConfig(
            lr=self.lr, iterations=self.iterations, stage1_epochs=self.stage1_epochs, batch_size=self.batch_size,
            seed=self.seed, weights=self.weights(), stage1=self.stage1, stage2=self.stage2,
            mlp_hidden=tuple(self.mlp_hidden), mlp_epochs=self.mlp_epochs, mlp_lr=self.mlp_lr,
            beam_width=self.beam_width, decode_max_len=self.decode_max_len,
            quick_bfgs_iters=self.quick_bfgs_iters, max_refine=self.max_refine,
            bfgs=BfgsConfig(max_iters=self.bfgs_max_iters, grad_tol=self.grad_tol),
            test_fraction=self.test_fraction,
        )

    def encoder_config(self, in_chans: int) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.embed_dim, self.stages, self.blocks_per_stage, self.window,
                             self.enc_heads, self.out_dim, in_chans, self.mlp_ratio, self.per_band_encoders)

    def seq_config(self) -> SeqModelConfig:
        return SeqModelConfig(layers=self.seq_layers, heads=self.seq_heads, hidden=self.seq_hidden,
                              max_len=self.seq_max_len, ffn_ratio=self.ffn_ratio, fusion_heads=self.fusion_heads)

    def validate(self):
        """Build every derived config once so bad values surface as usage errors."""
        try:
            get_index(self.task)
            self.train_config()
            self.encoder_config(4)
            self.seq_config()
        except UnknownIndexError as exc:
            raise CliError(str(exc.args[0]), EXIT_USAGE) from None
        except ValueError as exc:
            raise CliError(f"invalid config: {exc}", EXIT_USAGE) from None
        return self


def _coerce(name, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            return tuple(int(v) for v in value)
        return None if value is None else str(value)
    except (TypeError, ValueError):
        raise CliError(f"config key {name!r}: cannot use {value!r}", EXIT_USAGE) from None


def _read_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_MISSING)
    try:
        with open(path) as fh:
            values = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path}: {exc}", EXIT_USAGE) from None
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise CliError(f"config file {path} must be one flat JSON object", EXIT_USAGE)
    return values


# flags that map onto RunConfig keys; absent flags do not override the file
_CONFIG_FLAGS = {
    "task": ("--task", str, "index name: " + ", ".join(TASKS)),
    "data": ("--data", str, "dataset directory holding manifest.json"),
    "out": ("--out", str, "output directory"),
    "seed": ("--seed", int, "run seed"),
    "n_samples": ("--n", int, "number of samples"),
    "size": ("--size", int, "scene height and width in pixels"),
    "lr": ("--lr", float, "Adam learning rate"),
    "iterations": ("--iterations", int, "decode/training rounds T"),
    "stage1_epochs": ("--stage1-epochs", int, "consistency pre-training epochs"),
    "batch_size": ("--batch-size", int, "mini-batch size"),
    "beam_width": ("--beam-width", int, "beam width per decode round"),
    "max_refine": ("--max-refine", int, "candidates given full BFGS refinement"),
}


def _add_config_flags(p, keys):
    p.add_argument("--config", help="flat JSON config file")
    for key in keys:
        flag, typ, help_ = _CONFIG_FLAGS[key]
        p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS, help=help_)


def _resolved(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if hasattr(args, k)}
    return RunConfig.resolve(_read_config(getattr(args, "config", None)), overrides).validate()


def _load(cfg: RunConfig, task=None):
    from .raster import RasterFormatError, load_dataset

    if cfg.data is None:
        raise CliError("no dataset given (use --data DIR)", EXIT_USAGE)
    try:
        return load_dataset(cfg.data, task)
    except FileNotFoundError as exc:
        raise CliError(f"missing input: {exc}", EXIT_MISSING) from None
    except (RasterFormatError, ValueError) as exc:
        raise CliError(f"cannot read dataset {cfg.data}: {exc}", EXIT_RUNTIME) from None


def _echo_config(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .raster import make_dataset, save_dataset

    cfg = _resolved(args)
    try:
        samples = make_dataset(cfg.seed, cfg.n_samples, cfg.task, size=cfg.size, smoothness=cfg.smoothness)
    except ValueError as exc:
        raise CliError(f"invalid dataset spec: {exc}", EXIT_USAGE) from None
    save_dataset(samples, cfg.out, get_index(cfg.task).name, cfg.seed, cfg.size)
    print(f"wrote {len(samples)} rasters and manifest.json to {cfg.out}")
    return EXIT_OK


def cmd_recover(args) -> int:
    from .pipeline import run_pipeline

    cfg = _resolved(args)
    if args.dry_run:
        print(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        return EXIT_OK
    manifest, samples = _load(cfg)
    task = manifest["task"]
    n_bands = samples[0].image.bands
    try:
        result = run_pipeline(samples, cfg.train_config(), out_dir=cfg.out, task=task,
                              enc_cfg=cfg.encoder_config(n_bands), seq_cfg=cfg.seq_config())
    except ValueError as exc:
        raise CliError(f"recover failed: {exc}", EXIT_RUNTIME) from None
    _echo_config(cfg, cfg.out)
    rep = result.report
    r2 = "undefined" if rep.r2 is None else f"{rep.r2:.6f}"
    print(f"{to_infix(result.best.expr)}\nR2={r2} MAE={rep.mae:.6g} RMSE={rep.rmse:.6g} nodes={rep.nodes}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import expression_metrics, split_indices, write_metrics_csv

    cfg = _resolved(args)
    task_flag = getattr(args, "task", None)
    if args.formula is not None:
        if task_flag is not None:
            log.warning("--formula given; ignoring --task %s", task_flag)
        source = args.formula
    elif args.expr is not None:
        if not os.path.exists(args.expr):
            raise CliError(f"missing input: {args.expr}", EXIT_MISSING)
        with open(args.expr) as fh:
            source = fh.read().strip()
    elif task_flag is not None:
        source = get_index(task_flag).formula
    else:
        raise CliError("eval needs --formula, --expr or --task", EXIT_USAGE)
    try:
        expr = parse(source)
    except ExprSyntaxError as exc:
        raise CliError(f"malformed formula at offset {exc.offset}: {exc}", EXIT_USAGE) from None
    except ExprError as exc:
        raise CliError(f"malformed formula: {exc}", EXIT_USAGE) from None
    manifest, samples = _load(cfg)
    if args.split == "test":
        _, test_idx = split_indices(len(samples), cfg.seed, cfg.test_fraction)
        samples = [samples[i] for i in test_idx]
    try:
        rep = expression_metrics(expr, samples)
    except ValueError as exc:
        raise CliError(f"eval failed: {exc}", EXIT_RUNTIME) from None
    os.makedirs(cfg.out, exist_ok=True)
    write_metrics_csv(os.path.join(cfg.out, "metrics.csv"), manifest["task"], rep)
    r2 = "undefined" if rep.r2 is None else f"{rep.r2:.6f}"
    print(f"{to_infix(expr)}\nR2={r2} MAE={rep.mae:.6g} RMSE={rep.rmse:.6g} nodes={rep.nodes}")
    return EXIT_OK


def _parse_ratios(text: str) -> list[float]:
    try:
        ratios = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"--ratios must be comma-separated numbers, got {text!r}", EXIT_USAGE) from None
    if not ratios:
        raise CliError("--ratios is empty", EXIT_USAGE)
    bad = [r for r in ratios if not 0 < r <= 1]
    if bad:
        raise CliError(f"ratios must lie in (0, 1]: {bad}", EXIT_USAGE)
    return ratios


def cmd_sweep(args) -> int:
    from .pipeline import sampling_sweep, sweep_subset

    cfg = _resolved(args)
    ratios = _parse_ratios(args.ratios)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_USAGE)
    _, samples = _load(cfg)
    for r in ratios:
        try:
            sweep_subset(len(samples), r, cfg.seed)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "sweep.csv")
    rows = sampling_sweep(samples, ratios, cfg.train_config(), jobs=args.jobs, csv_path=path)
    _echo_config(cfg, cfg.out)
    for row in rows:
        print(f"ratio={row['ratio']} n={row['n_samples']} r2={row['r2']} nodes={row['nodes']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satformula", description="Recover closed-form expressions from multi-band raster data.",
        epilog="exit codes: 0 success, 2 usage or config error, 3 missing input, 4 runtime failure")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_config_flags(p, ["task", "n_samples", "size", "seed", "out"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("recover", help="run the full pipeline on a dataset")
    _add_config_flags(p, ["data", "out", "seed", "lr", "iterations", "stage1_epochs", "batch_size",
                          "beam_width", "max_refine"])
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", help="score an expression on a dataset")
    _add_config_flags(p, ["data", "out", "seed", "task"])
    p.add_argument("--formula", help="inline expression, e.g. '(B4 - B3) / (B4 + B3)'")
    p.add_argument("--expr", help="file holding one expression")
    p.add_argument("--split", choices=("all", "test"), default="all", help="samples to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sampling-ratio sweep")
    _add_config_flags(p, ["data", "out", "seed", "iterations", "stage1_epochs", "batch_size"])
    p.add_argument("--ratios", required=True, help="comma-separated ratios in (0, 1]")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"satformula {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # surfaced as a runtime failure with a diagnostic
        log.debug("unhandled error", exc_info=True)
        print(f"satformula {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
