"""Command-line entry point: gen-data, train, eval, infer, gradcheck, dump-attention.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dio
from .checks import SCOPES, run_scope
from .errors import ConfigError, DataError, FormatError, NumericalError
from .network import ModelConfig, build_model
from .train import compute_metrics, evaluate, fit

log = logging.getLogger("gelovec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HIST_BINS = 64


# run configuration --------------------------------------------------------


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_path(text):
    return text.strip() or None


@dataclass
class RunConfig:
    input_size: int = 64
    blocks: tuple = (1, 1, 1, 1)
    stage_channels: tuple = (64, 64, 128, 256, 512)
    decoder_channels: tuple = (256, 128, 64, 32, 16)
    gelovec: bool = True
    attention_grid_cap: int = 16
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    threshold: float = 0.5
    dice_weight: float = 0.0
    data: str | None = None
    eval_data: str | None = None
    synthetic_count: int = 200
    synthetic_difficulty: str = "easy"
    synthetic_seed: int = 0
    out: str | None = None

    PARSERS = {
        "input_size": int, "blocks": _int_list, "stage_channels": _int_list,
        "decoder_channels": _int_list, "gelovec": _bool, "attention_grid_cap": int,
        "lr": float, "epochs": int, "batch_size": int, "seed": int, "threshold": float,
        "dice_weight": float, "data": _optional_path, "eval_data": _optional_path,
        "synthetic_count": int, "synthetic_difficulty": str, "synthetic_seed": int,
        "out": _optional_path,
    }

    def set(self, key: str, value: str, where: str = "override") -> None:
        if key not in self.PARSERS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            setattr(self, key, self.PARSERS[key](value))
        except ValueError as exc:
            raise ConfigError(f"{where}: invalid value for {key}: {exc}") from None

    def validate(self) -> None:
        if self.synthetic_difficulty not in dio.DIFFICULTIES:
            raise ConfigError(f"synthetic_difficulty must be one of {dio.DIFFICULTIES}")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 2 and lr > 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(f"invalid model settings: {exc}") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=(self.input_size, self.input_size),
            blocks=tuple(self.blocks),
            stage_channels=tuple(self.stage_channels),
            decoder_channels=tuple(self.decoder_channels),
            gelovec=self.gelovec,
            attention_grid_cap=self.attention_grid_cap,
        )

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, where: str = "<config>", cfg: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value, f"{where}:{lineno}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


# model <-> checkpoint -------------------------------------------------------


def sidecar_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".cfg")


def load_model(checkpoint, config=None):
    """Rebuild a model from a checkpoint and its config echo (or an explicit config)."""
    cfg_path = Path(config) if config else sidecar_path(checkpoint)
    if not cfg_path.exists():
        raise ConfigError(f"no config for {checkpoint}: expected {cfg_path} or --config")
    cfg = load_config(cfg_path)
    cfg.validate()
    tensors, step = dio.load_checkpoint(checkpoint)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    expected = model.state_dict()
    for name, value in expected.items():
        if name not in tensors:
            raise ConfigError(f"checkpoint {checkpoint} is incompatible with the config: "
                              f"tensor {name!r} is missing")
        if tensors[name].shape != value.shape:
            raise ConfigError(f"checkpoint {checkpoint} is incompatible with the config: tensor "
                              f"{name!r} has shape {tensors[name].shape}, expected {value.shape}")
    extra = [n for n in tensors if n not in expected]
    if extra:
        raise ConfigError(f"checkpoint {checkpoint} is incompatible with the config: "
                          f"unexpected tensor {extra[0]!r}")
    model.load_state_dict(tensors)
    model.eval()
    return model, cfg, step


def load_training_data(cfg: RunConfig):
    if cfg.data:
        records = dio.load_manifest(cfg.data)
    else:
        records = dio.gen_synthetic(cfg.synthetic_count, cfg.input_size,
                                    cfg.synthetic_difficulty, cfg.synthetic_seed)
    if not records:
        raise DataError("training set is empty")
    images, masks = dio.stack_records(records)
    if images.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DataError(f"images are {images.shape[2:]}, config input_size is {cfg.input_size}")
    return images, masks


def _load_input_image(path, cfg):
    image = dio.read_image(path)
    if image.shape[1] != 3:
        raise DataError(f"{path}: expected an RGB PPM image")
    if image.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DataError(f"{path}: image is {image.shape[2:]}, model expects {cfg.input_size}")
    return image


# commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    records = dio.gen_synthetic(args.count, args.size, args.difficulty, args.seed)
    manifest = dio.write_dataset(records, args.out)
    print(f"wrote {len(records)} samples to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.baseline:
        cfg.gelovec = False
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set out= in the config")
    cfg.out = str(out)
    cfg.validate()

    images, masks = load_training_data(cfg)
    eval_images = eval_masks = None
    if cfg.eval_data:
        eval_images, eval_masks = dio.stack_records(dio.load_manifest(cfg.eval_data))

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    history, optim = fit(
        model, images, masks, cfg.epochs, cfg.seed, lr=cfg.lr, batch_size=cfg.batch_size,
        eval_images=eval_images, eval_masks=eval_masks, threshold=cfg.threshold,
        dice_weight=cfg.dice_weight, csv_path=out_dir / "metrics.csv",
    )
    ckpt = out_dir / "model.ckpt"
    dio.save_checkpoint(ckpt, model.state_dict(), optim.step_count)
    sidecar_path(ckpt).write_text(cfg.dumps())
    if history:
        epoch, loss, m = history[-1]
        print(f"epoch {epoch} loss {loss:.6f} iou {m.iou:.6f} f1 {m.f1:.6f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.config)
    images, masks = dio.stack_records(dio.load_manifest(args.data))
    if len(images) == 0:
        raise DataError(f"{args.data}: no samples")
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    m = evaluate(model, images, masks, threshold)
    print(f"iou={m.iou:.6f} f1={m.f1:.6f} precision={m.precision:.6f} recall={m.recall:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.config)
    image = _load_input_image(args.image, cfg)
    prob = model.forward(image)
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    dio.write_image(args.out, (prob >= threshold).astype(np.float32))
    if args.prob_out:
        dio.write_image(args.prob_out, prob)
    if args.mask:
        gt = dio.read_mask(args.mask)
        m = compute_metrics(prob, gt, threshold)
        print(f"iou={m.iou:.6f} f1={m.f1:.6f} precision={m.precision:.6f} recall={m.recall:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for name, report in run_scope(args.scope, seed=args.seed, tolerance=args.tolerance):
        status = "PASS" if report["passed"] else "FAIL"
        print(f"{status} {name} max_rel_err={report['max_error']:.3e}")
        if args.verbose or not report["passed"]:
            for layer, err in report["errors"].items():
                flag = "" if err < args.tolerance else "  <-- exceeds tolerance"
                print(f"    {layer}: {err:.3e}{flag}")
        ok &= report["passed"]
    return EXIT_OK if ok else EXIT_NUMERIC


def histogram_rows(values: np.ndarray, bins: int = HIST_BINS):
    counts, edges = np.histogram(np.ravel(values), bins=bins, range=(0.0, 1.0))
    return [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)]


def write_histogram(path, values) -> None:
    with open(path, "w") as fh:
        fh.write("bin_start,bin_end,count\n")
        for lo, hi, c in histogram_rows(values):
            fh.write(f"{lo:.6f},{hi:.6f},{c}\n")


def cmd_dump_attention(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.config)
    blocks = model.gelovec_blocks()
    if not blocks:
        print("no GeloVec modules")
        return EXIT_OK
    image = _load_input_image(args.image, cfg)
    for block in blocks:
        block.record = True
    model.forward(image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for block in blocks:
        stem = block.name.replace(".", "_")
        write_histogram(out / f"{stem}_attention.csv", block.last_attention)
        write_histogram(out / f"{stem}_dnorm.csv", block.last_d_norm)
        print(f"{block.name}: {block.last_attention.size} attention weights, "
              f"{block.last_d_norm.size} distance values")
    return EXIT_OK


# parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gelovec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (PPM/PGM + manifest)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--difficulty", choices=dio.DIFFICULTIES, default="easy")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes metrics.csv and model.ckpt")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--baseline", action="store_true", help="bypass every GeloVec block")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print metrics of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a mask for one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="binary mask PGM")
    i.add_argument("--prob-out", help="optional probability PGM")
    i.add_argument("--mask", help="optional ground-truth PGM to score against")
    i.add_argument("--config")
    i.add_argument("--threshold", type=float)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=SCOPES, default="ops")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-attention", help="histogram attention and distance maps per block")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_dump_attention)
    return p


def _thread_limit():
    value = os.environ.get("GELOVEC_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"GELOVEC_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
