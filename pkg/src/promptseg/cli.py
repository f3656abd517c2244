"""Command-line entry point.

Every subcommand writes into its own ``--out`` directory, refuses to overwrite
existing artifacts, and leaves an ``effective_config.txt`` there. That file
uses the same flat grammar accepted by ``--config``::

    # comment
    key = value

Keys are flag names without the leading dashes (``-`` and ``_`` are
interchangeable). Explicit flags override values from the file, so replaying
``--config <run>/effective_config.txt --out <new>`` reproduces a run.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import _accel
from .data import (
    MANIFEST_NAME, SegvFormatError, SyntheticConfig, generate_dataset, generate_synthetic_volume, load_dataset,
    philox, read_volume, save_dataset, slice_volume, split_dataset, write_volume,
)
from .metrics import MetricReport
from .model import CheckpointError, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .trainer import CHECKPOINT_NAME, MODES, TrainConfig, compare_models, evaluate_model, train

log = logging.getLogger("promptseg")

ECHO_NAME = "effective_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage problems are validation errors here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _roles(text: str) -> tuple[str, ...]:
    roles = tuple(r for r in str(text).split(",") if r)
    if not roles or any(r not in ("organ", "lesion") for r in roles):
        raise argparse.ArgumentTypeError(f"roles must be a comma list of organ/lesion, got {text!r}")
    return roles


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--patch-size", type=int, default=8)
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--encoder-depth", type=int, default=2)
    g.add_argument("--encoder-heads", type=int, default=4)
    g.add_argument("--decoder-depth", type=int, default=2)
    g.add_argument("--decoder-heads", type=int, default=4)
    g.add_argument("--logit-grid", type=int, default=32)
    g.add_argument("--pe-seed", type=int, default=0)
    g.add_argument("--pe-scale", type=float, default=1.0)


def _train_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    g = p.add_argument_group("training")
    if with_mode:
        g.add_argument("--mode", choices=MODES, default="cotrain")
    g.add_argument("--epochs", type=int, default=60)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--beta1", type=float, default=0.9)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--adam-eps", type=float, default=1e-8)
    g.add_argument("--organ-radius", type=int, default=5)
    g.add_argument("--lesion-radius", type=int, default=2)
    g.add_argument("--freeze-encoder", type=_bool, default=True)
    g.add_argument("--freeze-prompt-encoder", type=_bool, default=False)
    g.add_argument("--freeze-decoder", type=_bool, default=False)
    g.add_argument("--eval-every", type=int, default=5)
    g.add_argument("--embedding-cache", type=_bool, default=True)


def _synthetic_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--noise-std", type=float, default=0.05)
    g.add_argument("--irregularity", type=float, default=0.15)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptseg", description="Multi-prompt box-prompted segmentation fine-tuning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic organ/lesion dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int, default=0, help="write this many 3D volumes instead of 2D samples")
    p.add_argument("--depth", type=int, default=16)
    _synthetic_flags(p)

    p = sub.add_parser("slice", help="draw random z-slices from SEGV volumes into a 2D dataset")
    p.add_argument("--config")
    p.add_argument("--volume", action="append", required=True, help="volume file; repeat for several")
    p.add_argument("--slices", type=int, default=3, help="slices per volume")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fine-tune one arm")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-checkpoint", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--out")
    _train_flags(p)
    _model_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--roles", type=_roles, default=("organ", "lesion"))
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out")

    p = sub.add_parser("compare", help="tabulate metric CSVs of several arms")
    p.add_argument("--config")
    p.add_argument("--report", action="append", required=True, metavar="ARM=CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("demo", help="gen-data, baseline + three trained arms, compare")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    _synthetic_flags(p)
    _train_flags(p, with_mode=False)
    _model_flags(p)
    return parser


# --------------------------------------------------------------------------
# config files

def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[command]


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    parser = build_parser()
    # required flags may come from the config file, so they are checked after merging
    required: dict[str, list[str]] = {}
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in action.choices.items():
        required[name] = [a.dest for a in sp._actions if a.required]
        for a in sp._actions:
            a.required = False
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        values.pop("command", None)
        sp = _subparser(parser, args.command)
        dests = {a.dest: a for a in sp._actions}
        unknown = sorted(k for k in values if k not in dests or k in ("config", "help"))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        for key, value in values.items():
            if isinstance(dests[key], argparse._AppendAction):
                values[key] = None
                sp.set_defaults(**{key: value.split(";")})
        sp.set_defaults(**{k: v for k, v in values.items() if v is not None})
        args = parser.parse_args(argv)
    missing = [d for d in required[args.command] if getattr(args, d) is None]
    if missing:
        flags = ", ".join(f"--{d.replace('_', '-')}" for d in missing)
        raise UsageError(f"promptseg {args.command}: missing required {flags}")
    return args


def _echo_text(args: argparse.Namespace) -> str:
    items = {k: v for k, v in vars(args).items() if k not in ("config", "out", "verbose") and v is not None}
    lines = []
    for key in sorted(items):
        v = items[key]
        if isinstance(v, (list, tuple)):
            v = (";" if key in ("volume", "report") else ",").join(map(str, v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def _prepare_out(out: str | Path, artifacts: Sequence[str]) -> Path:
    path = Path(out)
    clash = [a for a in (ECHO_NAME, *artifacts) if (path / a).exists()]
    if clash:
        raise UsageError(f"{path}: refusing to overwrite {clash}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_once(path: Path, data: bytes) -> None:
    with open(path, "xb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------
# builders shared by subcommands

def _model_config(args: argparse.Namespace, image_size: int) -> ModelConfig:
    return ModelConfig(
        image_size=image_size, patch_size=args.patch_size, embed_dim=args.embed_dim,
        encoder_depth=args.encoder_depth, encoder_heads=args.encoder_heads, decoder_depth=args.decoder_depth,
        decoder_heads=args.decoder_heads, logit_grid=args.logit_grid, pe_seed=args.pe_seed, pe_scale=args.pe_scale,
    ).validate()


def _train_config(args: argparse.Namespace, mode: str, checkpoint_dir: Path | None) -> TrainConfig:
    return TrainConfig(
        mode=mode, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, beta1=args.beta1,
        beta2=args.beta2, adam_eps=args.adam_eps, seed=args.seed, organ_radius=args.organ_radius,
        lesion_radius=args.lesion_radius, freeze_encoder=args.freeze_encoder,
        freeze_prompt_encoder=args.freeze_prompt_encoder, freeze_decoder=args.freeze_decoder,
        eval_every=args.eval_every, checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
        embedding_cache=args.embedding_cache,
    ).validate()


def _synthetic_config(args: argparse.Namespace) -> SyntheticConfig:
    return SyntheticConfig(image_size=args.image_size, count=args.count, seed=args.seed,
                           noise_std=args.noise_std, irregularity=args.irregularity).validate()


def _arm_dir(mode: str) -> str:
    return mode.replace(":", "_")


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args: argparse.Namespace) -> None:
    cfg = _synthetic_config(args)
    if args.volumes < 0 or args.depth < 1:
        raise UsageError("--volumes must be >= 0 and --depth >= 1")
    if args.volumes:
        out = _prepare_out(args.out, ["volumes"])
        (out / "volumes").mkdir()
        for i in range(args.volumes):
            vol = generate_synthetic_volume(cfg, i, args.depth)
            write_volume(vol, out / "volumes" / f"{vol.volume_id}.segv")
    else:
        out = _prepare_out(args.out, ["samples", MANIFEST_NAME])
        samples, manifest = generate_dataset(cfg)
        save_dataset(samples, manifest, out)
        log.info("wrote %d samples, split %s", len(samples), manifest.sizes())
    _write_once(out / ECHO_NAME, _echo_text(args).encode())


def cmd_slice(args: argparse.Namespace) -> None:
    if args.slices < 1:
        raise UsageError("--slices must be >= 1")
    out = _prepare_out(args.out, ["samples", MANIFEST_NAME])
    samples = []
    for i, path in enumerate(args.volume):
        res = slice_volume(read_volume(path), args.slices, philox(args.seed, i))
        samples.extend(res.samples)
    if not samples:
        raise UsageError("no eligible slices in the given volumes")
    manifest = split_dataset([s.case_id for s in samples], seed=args.seed, name="sliced",
                             params={"slices_per_volume": str(args.slices), "volumes": str(len(args.volume))})
    save_dataset(samples, manifest, out)
    _write_once(out / ECHO_NAME, _echo_text(args).encode())


def cmd_train(args: argparse.Namespace) -> None:
    out = _prepare_out(args.out or f"runs/train-{_arm_dir(args.mode)}-seed{args.seed}",
                       [CHECKPOINT_NAME, "train_record.csv"])
    samples, manifest = load_dataset(args.data)
    if args.init_checkpoint:
        model = load_checkpoint(args.init_checkpoint)
    else:
        model = init_model(_model_config(args, samples[0].image.shape[0]), args.seed)
    cfg = _train_config(args, args.mode, None)
    trained, record = train(model, cfg, samples, manifest)
    save_checkpoint(trained, out / CHECKPOINT_NAME)
    _write_once(out / "train_record.csv", record.to_csv().encode())
    _write_once(out / ECHO_NAME, _echo_text(args).encode())
    log.info("best epoch %d, train loss %.4f -> %.4f", record.best_epoch, record.initial_train_loss,
             record.final_train_loss)


def cmd_eval(args: argparse.Namespace) -> None:
    out = _prepare_out(args.out or str(Path(args.checkpoint).parent), ["metrics.csv"])
    model = load_checkpoint(args.checkpoint)
    samples, _ = load_dataset(args.data, args.split)
    report = evaluate_model(model, samples, args.roles, args.tau)
    _write_once(out / "metrics.csv", report.to_csv().encode())
    _write_once(out / ECHO_NAME, _echo_text(args).encode())


def cmd_compare(args: argparse.Namespace) -> None:
    reports = {}
    for item in args.report:
        arm, sep, path = item.partition("=")
        if not sep or not arm or not path:
            raise UsageError(f"--report expects ARM=CSV, got {item!r}")
        if arm in reports:
            raise UsageError(f"duplicate arm {arm!r}")
        reports[arm] = MetricReport.read_csv(path)
    out = _prepare_out(args.out, ["comparison.csv", "comparison.svg"])
    compare_models(reports).write(out)
    _write_once(out / ECHO_NAME, _echo_text(args).encode())


def cmd_demo(args: argparse.Namespace) -> None:
    syn = _synthetic_config(args)
    model_cfg = _model_config(args, args.image_size)
    for mode in MODES:
        _train_config(args, mode, None)
    out = _prepare_out(args.out, ["data", "baseline", "comparison.csv", "comparison.svg",
                                  *(_arm_dir(m) for m in MODES)])
    samples, manifest = generate_dataset(syn)
    save_dataset(samples, manifest, out / "data")
    by_id = {s.case_id: s for s in samples}
    test = [by_id[c] for c in manifest.ids("test")]

    base = init_model(model_cfg, args.seed)
    reports = {"baseline": evaluate_model(base, test, ("organ", "lesion"), args.tau)}
    (out / "baseline").mkdir()
    save_checkpoint(base, out / "baseline" / CHECKPOINT_NAME)
    _write_once(out / "baseline" / "metrics.csv", reports["baseline"].to_csv().encode())
    for mode in MODES:
        arm_out = out / _arm_dir(mode)
        arm_out.mkdir()
        trained, record = train(base, _train_config(args, mode, None), samples, manifest)
        save_checkpoint(trained, arm_out / CHECKPOINT_NAME)
        _write_once(arm_out / "train_record.csv", record.to_csv().encode())
        roles = ("organ", "lesion") if mode == "cotrain" else (mode.split(":")[1],)
        reports[mode] = evaluate_model(trained, test, roles, args.tau)
        _write_once(arm_out / "metrics.csv", reports[mode].to_csv().encode())
        log.info("%s: %s", mode, {r: round(reports[mode].mean(r, "dsc"), 4) for r in roles})
    compare_models(reports).write(out)
    _write_once(out / ECHO_NAME, _echo_text(args).encode())


COMMANDS = {
    "gen-data": cmd_gen_data, "slice": cmd_slice, "train": cmd_train,
    "eval": cmd_eval, "compare": cmd_compare, "demo": cmd_demo,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _accel.set_threads()
        COMMANDS[args.command](args)
    except (UsageError, ValueError, SegvFormatError, CheckpointError, FileExistsError, FileNotFoundError) as exc:
        print(f"promptseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"promptseg {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())
