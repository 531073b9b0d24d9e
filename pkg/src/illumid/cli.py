"""Command line entry point: ``illumid <command> [flags]``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
Every command also takes ``--config FILE.toml``; keys in the file (top level
or in a table named after the command) set flag defaults, explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .augment import (
    DEFAULT_GAMMAS,
    IlluminationConfig,
    ManifestError,
    build_augmented_manifest,
    materialize,
    read_manifest,
    synth_toy_dataset,
    write_manifest,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _gammas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty gamma list")
    return vals


def _add_illum_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gammas", type=_gammas, default=DEFAULT_GAMMAS,
                   help="comma-separated gamma levels (default: %(default)s)")
    p.add_argument("--noise-scale", type=float, default=255.0, help="Poisson photon scale")
    p.add_argument("--no-noise", action="store_true", help="disable Poisson noise")


def _illum_cfg(args) -> IlluminationConfig:
    try:
        return IlluminationConfig(tuple(args.gammas), args.noise_scale, not args.no_noise)
    except ValueError as e:
        raise UsageError(str(e))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="illumid", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", type=Path, help="TOML file with flag defaults")
        return p

    p = command("synth", "write a procedural toy person corpus")
    p.add_argument("--ids", type=int, default=20, help="number of identities")
    p.add_argument("--per-id", type=int, default=10, help="images per identity")
    p.add_argument("--side", type=int, default=32, help="image side in pixels")
    p.add_argument("--cameras", type=int, default=2, help="number of cameras")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output directory (required)")

    p = command("augment", "attach illumination levels to a manifest")
    p.add_argument("--manifest", type=Path, help="source manifest (required)")
    p.add_argument("--mode", choices=["expand_all", "assign_random"], default="expand_all")
    _add_illum_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output manifest path (required)")
    p.add_argument("--materialize", action="store_true",
                   help="render altered images next to the output manifest")

    p = command("pretrain-teacher", "pretrain a ReID or illumination teacher")
    p.add_argument("--kind", choices=["reid", "illum"], help="teacher kind (required)")
    p.add_argument("--manifest", type=Path, help="training manifest (required)")
    p.add_argument("--preset", choices=["toy", "paper"], default="toy")
    p.add_argument("--epochs", type=int, help="override the preset's teacher epoch count")
    p.add_argument("--iters-per-epoch", type=int, help="override iterations per epoch")
    _add_illum_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="teacher checkpoint path (required)")

    p = command("train", "run the alternating two-stage training loop")
    p.add_argument("--manifest", type=Path, help="training manifest (required)")
    p.add_argument("--variant", choices=["baseline", "backbone", "ts", "dis", "dis_ts"], default="dis_ts")
    p.add_argument("--preset", choices=["toy", "paper"], default="toy")
    p.add_argument("--reid-teacher", type=Path, help="ReID teacher checkpoint (ts variants)")
    p.add_argument("--illum-teacher", type=Path, help="illumination teacher checkpoint (ts variants)")
    p.add_argument("--T", dest="T", type=int, help="alternation period")
    p.add_argument("--epochs", type=int, help="override epoch_max")
    p.add_argument("--iters-per-epoch", type=int, help="override iterations per epoch")
    _add_illum_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output directory for checkpoint.pt and report.jsonl (required)")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")

    p = command("eval", "rank gallery against query and report CMC / mAP")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint (required)")
    p.add_argument("--manifest", type=Path, help="manifest with query and gallery splits (required)")
    p.add_argument("--gallery-manifest", type=Path, help="separate manifest for the gallery split")
    p.add_argument("--prerendered", action="store_true", help="images already carry their illumination")
    p.add_argument("--rerank", action="store_true", help="apply k-reciprocal re-ranking")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.add_argument("--cmc-csv", type=Path, help="write the CMC curve as CSV")
    return parser


REQUIRED = {
    "synth": ["out"],
    "augment": ["manifest", "out"],
    "pretrain-teacher": ["kind", "manifest", "out"],
    "train": ["manifest", "out"],
    "eval": ["checkpoint", "manifest"],
}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _load_config(path: Path, command: str, sub: argparse.ArgumentParser) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"config {path}: {e}")

    section = data.get(command, data.get(command.replace("-", "_"), {}))
    values = {k: v for k, v in data.items() if not isinstance(v, dict)}
    values.update(section)
    known = {a.dest: a for a in sub._actions}
    out = {}
    for key, val in values.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"config {path}: unknown key {key!r} for command {command}")
        action = known[dest]
        if action.type is not None and not isinstance(val, bool):
            val = action.type(",".join(map(str, val)) if isinstance(val, list) else str(val))
        out[dest] = val
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config is not None:
        try:
            defaults = _load_config(args.config, args.command, sub)
        except (UsageError, argparse.ArgumentTypeError) as e:
            sub.error(str(e))
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        sub.error("the following arguments are required: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        recs = synth_toy_dataset(args.ids, args.per_id, args.side, args.cameras, args.seed, args.out)
    except ValueError as e:
        raise UsageError(str(e))
    print(f"wrote {len(recs)} records to {args.out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _illum_cfg(args)
    src = read_manifest(args.manifest)
    out_dir = args.out.parent
    recs = build_augmented_manifest(src, cfg, args.seed, args.mode)
    if args.materialize:
        recs = materialize(recs, cfg, args.seed, args.manifest.parent, out_dir)
    else:
        # keep paths valid relative to the new manifest location
        base = args.manifest.parent.resolve()
        out_res = out_dir.resolve()
        recs = [replace(r, image_path=os.path.relpath(base / r.image_path, out_res)) for r in recs]
    write_manifest(recs, args.out)
    print(f"wrote {len(recs)} records ({args.mode}, {cfg.n_illu} levels) to {args.out}")
    return EXIT_OK


def _train_cfg(args, epochs_field="epoch_max", **extra):
    from .trainer import PRESETS

    overrides = {"seed": args.seed, **extra}
    for key, name in (("T", "T"), ("epochs", epochs_field), ("iters_per_epoch", "iters_per_epoch")):
        val = getattr(args, key, None)
        if val is not None:
            overrides[name] = val
    try:
        return PRESETS[args.preset](**overrides)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_pretrain_teacher(args) -> int:
    from .data import load_manifest
    from .model import StageEncoderSpec
    from .trainer import pretrain_illum_teacher, pretrain_reid_teacher, save_teacher

    cfg = _illum_cfg(args)
    tcfg = _train_cfg(args, epochs_field="teacher_epochs")
    if args.kind == "illum" and cfg.n_illu < 2:
        raise UsageError("the illumination teacher needs at least 2 gamma levels")
    ds = load_manifest(args.manifest, cfg=cfg)
    spec = StageEncoderSpec()
    if args.kind == "reid":
        teacher = pretrain_reid_teacher(ds, spec, tcfg)
    else:
        teacher = pretrain_illum_teacher(ds, spec, tcfg, cfg)
    save_teacher(teacher, args.out, args.kind)
    print(f"{args.kind} teacher: train accuracy {teacher.train_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .model import StageEncoderSpec
    from .trainer import load_checkpoint, load_teacher, train_tsd, write_report

    cfg = _illum_cfg(args)
    tcfg = _train_cfg(args, variant=args.variant)
    given = {"reid": args.reid_teacher, "illum": args.illum_teacher}
    if tcfg.uses_teachers:
        missing = [f"--{k}-teacher" for k, v in given.items() if v is None]
        if missing:
            raise UsageError(
                f"variant {args.variant!r} distils from frozen teachers; missing {', '.join(missing)} "
                "(create them with `illumid pretrain-teacher`)"
            )
    elif any(v is not None for v in given.values()):
        raise UsageError(f"variant {args.variant!r} does not use teachers; drop the teacher flags")

    ds = load_manifest(args.manifest, cfg=cfg)
    teachers = {k: load_teacher(v, k) for k, v in given.items() if v is not None}
    resume = load_checkpoint(args.resume) if args.resume is not None else None
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "checkpoint.pt"
    _, records = train_tsd(ds, StageEncoderSpec(), teachers, tcfg, cfg, resume=resume, checkpoint_path=ckpt)
    write_report(records, args.out / "report.jsonl")
    print(f"trained {args.variant} for {len(records)} epochs -> {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import evaluate, write_report
    from .trainer import load_checkpoint, net_from_state

    state = load_checkpoint(args.checkpoint)
    cfg = state.illum_cfg
    query = load_manifest(args.manifest, cfg=cfg, prerendered=args.prerendered)
    gallery = None
    if args.gallery_manifest is not None:
        gallery = load_manifest(args.gallery_manifest, cfg=cfg, prerendered=args.prerendered)
    net = net_from_state(state)
    try:
        report = evaluate(net, query, gallery, illum_cfg=cfg, seed=args.seed,
                          rerank=args.rerank, k1=args.k1, k2=args.k2, lam=args.lam)
    except ValueError as e:
        if "k1" in str(e) or "lambda" in str(e):
            raise UsageError(str(e))
        raise
    print(f"{'R1':>8} {'R5':>8} {'R10':>8} {'mAP':>8}")
    print(f"{100 * report.rank(1):8.2f} {100 * report.rank(5):8.2f} {100 * report.rank(10):8.2f} {100 * report.map:8.2f}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_report(report, args.out)
    if args.cmc_csv is not None:
        report.write_cmc_csv(args.cmc_csv)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"illumid {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ManifestError, RuntimeError, ValueError) as e:
        # checkpoint format errors are RuntimeErrors
        print(f"illumid {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
