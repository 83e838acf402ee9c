"""Command line: ``harmonize3d {phantom-gen,train,harmonize,evaluate,probe}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Each stage takes one JSON config; individual flags override its fields.
Log verbosity comes from the ``HARMONIZE3D_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "HARMONIZE3D_LOG"

log = logging.getLogger("harmonize3d")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.HelpFormatter):
    """Fixed width so help text does not depend on the terminal; shows real defaults."""

    def __init__(self, prog):
        super().__init__(prog, width=88, max_help_position=32)

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required or action.default in (None, False, argparse.SUPPRESS) or action.option_strings == ["-h", "--help"]:
            return text
        return f"{text} (default: %(default)s)"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="harmonize3d", description="Multi-site 3-D volume harmonization.", formatter_class=_Formatter)
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    g = sub.add_parser("phantom-gen", help="write a synthetic multi-site corpus", formatter_class=_Formatter)
    g.add_argument("--config", help="PhantomConfig JSON file (default: built-in PhantomConfig)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="overrides the config seed")
    g.add_argument("--n-subjects", type=int, help="overrides the config subject count")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    t = sub.add_parser("train", help="train encoders, generator and discriminators", formatter_class=_Formatter)
    t.add_argument("--config", help="TrainConfig JSON file (default: built-in TrainConfig)")
    t.add_argument("--out", required=True, help="output directory for checkpoints and the loss log")
    t.add_argument("--corpus", help="manifest.json of the training corpus (overrides the config)")
    t.add_argument("--steps", type=int, help="total step count (overrides the config)")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--checkpoint-every", type=int, help="checkpoint interval in steps, 0 for final only")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="write into a non-empty directory")

    h = sub.add_parser("harmonize", help="re-render volumes with a target appearance", formatter_class=_Formatter)
    h.add_argument("--weights", required=True, help="checkpoint file")
    h.add_argument("--input", required=True, help="a .nii file or a directory of them")
    h.add_argument("--target", required=True, help="site:<k> or agnostic")
    h.add_argument("--noise", default="zero", help="zero, seed:<n> or encoded")
    h.add_argument("--out", required=True, help="output directory")
    h.add_argument("--batch", type=int, default=4, help="volumes per forward pass")
    h.add_argument("--force", action="store_true", help="write into a non-empty directory")

    e = sub.add_parser("evaluate", help="W1, luminance and structure report", formatter_class=_Formatter)
    e.add_argument("--originals", required=True, help="directory of original volumes")
    e.add_argument("--harmonized", required=True, help="directory of harmonized volumes, same file names")
    e.add_argument("--manifest", required=True, help="manifest.json naming files, sites and subjects")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--config", help="evaluation options JSON (target, cap, seed, pairs)")
    e.add_argument("--target", help="target description stored in the report")
    e.add_argument("--cap", type=int, help="maximum luminance pairs")
    e.add_argument("--pairs", type=int, help="cross-subject structure pairs")
    e.add_argument("--seed", type=int, help="pair sampling seed")
    e.add_argument("--force", action="store_true", help="write into a non-empty directory")

    r = sub.add_parser("probe", help="residual site information probe", formatter_class=_Formatter)
    r.add_argument("--volumes", required=True, help="directory of raw volumes")
    r.add_argument("--manifest", required=True, help="manifest.json naming files and sites")
    r.add_argument("--harmonized", help="directory of harmonized volumes, same file names")
    r.add_argument("--out", required=True, help="output directory for probe.json")
    r.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    r.add_argument("--seed", type=int, default=0, help="fold shuffling seed")
    r.add_argument("--force", action="store_true", help="write into a non-empty directory")
    return p


# -- helpers ----------------------------------------------------------------------

def _configure_logging() -> None:
    name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise UsageError(f"{LOG_ENV}={name!r} is not a log level")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: config is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise DataError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"refusing to write into non-empty {out} (pass --force)")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    return out


def _print_config(name: str, config: dict) -> None:
    print(f"resolved {name} config:")
    print(json.dumps(config, indent=1, sort_keys=True))
    sys.stdout.flush()


def _nifti_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".nii")
        if not files:
            raise DataError(f"no .nii files in {path}")
        return files
    if not path.exists():
        raise DataError(f"input not found: {path}")
    return [path]


def _load_records(manifest: str):
    from .phantom import load_manifest

    try:
        return load_manifest(manifest)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _read_listed(directory: str, records) -> list:
    from .volume import read_nifti

    base = Path(directory)
    if not base.is_dir():
        raise DataError(f"not a directory: {base}")
    missing = [r.file for r in records if not (base / r.file).is_file()]
    if missing:
        raise DataError(f"manifest does not match {base}: {len(missing)} missing file(s), e.g. {missing[0]}")
    return [read_nifti(base / r.file) for r in records]


# -- subcommands --------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from .phantom import PhantomConfig, generate_corpus

    try:
        config = PhantomConfig.from_dict(_read_config(args.config))
        overrides = {k: v for k, v in (("seed", args.seed), ("n_subjects", args.n_subjects)) if v is not None}
        config = replace(config, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid phantom config: {exc}") from None
    _print_config("phantom", config.to_dict())
    out = _prepare_out(args.out, args.force)
    try:
        manifest = generate_corpus(config, out)
    except OSError as exc:
        raise DataError(str(exc)) from None
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_training

    try:
        config = TrainConfig.from_dict(_read_config(args.config))
        overrides = {
            "corpus": args.corpus,
            "steps": args.steps,
            "seed": args.seed,
            "checkpoint_every": args.checkpoint_every,
        }
        config = replace(config, out_dir=args.out, **{k: v for k, v in overrides.items() if v is not None})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None
    if config.corpus is None:
        raise UsageError("no corpus: pass --corpus or set 'corpus' in the config")
    _print_config("train", config.to_dict())
    if args.resume is not None and not Path(args.resume).is_file():
        raise DataError(f"checkpoint not found: {args.resume}")
    _prepare_out(args.out, args.force or args.resume is not None)
    if not Path(config.corpus).is_file():
        raise DataError(f"manifest not found: {config.corpus}")
    try:
        state, _ = run_training(config, resume=args.resume)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    print(f"step {state.step}; final checkpoint: {Path(args.out) / 'final.h3d'}")
    return EXIT_OK


def cmd_harmonize(args) -> int:
    from .checkpoint import CheckpointError
    from .model import HarmonizationTarget, harmonize_many
    from .trainer import load_networks
    from .volume import NiftiError, read_nifti, write_nifti

    try:
        target = HarmonizationTarget.parse(args.target, args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    try:
        nets = load_networks(args.weights)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.weights}") from None
    except (CheckpointError, KeyError) as exc:
        raise DataError(f"unusable checkpoint {args.weights}: {exc}") from None
    try:
        target.label_vector(nets.config.n_sites)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config(
        "harmonize",
        {"weights": args.weights, "input": args.input, "target": target.describe(), "n_sites": nets.config.n_sites, "batch": args.batch},
    )
    files = _nifti_files(Path(args.input))
    out = _prepare_out(args.out, args.force)
    try:
        volumes = [read_nifti(f) for f in files]
        results = harmonize_many(nets, volumes, target, batch=args.batch)
    except (NiftiError, ValueError) as exc:
        raise DataError(str(exc)) from None
    for f, v in zip(files, results):
        write_nifti(v, out / f.name)
    print(f"wrote {len(results)} volume(s) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .eval import EvalReport, cross_subject_structure, emit_report
    from .volume import NiftiError

    options = {"target": "", "cap": 2000, "seed": 0, "pairs": 100}
    doc = _read_config(args.config)
    unknown = set(doc) - set(options)
    if unknown:
        raise UsageError(f"unknown evaluation options: {sorted(unknown)}")
    options.update(doc)
    options.update({k: getattr(args, k) for k in ("target", "cap", "seed", "pairs") if getattr(args, k) is not None})
    _print_config("evaluate", {**options, "originals": args.originals, "harmonized": args.harmonized, "manifest": args.manifest})
    records = _load_records(args.manifest)
    try:
        originals = _read_listed(args.originals, records)
        harmonized = _read_listed(args.harmonized, records)
        if any(a.extents != b.extents for a, b in zip(originals, harmonized)):
            raise DataError("original and harmonized extents differ")
        out = _prepare_out(args.out, args.force)
        sites = [r.site for r in records]
        names = [r.site_name for r in records]
        meta = {"manifest": str(args.manifest), "n_volumes": len(records)}
        subjects = [r.subject for r in records]
        if len(set(subjects)) > 1:
            base = cross_subject_structure(originals, subjects, options["pairs"], options["seed"])
            meta["cross_subject_structure"] = {"mean": base.mean, "sd": base.sd, "n": base.n}
        report = EvalReport.build(originals, harmonized, sites, names, target=str(options["target"]), cap=int(options["cap"]), seed=int(options["seed"]), metadata=meta)
    except (NiftiError, ValueError) as exc:
        raise DataError(str(exc)) from None
    emit_report(report, out)
    print(f"W1 pre {report.w1_pre_summary.mean:.6f} post {report.w1_post_summary.mean:.6f}")
    print(f"luminance pre {report.luminance_pre.mean:.6f} post {report.luminance_post.mean:.6f}")
    print(f"structure {report.structure.mean:.6f}")
    print(f"report: {out / 'summary.json'}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import run_site_probe
    from .volume import NiftiError

    _print_config("probe", {"volumes": args.volumes, "manifest": args.manifest, "harmonized": args.harmonized, "folds": args.folds, "seed": args.seed})
    if args.folds < 2:
        raise UsageError("--folds must be >= 2")
    records = _load_records(args.manifest)
    try:
        raw = _read_listed(args.volumes, records)
        harm = _read_listed(args.harmonized, records) if args.harmonized else None
        out = _prepare_out(args.out, args.force)
        result = run_site_probe(raw, [r.site for r in records], harm, folds=args.folds, seed=args.seed)
    except (NiftiError, ValueError) as exc:
        raise DataError(str(exc)) from None
    doc = {"version": 1, "n_volumes": len(records), "seed": args.seed, **result.to_dict()}
    path = out / "probe.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    line = f"raw accuracy {result.raw_accuracy:.3f} (chance {result.chance:.3f})"
    if result.harmonized_accuracy is not None:
        line += f", harmonized {result.harmonized_accuracy:.3f}"
    print(line)
    print(f"result: {path}")
    return EXIT_OK


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "harmonize": cmd_harmonize,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
}


def main(argv: Sequence[str] | None = None) -> int:
    from .trainer import NonFiniteLossError

    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"harmonize3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"harmonize3d {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"harmonize3d {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
