"""Command-line entry point: ``xdssl <command> [options]``.

Settings are layered, later layers winning::

    built-in defaults < --config YAML file < XDSSL_* environment < flags

Environment overrides use the upper-cased key after an ``XDSSL_`` prefix
(``XDSSL_EPOCHS=3``, ``XDSSL_SEED=7``); values are parsed as YAML scalars.
``XDSSL_OUTPUT_ROOT`` sets where commands write when ``--out`` is omitted.

Failures exit non-zero and print one JSON error record on stderr:
2 config, 3 data, 4 integrity, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from xdssl.checkpoint import load_checkpoint
from xdssl.data.phantom import PhantomConfig, generate_phantom
from xdssl.data.records import Manifest
from xdssl.data.split import patient_split
from xdssl.errors import ConfigError, DataError, XdsslError
from xdssl.evaluation import RunScores, emit_report, evaluate_run
from xdssl.fusion import STRATEGIES
from xdssl.pipeline import ExperimentConfig, derive_seed, fuse_predictions, infer_split, reproduce
from xdssl.training import RunConfig, finetune, pretrain_contrastive, pretrain_mim

ENV_PREFIX = "XDSSL_"
OUTPUT_ROOT_ENV = "XDSSL_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

log = logging.getLogger("xdssl")


class UsageError(ConfigError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# settings


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def env_overrides(keys, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        name = ENV_PREFIX + key.upper()
        if name in environ and name != OUTPUT_ROOT_ENV:
            try:
                out[key] = yaml.safe_load(environ[name])
            except yaml.YAMLError as exc:
                raise ConfigError(f"{name}: cannot parse value: {exc}") from exc
    return out


def layered(file_values: dict, keys, flag_values: dict, environ=None) -> dict:
    """Merge file, environment and explicit flags (``None`` flags are unset)."""
    keys = set(keys)
    unknown = set(file_values) - keys
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    merged = dict(file_values)
    merged.update(env_overrides(keys, environ))
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _out(args, default_name: str) -> Path:
    return Path(args.out) if args.out else output_root() / default_name


def _manifest(path: str) -> Manifest:
    if not Path(path).is_file():
        raise DataError(f"manifest not found: {path}")
    return Manifest.load(path)


def _fractions(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        try:
            out[name.strip()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad fraction {part!r}; expected name=value") from exc
    return out


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> dict:
    out = _out(args, "phantom")
    keys = [f.name for f in fields(PhantomConfig) if f.name != "domain_profile"]
    values = layered(
        load_config_file(args.config),
        keys,
        {"n_patients": args.n_patients, "frames_per_video": args.frames, "image_size": args.image_size},
    )
    seed = args.seed if args.seed is not None else values.pop("rng_seed", 0)
    values.pop("rng_seed", None)
    profiles = ("A_source", "B_target") if args.profile == "both" else (args.profile,)
    manifest = None
    for profile in profiles:
        domain = "source" if profile == "A_source" else "target"
        cfg = PhantomConfig.for_profile(profile, rng_seed=derive_seed(seed, f"phantom/{domain}"), **values)
        part = generate_phantom(cfg, out / "data" / domain)
        manifest = part if manifest is None else manifest.merged(part)
    manifest.save(out / "manifest.json")
    return {"manifest": str(out / "manifest.json"), "frames": len(manifest.records)}


def cmd_split(args) -> dict:
    manifest = _manifest(args.manifest)
    fractions = _fractions(args.fractions)
    domains = [args.domain] if args.domain else sorted({r.domain for r in manifest.records})
    result = None
    for domain in domains:
        part = Manifest([r for r in manifest.records if r.domain == domain])
        part = patient_split(part, fractions, derive_seed(args.seed, f"split/{domain}"))
        result = part if result is None else result.merged(part)
    out = Path(args.out) if args.out else Path(args.manifest)
    result.save(out)
    counts: dict[str, int] = {}
    for split in result.split_assignment.values():
        counts[split] = counts.get(split, 0) + 1
    return {"manifest": str(out), "patients_per_split": dict(sorted(counts.items()))}


def _run_config(args, stage: str) -> RunConfig:
    keys = [f.name for f in fields(RunConfig) if f.name not in ("stage", "manifest_path", "output_dir")]
    flags = {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "domain": args.domain,
    }
    if getattr(args, "val_splits", None):
        flags["val_splits"] = tuple(args.val_splits.split(","))
    values = layered(load_config_file(args.config), keys, flags)
    # pretraining reads the unlabeled target domain, fine-tuning the labelled source
    values.setdefault("domain", "target" if stage.startswith("pretrain") else "source")
    _manifest(args.manifest)
    return RunConfig.preset(
        stage, manifest_path=args.manifest, output_dir=str(_out(args, stage)), **values
    )


def _summary(res) -> dict:
    return {
        "output_dir": str(res.output_dir),
        "best_epoch": res.log.best_epoch,
        "final_loss": res.log.train_losses[-1],
        "files_opened": len(res.audit.unique),
    }


def cmd_pretrain_mim(args) -> dict:
    return _summary(pretrain_mim(_run_config(args, "pretrain_mim")))


def cmd_pretrain_contrastive(args) -> dict:
    return _summary(pretrain_contrastive(_run_config(args, "pretrain_contrastive")))


def cmd_finetune(args) -> dict:
    cfg = _run_config(args, args.stage)
    init = None
    if args.init_checkpoint:
        if not Path(args.init_checkpoint).is_file():
            raise DataError(f"checkpoint not found: {args.init_checkpoint}")
        init = load_checkpoint(args.init_checkpoint)
    groups = tuple(g for g in args.transfer_groups.split(",") if g) if init is not None else ()
    res = finetune(cfg, init, groups)
    return {**_summary(res), "transfer_groups": list(groups)}


def cmd_infer(args) -> dict:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    manifest = _manifest(args.manifest)
    out = _out(args, "predictions")
    infer_split(Path(args.checkpoint), manifest, args.domain, args.split, out)
    return {"predictions": str(out), "frames": len(manifest.select(domain=args.domain, split=args.split))}


def cmd_fuse(args) -> dict:
    manifest = _manifest(args.manifest)
    for d in (args.pred_a, args.pred_b):
        if not Path(d).is_dir():
            raise DataError(f"prediction directory not found: {d}")
    out = _out(args, "fused")
    records = manifest.select(domain=args.domain, split=args.split)
    fuse_predictions(Path(args.pred_a), Path(args.pred_b), records, out, args.strategy, args.scope, args.entropy_base)
    return {"predictions": str(out), "strategy": args.strategy, "frames": len(records)}


def cmd_evaluate(args) -> dict:
    manifest = _manifest(args.manifest)
    records = manifest.select(domain=args.domain, split=args.split)
    name = args.name or Path(args.pred).name
    run = evaluate_run(args.pred, records, args.threshold, name=name)
    out = Path(args.out) if args.out else output_root() / f"scores_{name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(run.to_csv(), encoding="utf-8")
    return {"scores": str(out), **run.aggregate()}


def cmd_report(args) -> dict:
    runs = []
    for item in args.scores:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--scores expects name=path, got {item!r}")
        if not Path(path).is_file():
            raise DataError(f"scores file not found: {path}")
        runs.append(RunScores.from_csv(name, path))
    pairings = []
    for item in args.pair or []:
        a, sep, b = item.partition(":")
        if not sep:
            raise ConfigError(f"--pair expects a:b, got {item!r}")
        pairings.append((a, b))
    out = _out(args, "report")
    report = emit_report(runs, pairings, out, threshold=args.threshold)
    return {"report": str(out / "report.json"), "runs": report["runs"]}


def cmd_reproduce(args) -> dict:
    keys = [f.name for f in fields(ExperimentConfig)]
    values = layered(load_config_file(args.config), keys, {"seed": args.seed})
    if args.smoke:
        base = ExperimentConfig.smoke(values.get("seed", 0)).to_dict()
        values = {**base, **values}
    exp = ExperimentConfig.from_dict(values)
    out = _out(args, f"reproduce_seed{exp.seed}")
    report = reproduce(exp, out)
    return {"report": str(out / "report" / "report.json"), "runs": report["runs"]}


# --------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser, with_val: bool = False) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--domain", choices=("source", "target"))
    if with_val:
        p.add_argument("--val-splits", default="val")


def _eval_scope(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", default="target", choices=("source", "target"))
    p.add_argument("--split", default="test")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file of settings for the command")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="xdssl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)  # noqa: E731

    p = add("phantom", help="generate the synthetic two-domain dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", default="both", choices=("both", "A_source", "B_target"))
    p.add_argument("--n-patients", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_phantom)

    p = add("split", help="assign patients to train/val/test and rewrite the manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="train=0.68,val=0.16,test=0.16")
    p.add_argument("--domain", choices=("source", "target"))
    p.set_defaults(func=cmd_split)

    p = add("pretrain-mim", help="masked image modelling pretraining")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain_mim)

    p = add("pretrain-contrastive", help="temporally masked contrastive pretraining")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain_contrastive)

    p = add("finetune", help="supervised Dice-BCE training")
    _train_flags(p, with_val=True)
    p.add_argument("--stage", default="finetune", choices=("finetune", "baseline"))
    p.add_argument("--init-checkpoint")
    p.add_argument("--transfer-groups", default="embedding,encoder")
    p.set_defaults(func=cmd_finetune)

    p = add("infer", help="write probability maps for one split")
    _eval_scope(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = add("fuse", help="confidence-weighted fusion of two prediction directories")
    _eval_scope(p)
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--strategy", default="entropy", choices=STRATEGIES)
    p.add_argument("--scope", default="image", choices=("image", "batch"))
    p.add_argument("--entropy-base", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = add("evaluate", help="score one prediction directory against ground truth")
    _eval_scope(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--name")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = add("report", help="aggregate score CSVs and run paired tests")
    p.add_argument("--scores", nargs="+", required=True, metavar="NAME=CSV")
    p.add_argument("--pair", nargs="*", metavar="A:B")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = add("reproduce", help="run the full pipeline from one master seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--smoke", action="store_true", help="tiny configuration that finishes in seconds")
    p.set_defaults(func=cmd_reproduce)
    return parser


def _error_record(exc: BaseException, command: str | None) -> tuple[int, dict]:
    if isinstance(exc, XdsslError):
        code = exc.exit_code
        kind = getattr(exc, "kind", type(exc).__name__)
    elif isinstance(exc, FileNotFoundError):
        code, kind = 3, "missing_file"
    elif isinstance(exc, OSError):
        code, kind = 3, "io_error"
    else:
        code, kind = 5, "internal"
    record = {"error": kind, "exit_code": code, "message": str(exc), "command": command}
    if hasattr(exc, "offset"):
        record["offset"] = exc.offset
    return code, record


def main(argv: list[str] | None = None) -> int:
    command = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s",
            stream=sys.stderr,
        )
        result = args.func(args)
    except KeyboardInterrupt:
        raise
    except BaseException as exc:  # noqa: BLE001 - every failure becomes an error record
        if isinstance(exc, SystemExit):
            if exc.code in (0, None):
                return 0
            raise
        code, record = _error_record(exc, command)
        if code == 5:
            log.exception("internal error")
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
