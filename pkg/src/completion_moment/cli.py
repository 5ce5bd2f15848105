"""Command-line entry point: ``cmdetect <subcommand> [options]``.

Every option can also come from a ``key = value`` config file given with
``--config``; explicit flags win over the file, which wins over defaults.
Each run writes the resolved options next to its output so the run can be
repeated. Exit status is 0 on success, 1 for invalid input or configuration
and 2 for numeric or verification failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, ResolutionError
from .evaluation import emit_report, evaluate, format_report, write_records_csv
from .features import (
    ClassifierConfig,
    RawSequence,
    SynthSpec,
    extract_features,
    generate_synthetic_dataset,
    resample_sequence,
    train_frame_classifier,
)
from .inference import LEARNT, UNIFORM, detect_from_trace_file, predict, write_trace_csv
from .io import (
    ManifestRecord,
    load_dataset,
    load_model,
    read_manifest,
    read_raw,
    resolve_paths,
    save_classifier,
    save_model,
    write_features,
    write_manifest,
    write_raw,
)
from .model import MODES, VARIANTS, WEAK, TrainConfig, TrainingSample, train
from .numerics import NumericError

log = logging.getLogger("completion_moment")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class VerificationFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# Options and config files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    hidden: bool = False


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, hyphens and underscores are interchangeable."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def resolve(options: tuple[Opt, ...], flags: dict[str, Any], config_path=None) -> dict[str, Any]:
    known = {o.name: o for o in options}
    file_values = read_config_file(config_path) if config_path else {}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for o in options:
        value = flags.get(o.name)
        if value is None and o.name in file_values:
            value = file_values[o.name]
        if value is None:
            value = o.default
        if value is not None:
            try:
                value = parse_bool(value) if o.type is bool else o.type(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {o.name}: {value!r}") from exc
            if o.choices and value not in o.choices:
                raise ConfigError(f"{o.name} must be one of {', '.join(map(str, o.choices))}, got {value!r}")
        out[o.name] = value
    return out


def require(cfg: dict, *names: str):
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def write_snapshot(cfg: dict, path) -> Path:
    lines = [f"{k} = {v}" for k, v in cfg.items() if v is not None]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def snapshot_beside(cfg: dict, out: Path) -> Path:
    return write_snapshot(cfg, out.with_name(out.name + ".config"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

SYNTH_OPTS = (
    Opt("spec", help="JSON file of generator fields"),
    Opt("out", help="output directory"),
    Opt("seed", int, help="overrides the seed in the --spec file"),
)


def load_synth_spec(path, seed: int | None) -> SynthSpec:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("spec must be a JSON object")
    names = {f.name for f in fields(SynthSpec)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"unknown spec field(s): {', '.join(unknown)}")
    if seed is not None:
        obj["seed"] = seed
    try:
        spec = SynthSpec(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spec: {exc}") from exc
    spec.validate()
    return spec


def cmd_synth(cfg: dict) -> int:
    require(cfg, "spec", "out")
    spec = load_synth_spec(cfg["spec"], cfg["seed"])
    out = Path(cfg["out"])
    (out / "raw").mkdir(parents=True, exist_ok=True)
    raws, records = generate_synthetic_dataset(spec)
    manifest = []
    for raw, rec in zip(raws, records):
        rel = f"raw/{raw.id}.cmrw"
        write_raw(out / rel, raw.frames)
        manifest.append(ManifestRecord(rec.id, rec.action, rec.label, rec.tau, rel))
    write_manifest(out / "manifest.jsonl", manifest)
    write_snapshot({**cfg, "seed": spec.seed}, out / "synth.config")
    print(f"wrote {len(raws)} sequences to {out}")
    return EXIT_OK


FEATURE_OPTS = (
    Opt("manifest", help="manifest of raw sequences"),
    Opt("out", help="classifier checkpoint path"),
    Opt("features_dir", help="where feature files and their manifest go (default: next to the checkpoint)"),
    Opt("epochs", int, ClassifierConfig.epochs),
    Opt("lr", float, ClassifierConfig.lr),
    Opt("d_feat", int, ClassifierConfig.d_feat),
    Opt("batch_size", int, ClassifierConfig.batch_size),
    Opt("seed", int, 0),
)


def cmd_train_features(cfg: dict) -> int:
    require(cfg, "manifest", "out")
    records = read_manifest(cfg["manifest"])
    paths = resolve_paths(cfg["manifest"], records)
    raws = [RawSequence(read_raw(p).astype(np.float64), r.id) for r, p in zip(records, paths)]
    config = ClassifierConfig(d_feat=cfg["d_feat"], epochs=cfg["epochs"], lr=cfg["lr"],
                              batch_size=cfg["batch_size"], seed=cfg["seed"])
    clf, history = train_frame_classifier(raws, [r.label for r in records], config)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(out, clf)
    fdir = Path(cfg["features_dir"]) if cfg["features_dir"] else out.parent / "features"
    fdir.mkdir(parents=True, exist_ok=True)
    updated = []
    for rec, raw in zip(records, raws):
        name = f"{rec.id}.cmft"
        write_features(fdir / name, extract_features(clf, raw))
        updated.append(ManifestRecord(rec.id, rec.action, rec.label, rec.tau, name))
    write_manifest(fdir / "manifest.jsonl", updated)
    snapshot_beside(cfg, out)
    for epoch, loss in enumerate(history.mean_loss, start=1):
        print(f"epoch {epoch:3d}  lr {config.learning_rate(epoch - 1):.4g}  mean frame loss {loss:.5f}")
    print(f"classifier -> {out}; features -> {fdir / 'manifest.jsonl'}")
    return EXIT_OK


TRAIN_OPTS = (
    Opt("manifest", help="manifest of feature sequences"),
    Opt("out", help="model checkpoint path"),
    Opt("mode", str, WEAK, choices=MODES),
    Opt("epochs", int, None, help="weak epochs, or score-only epochs in supervised mode"),
    Opt("joint_epochs", int, TrainConfig.joint_epochs, help="supervised joint-phase epochs"),
    Opt("lr", float, TrainConfig.lr),
    Opt("decay_after", int, TrainConfig.decay_after),
    Opt("decay_factor", float, TrainConfig.decay_factor),
    Opt("loss_variant", str, TrainConfig.loss_variant, choices=VARIANTS),
    Opt("hidden", int, TrainConfig.hidden),
    Opt("length", int, help="fixed sequence length (default: shortest training sequence)"),
    Opt("seed", int, 0),
)


def cmd_train(cfg: dict) -> int:
    require(cfg, "manifest", "out")
    seqs = load_dataset(cfg["manifest"])
    length = cfg["length"] or min(s.length for s in seqs)
    if length < 1:
        raise ConfigError("length must be >= 1")
    seqs = [resample_sequence(s, length) for s in seqs]
    samples = [TrainingSample(s.features, s.label, s.tau, s.id, s.action) for s in seqs]
    epochs = cfg["epochs"]
    default_epochs = TrainConfig.weak_epochs if cfg["mode"] == WEAK else TrainConfig.score_epochs
    epochs = default_epochs if epochs is None else epochs
    config = TrainConfig(mode=cfg["mode"], weak_epochs=epochs, score_epochs=epochs,
                         joint_epochs=cfg["joint_epochs"], lr=cfg["lr"], decay_after=cfg["decay_after"],
                         decay_factor=cfg["decay_factor"], loss_variant=cfg["loss_variant"],
                         hidden=cfg["hidden"], seed=cfg["seed"])
    params, history = train(samples, config, length=length)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, params)
    snapshot_beside({**cfg, "epochs": epochs, "length": length}, out)
    with open(out.with_name(out.name + ".history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("phase", "epoch", "lr", "mean_loss"))
        for e in history.epochs:
            w.writerow((e["phase"], e["epoch"], repr(e["lr"]), repr(e["mean_loss"])))
            print(f"{e['phase']:<5} epoch {e['epoch']:3d}  lr {e['lr']:.4g}  mean loss {e['mean_loss']:.6f}")
    print(f"model ({cfg['mode']}, L={length}) -> {out}")
    return EXIT_OK


INFER_OPTS = (
    Opt("ckpt", help="model checkpoint"),
    Opt("manifest", help="manifest of feature sequences"),
    Opt("out", help="output directory"),
    Opt("uniform_attention", bool, False, help="use a_t = 1/T instead of learnt attention"),
    Opt("trace", help="detect from a single trace CSV instead of running a model"),
)


def cmd_infer(cfg: dict) -> int:
    if cfg["trace"]:
        pred = detect_from_trace_file(cfg["trace"])
        print("incomplete" if pred.incomplete else pred.moment)
        return EXIT_OK
    require(cfg, "ckpt", "manifest", "out")
    params = load_model(cfg["ckpt"])
    seqs = load_dataset(cfg["manifest"])
    attention = UNIFORM if cfg["uniform_attention"] else LEARNT
    out = Path(cfg["out"])
    (out / "traces").mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "action", "T", "moment", "objective"))
        for seq in sorted(seqs, key=lambda s: s.id):
            rs = resample_sequence(seq, params.length)
            pred, trace = predict(params, rs.features, attention)
            write_trace_csv(trace, out / "traces" / f"{seq.id}.csv")
            w.writerow((seq.id, seq.action, rs.length, "incomplete" if pred.incomplete else pred.moment,
                        repr(pred.objective)))
    write_snapshot(cfg, out / "infer.config")
    print(f"predictions for {len(seqs)} sequences -> {out / 'predictions.csv'}")
    return EXIT_OK


EVAL_OPTS = (
    Opt("ckpt", help="model checkpoint"),
    Opt("manifest", help="manifest of feature sequences with ground truth"),
    Opt("out", help="report path without suffix; .csv and .txt are written"),
    Opt("action", help="restrict to one action"),
)


def cmd_eval(cfg: dict) -> int:
    require(cfg, "ckpt", "manifest", "out")
    params = load_model(cfg["ckpt"])
    seqs = load_dataset(cfg["manifest"])
    actions = [cfg["action"]] if cfg["action"] else None
    records, report = evaluate(seqs, params, attention=(UNIFORM, LEARNT), actions=actions)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(report, out)
    write_records_csv(records, out.with_name(out.name + ".records.csv"))
    snapshot_beside(cfg, out)
    sys.stdout.write(format_report(report))
    return EXIT_OK


GRADCHECK_OPTS = (
    Opt("seed", int, 0),
    Opt("count", int, 20, help="number of random instances per check"),
    Opt("tol", float, 1e-4),
    Opt("out", help="optional directory for the report and config snapshot"),
    Opt("corrupt", hidden=True),
)


def cmd_gradcheck(cfg: dict) -> int:
    from .verify import format_reports, gradcheck

    if cfg["count"] < 1 or not cfg["tol"] > 0:
        raise ConfigError("count must be >= 1 and tol > 0")
    reports = gradcheck(cfg["seed"], cfg["count"], cfg["tol"], corrupt=cfg["corrupt"])
    text = format_reports(reports)
    sys.stdout.write(text)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text)
        write_snapshot(cfg, out / "gradcheck.config")
    failed = [r for r in reports if not r.passed]
    if failed:
        tensors = sorted({name for r in failed for name in r.failing})
        raise VerificationFailed(f"{len(failed)} of {len(reports)} checks failed; tensors: {', '.join(tensors)}")
    return EXIT_OK


BENCH_OPTS = (
    Opt("mode", str, WEAK, choices=MODES),
    Opt("seed", int, 0),
    Opt("out", help="optional directory for report, checkpoint and config snapshot"),
)


def cmd_benchmark(cfg: dict) -> int:
    from .benchmark import BenchmarkSpec, prepare, run

    spec = BenchmarkSpec(seed=cfg["seed"])
    data = prepare(spec)
    result = run(data, cfg["mode"], spec)
    print(f"empirical per-frame Bayes accuracy {data.bayes_accuracy:.4f}; {result.seconds:.1f} s")
    sys.stdout.write(format_report(result.report))
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        emit_report(result.report, out / "report")
        save_model(out / "model.cmck", result.params)
        write_snapshot(cfg, out / "benchmark.config")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, SYNTH_OPTS, "generate planted-change raw sequences and a manifest"),
    "train-features": (cmd_train_features, FEATURE_OPTS, "fit the frame classifier and extract features"),
    "train": (cmd_train, TRAIN_OPTS, "train the completion model"),
    "infer": (cmd_infer, INFER_OPTS, "predict completion moments and write traces"),
    "eval": (cmd_eval, EVAL_OPTS, "compare uniform and learnt attention on labelled data"),
    "gradcheck": (cmd_gradcheck, GRADCHECK_OPTS, "verify analytic gradients by finite differences"),
    "benchmark": (cmd_benchmark, BENCH_OPTS, "run the seeded synthetic benchmark end to end"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmdetect", description="Action completion moment detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, options, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file of options")
        for o in options:
            flag = "--" + o.name.replace("_", "-")
            kw = {"dest": o.name, "default": None,
                  "help": argparse.SUPPRESS if o.hidden else (o.help or None)}
            if o.type is bool:
                p.add_argument(flag, action="store_const", const=True, **kw)
            else:
                p.add_argument(flag, choices=o.choices, **kw)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, options, _ = COMMANDS[args.command]
    try:
        cfg = resolve(options, vars(args), args.config)
        return handler(cfg)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ResolutionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
