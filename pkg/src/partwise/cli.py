"""Command-line surface: ingest, train, eval, generate, gradcheck, grid.

Exit codes: 0 success, 1 usage problems (bad flags, malformed specs or
config), 2 data problems (unreadable corpora, manifest/checkpoint
mismatches), 3 numeric failures (gradient check failure, non-finite
loss). Relative paths for manifests, checkpoints, and outputs resolve
under $PARTWISE_DATA when it is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import (CheckpointCorrupt, ManifestMismatch, check_manifest,
                         load_checkpoint, save_checkpoint)
from .corpus import CorpusManifest, ingest
from .coupled import CoupledModel, parse_coupled_spec
from .evaluate import EmptyCorpus, cross_entropy_rate
from .generate import generate
from .kern import KernError, serialize_kern
from .models import HomophonicModel, parse_model_spec
from .score import Event, Part, Score, beats
from .train import NumericFailure, TrainConfig, train


class UsageError(Exception):
    """Bad command-line input discovered after argparse."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _data_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("PARTWISE_DATA")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _build_model(spec: str, coupled: bool, manifest: CorpusManifest, seed: int):
    try:
        if coupled:
            return CoupledModel(parse_coupled_spec(spec), manifest.vocab,
                                manifest.pitch_range, manifest.resolution,
                                max_parts=max(manifest.p_max, 2), seed=seed)
        return HomophonicModel(parse_model_spec(spec), manifest.vocab,
                               manifest.pitch_range, manifest.resolution,
                               seed=seed)
    except ValueError as exc:
        raise UsageError(f"bad model spec {spec!r}: {exc}") from exc


# ----- ingest -----

def cmd_ingest(args) -> int:
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise UsageError(f"bad split ratios {args.ratios!r}")
    manifest, report = ingest(args.directory, ratios=ratios, seed=args.seed,
                              exclude_piano=args.exclude_piano)
    out = _data_path(args.out)
    manifest.save(out)
    print(f"manifest: {out}  hash {manifest.content_hash()[:12]}")
    print(f"files: {report['n_files']}  notes: {report['n_notes']}  "
          f"splits: " + "/".join(str(report["splits"][s])
                                 for s in ("train", "valid", "test")))
    print("notes by composer:")
    for name, count in sorted(report["composers"].items(),
                              key=lambda kv: -kv[1]):
        print(f"  {name:30s} {count:8d}")
    print("notes by ensemble:")
    for name, count in sorted(report["ensembles"].items(),
                              key=lambda kv: -kv[1]):
        print(f"  {name:30s} {count:8d}")
    if report["failures"]:
        print(f"skipped {len(report['failures'])} unparseable files:")
        for path, err in report["failures"]:
            print(f"  {path}: {err}")
    return 0


# ----- train -----

def _load_config_file(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    fields = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields

_CONFIG_TYPES = {
    "spec": str, "coupled": bool, "optimizer": str, "lr": float,
    "clip": float, "batch_units": int, "max_epochs": int, "patience": int,
    "seed": int, "checkpoint": str,
}


def _make_config(args) -> TrainConfig:
    fields: dict = {}
    if args.config:
        for key, value in _load_config_file(_data_path(args.config)).items():
            if key not in _CONFIG_TYPES:
                raise UsageError(f"unknown config key {key!r}")
            typ = _CONFIG_TYPES[key]
            if isinstance(value, str) and typ is bool:
                fields[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(value, str) and typ is not str:
                fields[key] = typ(value)
            else:
                fields[key] = value
    for key in _CONFIG_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            fields[key] = flag
    try:
        return TrainConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _add_train_flags(sub, with_spec=True):
    if with_spec:
        sub.add_argument("--spec", help="model spec string")
        sub.add_argument("--coupled", action="store_true", default=None,
                         help="treat the spec as a coupled multi-part model")
    sub.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--clip", type=float, default=None,
                     help="max gradient norm (off by default)")
    sub.add_argument("--batch-units", dest="batch_units", type=int, default=None)
    sub.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    sub.add_argument("--patience", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)


def cmd_train(args) -> int:
    config = _make_config(args)
    manifest = CorpusManifest.load(_data_path(args.manifest))
    model = _build_model(config.spec, config.coupled, manifest, config.seed)
    train_scores = manifest.load_split("train")
    valid_scores = manifest.load_split("valid")
    if not train_scores:
        raise EmptyCorpus("manifest has no training files")
    result = train(model, train_scores, valid_scores or None, config,
                   log=lambda msg: print(msg))
    print(f"best epoch {result.best_epoch}  val {result.best_val:.4f}  "
          f"({result.epochs_run} epochs, {result.seconds:.1f}s)")
    out = _data_path(args.out or config.checkpoint or "model.pw")
    save_checkpoint(out, model, manifest.content_hash(),
                    extra={"config": config.to_json(),
                           "best_val": result.best_val,
                           "best_epoch": result.best_epoch})
    print(f"checkpoint: {out}")
    return 0


# ----- eval -----

def cmd_eval(args) -> int:
    model, header = load_checkpoint(_data_path(args.checkpoint))
    manifest = CorpusManifest.load(_data_path(args.manifest))
    check_manifest(header, manifest.content_hash())
    corpus = manifest.load_split(args.split)
    if not corpus:
        raise EmptyCorpus(f"split {args.split!r} is empty")
    report = cross_entropy_rate(model, corpus)
    report.spec_string = header["spec"]
    print(f"model: {header['kind']} {header['spec']}")
    print(report)
    if args.json:
        path = _data_path(args.json)
        path.write_text(json.dumps(report.to_json(), indent=2) + "\n",
                        encoding="utf-8")
        print(f"json: {path}")
    return 0


# ----- generate -----

def cmd_generate(args) -> int:
    model, header = load_checkpoint(_data_path(args.checkpoint))
    try:
        length = Fraction(args.beats)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"bad beat count {args.beats!r}") from exc
    score = generate(model, args.parts, length, seed=args.seed,
                     temperature=args.temperature)
    score.meta["title"] = f"sampled by {header['kind']} {header['spec']}"
    text = serialize_kern(score)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        out = _data_path(args.out)
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}  ({score.n_events()} events, {score.n_parts} parts)")
    return 0


# ----- gradcheck -----

def _toy_fixture(n_parts: int) -> Score:
    c, e, g = 60, 64, 67
    if n_parts == 1:
        return Score(parts=[Part([
            Event(beats(1), (c,)), Event(beats(1, 2), (e, g)),
            Event(beats(1, 2), ()), Event(beats(1), (g,)),
            Event(beats(1), (c, e)),
        ])])
    return Score(parts=[
        Part([Event(beats(1), (c,)), Event(beats(1, 2), (e,)),
              Event(beats(1, 2), (g,)), Event(beats(1), ()),
              Event(beats(1), (e,))]),
        Part([Event(beats(1, 2), (g,)), Event(beats(1, 2), (e, g)),
              Event(beats(1), (c,)), Event(beats(2), (g,))]),
    ])


def cmd_gradcheck(args) -> int:
    from .encode import DurationVocab, PitchRange, compute_resolution
    score = _toy_fixture(2 if args.coupled else 1)
    vocab = DurationVocab.from_corpus([score])
    pitch_range = PitchRange.from_corpus([score])
    resolution = compute_resolution([score])
    spec = args.spec or ("hier,pk=3,gk=2,h=6" if args.coupled
                         else "rnn,k=3,rel,loc,pc,h=6")
    try:
        if args.coupled:
            model = CoupledModel(parse_coupled_spec(spec), vocab, pitch_range,
                                 resolution, max_parts=2, seed=args.seed)
            arrays = model.encode_score(score)
        else:
            model = HomophonicModel(parse_model_spec(spec), vocab, pitch_range,
                                    resolution, seed=args.seed)
            arrays = model.encode_unit(score, 0)
    except ValueError as exc:
        raise UsageError(f"bad model spec {spec!r}: {exc}") from exc

    def forward():
        bits_t, bits_n = model.unit_loss(arrays)
        return ad.add(bits_t, bits_n)

    params = [model.params[k] for k in sorted(model.params)]
    report = ad.grad_check(forward, params, tolerance=args.tolerance,
                           max_entries=args.max_entries,
                           rng=np.random.default_rng(args.seed))
    print(f"spec: {spec}{' (coupled)' if args.coupled else ''}")
    print(report)
    return 0 if report.passed else 3


# ----- grid -----

def _read_grid_file(path: Path) -> list[tuple[str, bool]]:
    text = path.read_text(encoding="utf-8")
    entries: list[tuple[str, bool]] = []
    stripped = text.lstrip()
    if stripped.startswith("["):
        for item in json.loads(text):
            if isinstance(item, str):
                entries.append((item, False))
            else:
                entries.append((item["spec"], bool(item.get("coupled", False))))
        return entries
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("coupled:"):
            entries.append((line[len("coupled:"):].strip(), True))
        else:
            entries.append((line, False))
    return entries


def cmd_grid(args) -> int:
    manifest = CorpusManifest.load(_data_path(args.manifest))
    entries = _read_grid_file(_data_path(args.grid))
    if not entries:
        raise UsageError(f"grid file {args.grid} lists no specs")
    train_scores = manifest.load_split("train")
    valid_scores = manifest.load_split("valid")
    eval_scores = manifest.load_split(args.split)
    if not train_scores or not eval_scores:
        raise EmptyCorpus("grid needs non-empty train and eval splits")

    rows = []
    for i, (spec, coupled) in enumerate(entries, 1):
        base = {k: v for k, v in (("optimizer", args.optimizer),
                                  ("lr", args.lr), ("clip", args.clip),
                                  ("batch_units", args.batch_units),
                                  ("max_epochs", args.max_epochs),
                                  ("patience", args.patience),
                                  ("seed", args.seed)) if v is not None}
        config = TrainConfig(spec=spec, coupled=coupled, **base)
        model = _build_model(spec, coupled, manifest, config.seed)
        print(f"[{i}/{len(entries)}] training {spec}"
              f"{' (coupled)' if coupled else ''} ...")
        result = train(model, train_scores, valid_scores or None, config)
        report = cross_entropy_rate(model, eval_scores)
        rows.append({
            "experiment": i,
            "spec": spec,
            "coupled": coupled,
            "n_params": model.n_params(),
            "loss": report.total_bits_per_beat,
            "loss_t": report.loss_t_bits_per_beat,
            "loss_n": report.loss_n_bits_per_beat,
            "bits_per_event": report.bits_per_event,
            "best_epoch": result.best_epoch,
        })
        if args.save_dir:
            out_dir = _data_path(args.save_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out_dir / f"grid_{i:02d}.pw", model,
                            manifest.content_hash(),
                            extra={"config": config.to_json()})

    header = (f"{'#':>3} {'Spec':32} {'Params':>9} {'Loss':>8} "
              f"{'Loss_t':>8} {'Loss_n':>8}")
    print(header)
    print("-" * len(header))
    for r in rows:
        tag = ("coupled:" if r["coupled"] else "") + r["spec"]
        print(f"{r['experiment']:>3} {tag:32} {r['n_params']:>9} "
              f"{r['loss']:>8.2f} {r['loss_t']:>8.2f} {r['loss_n']:>8.2f}")
    if args.json:
        path = _data_path(args.json)
        path.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        print(f"json: {path}")
    return 0


# ----- parser -----

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partwise",
                     description="Part-factorized score modeling pipeline.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ingest", help="scan a .krn directory into a manifest")
    p.add_argument("directory")
    p.add_argument("--out", default="manifest.json")
    p.add_argument("--ratios", default="0.8,0.1,0.1",
                   help="train,valid,test split ratios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-piano", action="store_true",
                   help="drop piano scores from valid/test splits")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model against a manifest")
    p.add_argument("manifest")
    p.add_argument("--config", help="key=value or JSON config file")
    p.add_argument("--out", help="checkpoint path (default model.pw)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample a new score from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--parts", type=int, default=1)
    p.add_argument("--beats", default="16", help="length in beats (fraction ok)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0,
                   help="0 selects argmax decoding")
    p.add_argument("--out", default="-", help="output .krn path, - for stdout")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--spec", help="model spec to check (default: small rnn)")
    p.add_argument("--coupled", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", dest="max_entries", type=int, default=200,
                   help="sampled entries per parameter")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("grid", help="train and evaluate a list of specs")
    p.add_argument("grid", help="text file of spec strings, or JSON list")
    p.add_argument("manifest")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--json", help="write rows as JSON")
    p.add_argument("--save-dir", help="keep a checkpoint per grid entry")
    _add_train_flags(p, with_spec=False)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KernError, EmptyCorpus, CheckpointCorrupt, ManifestMismatch,
            FileNotFoundError, IsADirectoryError, NotADirectoryError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
