"""Command-line front end for the whole pipeline.

One subcommand per stage: ingest, augment, enrich, embed-import,
retrieve, train, eval, ablate, baseline, gradcheck.  Settings resolve in
three layers (defaults, then a flat ``key = value`` config file, then
flags), and the resolved configuration plus content hashes of every input
file are echoed into a metadata JSON next to each artifact, so any output
can be traced back to exactly what produced it.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation
from .corpus import (
    balance_classes,
    build_case_database,
    load_dataset,
    load_lexicon,
    save_cases,
    subsample_database,
)
from .encoders import EncoderSpec, load_embedding_file, make_encoder
from .enrichment import (
    CompletionClient,
    CompletionClientConfig,
    EnrichmentCache,
    enrich_cases,
    load_demos,
)
from .errors import CbrError, ConfigError
from .labels import ENRICHMENT_KINDS, RepresentationKind, parse_kind
from .retriever import retrieve_top_k
from .training import (
    TrainConfig,
    finite_difference_check,
    load_checkpoint,
    random_probe_setup,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("ingest", "augment", "enrich", "embed-import", "retrieve",
               "train", "eval", "ablate", "baseline", "gradcheck")

# TrainConfig fields settable from the config file or flags.
_CONFIG_KEYS = ("k", "db_ratio", "representation", "heads", "dim",
                "hidden_dim", "epochs", "batch_size", "learning_rate",
                "optimizer", "seed", "attention_enabled", "pool")


def _hash_file(path: str | Path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f"sha256:{digest}"


def _write_meta(path: Path, command: str, config: dict,
                inputs: dict[str, str], extra: dict | None = None) -> None:
    """Sidecar metadata: resolved config plus input content hashes."""
    meta = {"command": command, "config": config,
            "input_hashes": {name: _hash_file(p) for name, p in inputs.items()
                             if p and Path(p).exists()}}
    if extra:
        meta.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; values are JSON when possible."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}, line {lineno}: unknown key {key!r}")
        value = value.strip()
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """defaults < config file < explicit flags, validated as one object."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if "representation" in merged:
        merged["representation"] = parse_kind(merged["representation"])
    return TrainConfig(**merged)


def _out_dir(args: argparse.Namespace) -> Path:
    out = args.out_dir or os.environ.get("CBR_OUT_DIR") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _encoder_spec(args: argparse.Namespace, config: TrainConfig) -> tuple[
        EncoderSpec, TrainConfig]:
    """Encoder spec from flags; file-backed stores dictate the dimension."""
    if getattr(args, "encoder", "hashed") == "file":
        if not getattr(args, "embeddings", None):
            raise ConfigError("--embeddings is required with --encoder file")
        store = load_embedding_file(args.embeddings)
        if config.dim != store.dim:
            logger.info("using embedding file dimension %d", store.dim)
            config = replace(config, dim=store.dim)
        spec = EncoderSpec(variant="file_backed", dim=store.dim,
                           path=str(args.embeddings), seed=config.seed)
        return spec, config
    return EncoderSpec(dim=config.dim, seed=config.seed), config


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_ingest(args) -> int:
    corpus = load_dataset(args.input, format=args.format)
    out = _out_dir(args)
    save_cases(corpus.train, out / "train.jsonl")
    written = {"train": len(corpus.train)}
    if corpus.test:
        save_cases(corpus.test, out / "test.jsonl")
        written["test"] = len(corpus.test)
    _write_meta(out / "ingest.meta.json", "ingest", {"format": args.format},
                _dataset_inputs(args.input), {"written": written})
    print(json.dumps({"train": len(corpus.train), "test": len(corpus.test),
                      "labels": corpus.label_counts("train")}, sort_keys=True))
    return 0


def _dataset_inputs(path: str) -> dict[str, str]:
    p = Path(path)
    if p.is_dir():
        return {f.name: str(f) for f in sorted(p.iterdir()) if f.is_file()}
    return {p.name: str(p)}


def _cmd_augment(args) -> int:
    corpus = load_dataset(args.input)
    lexicon = load_lexicon(args.lexicon)
    target = args.target or max(corpus.label_counts("train").values())
    balanced = balance_classes(corpus, target, lexicon, args.seed)
    out = _out_dir(args)
    save_cases(balanced.train, out / "train.jsonl")
    if balanced.test:
        save_cases(balanced.test, out / "test.jsonl")
    _write_meta(out / "augment.meta.json", "augment",
                {"target": target, "seed": args.seed},
                {**_dataset_inputs(args.input), "lexicon": args.lexicon},
                {"before": corpus.label_counts("train"),
                 "after": balanced.label_counts("train")})
    print(json.dumps({"target": target,
                      "after": balanced.label_counts("train")}, sort_keys=True))
    return 0


def _cmd_enrich(args) -> int:
    corpus = load_dataset(args.input)
    kinds = [parse_kind(k.strip()) for k in args.kinds.split(",") if k.strip()]
    for kind in kinds:
        if kind not in ENRICHMENT_KINDS:
            raise ConfigError(f"cannot enrich kind {kind.value!r}")
    demos = None
    if args.demos_dir:
        demos = {kind: load_demos(Path(args.demos_dir) / f"{kind.value}.jsonl")
                 for kind in kinds}
    client_config = CompletionClientConfig(
        endpoint=args.endpoint, model_id=args.model_id,
        max_retries=args.max_retries, offline=args.offline,
        temperature=args.temperature, max_tokens=args.max_tokens)
    client = CompletionClient(client_config, EnrichmentCache(args.cache),
                              demos=demos)
    out = _out_dir(args)
    enriched_train = enrich_cases(client, corpus.train, kinds)
    save_cases(enriched_train, out / "train.jsonl")
    written = {"train": len(enriched_train)}
    if corpus.test:
        enriched_test = enrich_cases(client, corpus.test, kinds)
        save_cases(enriched_test, out / "test.jsonl")
        written["test"] = len(enriched_test)
    _write_meta(out / "enrich.meta.json", "enrich",
                {"kinds": [k.value for k in kinds], "model_id": args.model_id,
                 "endpoint": args.endpoint, "offline": args.offline},
                _dataset_inputs(args.input),
                {"network_calls": client.network_calls, "written": written})
    print(json.dumps({"network_calls": client.network_calls,
                      "cache_size": len(client.cache)}, sort_keys=True))
    return 0


def _cmd_embed_import(args) -> int:
    store = load_embedding_file(args.embeddings, expected_dim=args.dim)
    out = _out_dir(args)
    _write_meta(out / "embed-import.meta.json", "embed-import",
                {"expected_dim": args.dim},
                {"embeddings": args.embeddings},
                {"dim": store.dim, "count": len(store)})
    print(json.dumps({"dim": store.dim, "count": len(store)}))
    return 0


def _cmd_retrieve(args) -> int:
    corpus = load_dataset(args.input)
    kind = parse_kind(args.representation)
    spec = EncoderSpec(dim=args.dim, seed=args.seed)
    encoder = make_encoder(spec)
    db = build_case_database(corpus.train, encoder, kinds=(kind,))
    query_vec = encoder.sentence_embedding(args.query)
    hits = retrieve_top_k(db, kind, query_vec, args.k)
    for hit in hits:
        case = db.case_by_id(hit.case_id)
        print(json.dumps({"rank": hit.rank, "score": round(hit.score, 6),
                          "id": hit.case_id, "label": case.label,
                          "text": case.text}, ensure_ascii=False))
    return 0


def _cmd_train(args) -> int:
    config = resolve_train_config(args)
    spec, config = _encoder_spec(args, config)
    corpus = load_dataset(args.input)
    encoder = make_encoder(spec)
    db = build_case_database(corpus.train, encoder,
                             kinds=(config.representation,))
    if config.db_ratio != 1.0:
        db = subsample_database(db, config.db_ratio, config.seed)
    model = train(config, db, corpus.train, spec, spec)
    out = _out_dir(args)
    checkpoint = out / "model.cbrm"
    save_checkpoint(model, checkpoint)
    _write_meta(out / "train.meta.json", "train", config.to_dict(),
                _dataset_inputs(args.input),
                {"checkpoint": _hash_file(checkpoint),
                 "db_fingerprint": model.db_fingerprint,
                 "history": model.history})
    final = model.history[-1] if model.history else {}
    print(json.dumps({"checkpoint": str(checkpoint),
                      "final_loss": final.get("loss"),
                      "final_accuracy": final.get("accuracy")}))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = load_dataset(args.input)
    testset = corpus.test or corpus.train
    encoder = make_encoder(model.token_spec)
    db = build_case_database(corpus.train, encoder,
                             kinds=(model.config.representation,))
    if model.config.db_ratio != 1.0:
        db = subsample_database(db, model.config.db_ratio, model.config.seed)
    report = evaluation.evaluate_model(model, testset, db)
    out = _out_dir(args)
    report.save(out / "eval.json")
    _write_meta(out / "eval.meta.json", "eval", model.config.to_dict(),
                {**_dataset_inputs(args.input), "checkpoint": args.checkpoint})
    print(json.dumps({"weighted_precision": report.weighted_precision,
                      "weighted_recall": report.weighted_recall,
                      "weighted_f1": report.weighted_f1,
                      "accuracy": report.accuracy}))
    return 0


def _cmd_ablate(args) -> int:
    config = resolve_train_config(args)
    spec, config = _encoder_spec(args, config)
    corpus = load_dataset(args.input)
    if not corpus.test:
        raise ConfigError("ablation needs a test split")
    grid = evaluation.AblationGrid(
        ks=tuple(int(v) for v in args.ks.split(",")),
        ratios=tuple(float(v) for v in args.ratios.split(",")),
        representations=tuple(parse_kind(v.strip())
                              for v in args.representations.split(",")),
        attention={"both": (True, False), "on": (True,),
                   "off": (False,)}[args.attention_grid])
    kinds = tuple(dict.fromkeys(grid.representations))
    db = build_case_database(corpus.train, make_encoder(spec), kinds=kinds)
    out = _out_dir(args)
    rows = evaluation.ablation_sweep(grid, config, db, corpus.train,
                                     corpus.test, out, spec, spec)
    _write_meta(out / "ablate.meta.json", "ablate",
                {**config.to_dict(), "grid": {
                    "ks": grid.ks, "ratios": grid.ratios,
                    "representations": [r.value for r in grid.representations],
                    "attention": grid.attention}},
                _dataset_inputs(args.input), {"cells": len(rows)})
    print(json.dumps({"cells": len(rows), "csv": str(out / "sweep.csv")}))
    return 0


def _cmd_baseline(args) -> int:
    corpus = load_dataset(args.input)
    if not corpus.test:
        raise ConfigError("baseline needs a test split")
    report = evaluation.frequency_baseline(
        corpus.label_counts("train"), corpus.test,
        seed=args.seed, trials=args.trials)
    out = _out_dir(args)
    report.save(out / "baseline.json")
    _write_meta(out / "baseline.meta.json", "baseline",
                {"seed": args.seed, "trials": args.trials},
                _dataset_inputs(args.input))
    print(json.dumps({"weighted_f1": report.weighted_f1,
                      "accuracy": report.accuracy}))
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for attention in ((True, False) if args.attention is None
                      else (args.attention,)):
        model, case, db = random_probe_setup(
            args.seed, dim=args.dim, heads=args.heads, k=args.k,
            attention_enabled=attention, pool=args.pool or "mean")
        error = finite_difference_check(model, case, db, eps=args.eps)
        print(f"attention={'on' if attention else 'off'} "
              f"max_relative_error={error:.3e}")
        worst = max(worst, error)
    return 0 if worst < args.threshold else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", default=None,
                        help="artifact directory (env CBR_OUT_DIR, default ./out)")
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="flat key = value config file")
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--db-ratio", dest="db_ratio", type=float, default=None)
    parser.add_argument("--representation", default=None)
    parser.add_argument("--heads", type=int, default=None)
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float,
                        default=None)
    parser.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--attention", dest="attention_enabled",
                        action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--pool", choices=("mean", "first"), default=None)
    parser.add_argument("--encoder", choices=("hashed", "file"), default="hashed")
    parser.add_argument("--embeddings", default=None,
                        help="embedding file for --encoder file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fallacy-cbr",
        description="Case-based logical fallacy classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize a corpus to JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("augment", help="balance classes by synonym substitution")
    p.add_argument("--input", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--target", type=int, default=None,
                   help="per-class size (default: largest class)")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("enrich", help="generate auxiliary case texts")
    p.add_argument("--input", required=True)
    p.add_argument("--kinds",
                   default="counterarguments,goals,explanations,structure")
    p.add_argument("--cache", required=True, help="append-only JSONL cache")
    p.add_argument("--endpoint", default="http://localhost:8080/complete")
    p.add_argument("--model-id", dest="model_id", default="completion-v1")
    p.add_argument("--demos-dir", dest="demos_dir", default=None)
    p.add_argument("--max-retries", dest="max_retries", type=int, default=3)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=256)
    p.add_argument("--offline", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_enrich)

    p = sub.add_parser("embed-import", help="validate an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dim", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_embed_import)

    p = sub.add_parser("retrieve", help="query the case database")
    p.add_argument("--input", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--representation", default="text")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("train", help="train adapter and classifier")
    p.add_argument("--input", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep k, ratio, representation, attention")
    p.add_argument("--input", required=True)
    p.add_argument("--ks", default="1")
    p.add_argument("--ratios", default="0.1")
    p.add_argument("--representations", default="text")
    p.add_argument("--attention-grid", dest="attention_grid",
                   choices=("both", "on", "off"), default="on")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("baseline", help="frequency-sampling baseline")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    _add_common(p)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--attention", action=argparse.BooleanOptionalAction,
                   default=None, help="check one path only (default: both)")
    p.add_argument("--pool", choices=("mean", "first"), default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(),
                                      logging.WARNING))
    try:
        # Range problems in flags or config file are usage errors.
        if args.func in (_cmd_train, _cmd_ablate):
            resolve_train_config(args)
    except CbrError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CbrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
