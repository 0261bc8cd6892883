"""``prosody-intent`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(including divergence and IO failures), 3 transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .corpus import Featurizer, SplitSpec, deserialize, generate_corpus, serialize, split_by_instruction
from .embeddings import EmbeddingSource
from .errors import ConfigurationError, ProsodyIntentError, TransportError
from .features import FEATURE_MODES, describe_dim, extract_file

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_TRANSPORT = 0, 1, 2, 3

MODEL_DEFAULTS = {
    "bilstm": {"hidden_dim": 512, "num_layers": 1, "num_heads": 4, "attn_layers": 1, "dropout": 0.45,
               "proj_dim": 256, "fusion_dim": 64},
    "transformer": {"model_dim": 448, "num_layers": 3, "num_heads": 8, "dropout": 0.25},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def fmt_num(x) -> str:
    """Compact float rendering: 0.0042 -> 4.2e-3, 0.45 -> 0.45."""
    if isinstance(x, bool) or not isinstance(x, float):
        return str(x)
    if x != 0 and abs(x) < 1e-2:
        mant, exp = f"{x:.6e}".split("e")
        return f"{mant.rstrip('0').rstrip('.')}e{int(exp)}"
    return f"{x:.6g}"


def _print_config(title: str, cfg: dict) -> None:
    print(f"[{title}] " + " ".join(f"{k}={fmt_num(v)}" for k, v in cfg.items()), flush=True)


def _write_rows(rows, path) -> None:
    from .training import write_csv

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, path)


def _split(samples, args):
    return split_by_instruction(samples, SplitSpec(seed=args.split_seed if args.split_seed is not None else args.seed))


def _pick_split(samples, args, name):
    if name == "all":
        return list(samples)
    train, val, test = _split(samples, args)
    return {"train": train, "val": val, "test": test}[name]


def _embedding(args) -> EmbeddingSource:
    if args.embedding_cache:
        return EmbeddingSource("file_cache", args.d_embed, args.embedding_cache, args.embedding_seed)
    return EmbeddingSource("pseudo", args.d_embed, None, args.embedding_seed)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    _print_config("gen-data", {"instructions": args.instructions, "speakers": args.speakers, "seed": args.seed,
                               "render": args.render, "raw": not args.no_raw, "out": args.out})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    audio_dir = args.audio_dir or out.with_suffix("").as_posix() + "_audio"
    samples = generate_corpus(args.instructions, args.speakers, seed=args.seed, render=args.render,
                              out_dir=audio_dir if args.render == "audio" else None, with_raw=not args.no_raw)
    serialize(samples, out)
    print(f"{len(samples)} samples written to {out}")
    try:
        train, val, test = split_by_instruction(samples, SplitSpec(seed=args.seed))
        for name, part in (("train", train), ("val", val), ("test", test)):
            ids = sorted({s.instruction_id for s in part})
            print(f"  {name:<5} {len(part):5d} samples, {len(ids)} instructions {ids[:8]}{' ...' if len(ids) > 8 else ''}")
    except ProsodyIntentError as exc:
        print(f"  split preview unavailable: {exc}")
    return EXIT_OK


def cmd_extract(args) -> int:
    _print_config("extract", {"audio_dir": args.audio_dir, "out": args.out})
    wavs = sorted(Path(args.audio_dir).glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {args.audio_dir}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for wav in wavs:
            align = wav.with_suffix(".align.json")
            fh.write(json.dumps(extract_file(wav, align), sort_keys=True) + "\n")
    print(f"{len(wavs)} feature records written to {out}")
    return EXIT_OK


def _train_configs(args, input_dim: int):
    from .training import TrainConfig

    file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    model_cfg = {**MODEL_DEFAULTS[args.arch], **file_cfg.pop("model", {})}
    tc = TrainConfig.for_architecture(args.arch)
    tc = TrainConfig.from_dict({**tc.to_dict(), **file_cfg})
    overrides = {k: v for k, v in {"lr": args.lr, "weight_decay": args.weight_decay, "max_epochs": args.epochs,
                                   "batch_size": args.batch_size, "patience_early_stop": args.patience}.items()
                 if v is not None}
    tc = replace(tc, seed=args.seed, **overrides)
    dim_key = "hidden_dim" if args.arch == "bilstm" else "model_dim"
    for flag, key in (("dropout", "dropout"), ("dim", dim_key), ("layers", "num_layers"), ("heads", "num_heads"),
                      ("attn_layers", "attn_layers")):
        value = getattr(args, flag, None)
        if value is not None:
            if key == "attn_layers" and args.arch != "bilstm":
                raise ConfigurationError("--attn-layers applies to the bilstm architecture only")
            model_cfg[key] = value
    model_cfg["input_dim"] = input_dim
    return model_cfg, tc


def cmd_train(args) -> int:
    from .models import save_checkpoint
    from .training import build_tagger, train

    embedding = _embedding(args)
    featurizer = Featurizer(args.features, embedding)
    model_cfg, tc = _train_configs(args, featurizer.dim)
    _print_config("train", {"arch": args.arch, "features": args.features, "lr": tc.lr,
                            "weight_decay": tc.weight_decay, "dropout": model_cfg["dropout"],
                            "layers": model_cfg["num_layers"], "input_dim": describe_dim(args.features, embedding.d_embed),
                            "seed": tc.seed})
    _print_config("train-config", tc.to_dict())
    _print_config("model-config", model_cfg)
    samples = deserialize(args.data)
    train_set, val_set, _ = _split(samples, args)
    featurizer.fit(train_set)
    model = build_tagger(args.arch, model_cfg, seed=tc.seed)

    def progress(row):
        if args.verbose:
            print(" ".join(f"{k}={fmt_num(v)}" for k, v in row.items()), flush=True)

    result = train(model, train_set, val_set, featurizer, tc, on_epoch=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out)
    history = args.history or str(out) + ".history.csv"
    _write_rows(result.history, history)
    print(f"best epoch {result.best_epoch} val GOAL/DETAIL F1 {result.best_val_f1:.4f}; "
          f"{len(result.history)} epochs; checkpoint {out}; history {history}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .models import load_checkpoint
    from .training import eval_rows, evaluate, featurizer_from_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    name = args.model_name or ckpt.architecture
    _print_config("eval", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                           "model_name": name, "features": ckpt.feature_mode, "seed": args.seed})
    samples = _pick_split(deserialize(args.data), args, args.split)
    report = evaluate(ckpt.build(), samples, featurizer_from_checkpoint(ckpt))
    print(report.summary())
    if args.out:
        _write_rows(eval_rows(name, ckpt.feature_mode, report), args.out)
        print(f"metrics written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .training import read_eval_rows, report_table

    _print_config("report", {"inputs": ",".join(args.inputs), "out": args.out})
    cells = {}
    for path in args.inputs:
        cells.update(read_eval_rows(Path(path).read_text()))
    text, csv_text = report_table(cells)
    print(text)
    if args.out:
        Path(args.out).write_text(csv_text)
        print(f"table written to {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    from .training import SearchSpace, TrainConfig, hyperparameter_search, reference_default_point

    space = SearchSpace(budget=args.budget, mode=args.mode)
    if args.space:
        spec = json.loads(Path(args.space).read_text())
        space = SearchSpace(**{**asdict(space), **{k: tuple(v) for k, v in spec.items() if k not in ("budget", "mode")},
                               **{k: spec[k] for k in ("budget", "mode") if k in spec}})
    base = TrainConfig.for_architecture(args.arch, seed=args.seed,
                                        **({"max_epochs": args.epochs} if args.epochs else {}))
    _print_config("search", {"arch": args.arch, "features": args.features, "budget": space.budget,
                             "mode": space.mode, "seed": args.seed, "max_epochs": base.max_epochs})
    samples = deserialize(args.data)
    train_set, val_set, _ = _split(samples, args)
    featurizer = Featurizer(args.features, _embedding(args)).fit(train_set)
    extra = [reference_default_point(args.arch)] if args.include_reference_default else []
    result = hyperparameter_search(space, train_set, val_set, featurizer, args.arch, base, extra, seed=args.seed,
                                   on_trial=lambda r: print(" ".join(f"{k}={fmt_num(v)}" for k, v in r.items()),
                                                            flush=True))
    _write_rows(result.trials, args.trials)
    print(f"best objective {result.best_objective:.4f} at {result.best_point}; trials log {args.trials}")
    if args.best_config:
        cfg = {**result.best_train_config.to_dict(),
               "model": {k: v for k, v in result.best_model_config.items() if k != "input_dim"}}
        Path(args.best_config).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_disambiguate(args) -> int:
    from . import llm

    transport = llm.LlmTransport(args.transport, args.endpoint, args.llm_model, args.timeout, args.max_retries,
                                 args.max_concurrent, args.backoff, args.api_key_env)
    _print_config("disambiguate", {"data": args.data, "split": args.split, "tagger": args.tagger,
                                   "transport": args.transport, "k": args.k, "seed": args.seed})
    samples = deserialize(args.data)
    train_set, _, _ = _split(samples, args)
    queries = _pick_split(samples, args, args.split)
    tagger = "model" if args.tagger == "checkpoint" else args.tagger
    predictions = None
    if tagger == "model":
        if not args.checkpoint:
            raise ConfigurationError("--tagger checkpoint needs --checkpoint")
        predictions = llm.predictions_from_checkpoint(queries, args.checkpoint)
    examples = llm.select_examples(train_set, args.k, {s.instruction_id for s in queries}, seed=args.seed)
    result = llm.eval_plan_selection(queries, examples, tagger, transport, predictions)
    print(f"plan-selection accuracy {result.accuracy:.4f} ({sum(r['correct'] for r in result.rows)}/"
          f"{len(result.rows)}, {result.invalid} invalid) tagger={args.tagger}")
    print("reference points: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in result.reference.items()))
    if args.out:
        _write_rows(result.rows, args.out)
        print(f"per-query results written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p, data=True):
    p.add_argument("--seed", type=int, default=42, help="random seed (default: %(default)s)")
    if data:
        p.add_argument("--data", required=True, help="corpus JSON-lines file")
        p.add_argument("--split-seed", type=int, default=None,
                       help="seed of the instruction-held-out split (default: --seed)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _embed_flags(p):
    p.add_argument("--d-embed", type=int, default=64, help="text embedding size (default: %(default)s)")
    p.add_argument("--embedding-cache", default=None, help="JSON embedding cache; pseudo embeddings when omitted")
    p.add_argument("--embedding-seed", type=int, default=0, help="pseudo-embedding seed (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosody-intent", description="Prosody-driven intent tagging for ambiguous instructions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--instructions", type=int, default=35, help="distinct instructions (default: %(default)s)")
    p.add_argument("--speakers", type=int, default=22, help="synthetic speakers (default: %(default)s)")
    p.add_argument("--render", choices=("features", "audio"), default="features",
                   help="derive features directly or via WAV files (default: %(default)s)")
    p.add_argument("--no-raw", action="store_true", help="skip cepstral features (features render only)")
    p.add_argument("--audio-dir", default=None, help="audio output directory (default: <out>_audio)")
    p.add_argument("--out", required=True, help="output JSON-lines path")
    _common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="extract word features from WAV + alignment pairs")
    p.add_argument("--audio-dir", required=True, help="directory of <id>.wav and <id>.align.json files")
    p.add_argument("--out", required=True, help="output feature JSON-lines path")
    _common(p, data=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a tagger")
    p.add_argument("--arch", choices=("bilstm", "transformer"), required=True, help="model architecture")
    p.add_argument("--features", choices=FEATURE_MODES, default="prosody", help="feature mode (default: %(default)s)")
    p.add_argument("--config", default=None, help="JSON file of training fields, optional \"model\" block")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None, help="history CSV (default: <out>.history.csv)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: per-architecture optimum)")
    p.add_argument("--weight-decay", type=float, default=None, help="weight decay (default: per-architecture)")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs (default: 200)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default: 16)")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience (default: 20)")
    p.add_argument("--dropout", type=float, default=None, help="dropout (default: 0.45 bilstm, 0.25 transformer)")
    p.add_argument("--dim", type=int, default=None, help="hidden/model width (default: 512 bilstm, 448 transformer)")
    p.add_argument("--layers", type=int, default=None, help="recurrent/encoder layers (default: 1 bilstm, 3 transformer)")
    p.add_argument("--heads", type=int, default=None, help="attention heads (default: 4 bilstm, 8 transformer)")
    p.add_argument("--attn-layers", type=int, default=None, help="bilstm attention layers (default: 1)")
    _embed_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="which split to score (default: %(default)s)")
    p.add_argument("--model-name", default=None, help="row label in reports (default: architecture)")
    p.add_argument("--out", default=None, help="metrics CSV path")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval CSVs into a results table")
    p.add_argument("inputs", nargs="+", help="eval CSV files")
    p.add_argument("--out", default=None, help="table CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("search", help="hyperparameter search")
    p.add_argument("--arch", choices=("bilstm", "transformer"), required=True, help="model architecture")
    p.add_argument("--features", choices=FEATURE_MODES, default="prosody", help="feature mode (default: %(default)s)")
    p.add_argument("--budget", type=int, default=20, help="sampled trials (default: %(default)s)")
    p.add_argument("--mode", choices=("random", "grid"), default="random", help="sampling mode (default: %(default)s)")
    p.add_argument("--space", default=None, help="JSON file overriding search ranges")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs per trial (default: 200)")
    p.add_argument("--include-reference-default", action="store_true", help="also evaluate the reference default configuration")
    p.add_argument("--trials", required=True, help="trials CSV path")
    p.add_argument("--best-config", default=None, help="write the best configuration as JSON")
    _embed_flags(p)
    _common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("disambiguate", help="choose task plans with an LLM")
    p.add_argument("--tagger", choices=("gold", "checkpoint", "none"), default="gold",
                   help="source of intent tags (default: %(default)s)")
    p.add_argument("--checkpoint", default=None, help="tagger checkpoint for --tagger checkpoint")
    p.add_argument("--transport", choices=("mock", "http"), default="mock", help="LLM transport (default: %(default)s)")
    p.add_argument("--endpoint", default=None, help="chat-completions URL (http)")
    p.add_argument("--llm-model", default=None, help="model name sent to the endpoint (http)")
    p.add_argument("--api-key-env", default="LLM_API_KEY", help="credential variable (default: %(default)s)")
    p.add_argument("--timeout", type=float, default=30.0, help="request timeout seconds (default: %(default)s)")
    p.add_argument("--max-retries", type=int, default=3, help="retries on transport/5xx errors (default: %(default)s)")
    p.add_argument("--backoff", type=float, default=1.0, help="initial backoff seconds (default: %(default)s)")
    p.add_argument("--max-concurrent", type=int, default=4, help="in-flight requests (default: %(default)s)")
    p.add_argument("--k", type=int, default=3, help="in-context examples (default: %(default)s)")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="queries to score (default: %(default)s)")
    p.add_argument("--out", default=None, help="per-query CSV path")
    _common(p)
    p.set_defaults(func=cmd_disambiguate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProsodyIntentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())
