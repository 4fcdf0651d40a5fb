"""Command-line pipeline: ingest, embed, train, predict, ensemble, evaluate.

Every command writes into ``--out DIR`` and leaves a ``manifest.json`` there
with the resolved configuration, input/output digests, versions and timings.
Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, abae, cat, corpus, embeddings, ensembles, evaluation, synthetic
from .numerics import derive_seed

log = logging.getLogger("anchored_absa")


class ValidationError(Exception):
    """Bad input or configuration; reported with exit code 1."""


class UsageError(ValidationError):
    pass


# ---------------------------------------------------------------- file helpers


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_input(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"input file not found: {p}")
    return p.read_bytes()


class Run:
    """Collects outputs and stage timings, then writes the manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.out = Path(args.out)
        self.config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def input(self, path) -> bytes:
        data = read_input(path)
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def stage(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._t, 6)
        self._t = now

    def write(self, name: str, data: bytes) -> Path:
        path = self.out / name
        atomic_write(path, data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {
                "anchored_absa": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "timings_seconds": self.timings,
        }
        atomic_write(self.out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n").encode())


def load_corpus(run: Run, path, stopwords=None) -> list[corpus.Sentence]:
    data = run.input(path)
    try:
        return corpus.parse_jsonl(data, stopwords or ())
    except corpus.CorpusError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def load_embeddings(run: Run, path) -> embeddings.EmbeddingMatrix:
    try:
        return embeddings.load_text(run.input(path))
    except embeddings.EmbeddingFormatError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def encode_against(sentences, E, vocab_path=None, run: Run | None = None):
    """Encode with the embedding vocabulary, refusing corpora that do not match it."""
    if vocab_path is not None:
        vocab = corpus.Vocabulary.from_text(run.input(vocab_path))
        missing = [w for w in vocab.words if w not in E]
        if missing:
            raise ValidationError(
                f"vocabulary mismatch: {len(missing)} words of {vocab_path} have no embedding (e.g. {missing[:5]})"
            )
    encoded = E.vocab.encode_all(sentences)
    if sentences and not any(s.token_ids for s in encoded):
        raise ValidationError("vocabulary mismatch: no corpus token has an embedding")
    return encoded


def _float_csv(header: list[str], rows: list[list[float]]) -> bytes:
    lines = [",".join(header)]
    for i, row in enumerate(rows, start=1):
        lines.append(",".join([str(i)] + [repr(float(x)) for x in row]))
    return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> None:
    run = Run("ingest", args)
    stop = corpus.load_stopwords(args.stopwords)
    if args.stopwords:
        run.input(args.stopwords)
    sentences = []
    for path in args.inputs:
        data = run.input(path)
        try:
            parsed = (corpus.parse_semeval_xml if args.format == "semeval" else corpus.parse_jsonl)(data, stop)
        except corpus.CorpusError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        sentences.extend(parsed)
    if not sentences:
        raise ValidationError("empty corpus: the inputs contain no sentences")
    run.stage("parse")
    n_before = len(sentences)
    if args.single_aspect:
        sentences = corpus.filter_single_aspect(sentences)
    dropped = n_before - len(sentences)
    try:
        vocab = corpus.build_vocab(sentences, args.min_count)
    except corpus.CorpusError as exc:
        raise ValidationError(str(exc)) from exc
    run.stage("vocabulary")
    run.write("corpus.jsonl", corpus.to_jsonl(sentences))
    run.write("vocab.tsv", vocab.to_text())
    run.config["stats"] = {"read": n_before, "kept": len(sentences), "dropped_multi_aspect": dropped, "vocabulary": len(vocab)}
    run.finish()
    print(f"read {n_before} sentences, kept {len(sentences)}, dropped {dropped} multi-aspect; vocabulary {len(vocab)}")


def cmd_synth(args) -> None:
    run = Run("synth", args)
    spec = synthetic.SyntheticSpec(n_sentences=args.n_sentences, seed=derive_seed(args.seed, "synth"))
    sentences, _ = synthetic.generate(spec)
    run.write("corpus.jsonl", corpus.to_jsonl(sentences))
    run.finish()
    print(f"wrote {len(sentences)} synthetic sentences")


def cmd_train_embeddings(args) -> None:
    run = Run("train-embeddings", args)
    sentences = load_corpus(run, args.corpus)
    if args.vocab:
        vocab = corpus.Vocabulary.from_text(run.input(args.vocab))
    else:
        vocab = corpus.build_vocab(sentences, args.min_count)
    sentences = vocab.encode_all(sentences)
    config = embeddings.SgnsConfig(
        dim=args.dim,
        window=args.window,
        negatives=args.negatives,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=derive_seed(args.seed, "embeddings"),
    )
    result = embeddings.train_sgns(sentences, vocab, config)
    run.stage("train")
    run.write("embeddings.txt", embeddings.save_text(result.embeddings))
    run.write("sgns_loss.csv", _float_csv(["epoch", "loss"], [[x] for x in result.loss_history]))
    run.finish()
    print(f"trained {len(vocab)} x {config.dim} embeddings")


def _hyper(args) -> abae.AbaeHyper:
    return abae.AbaeHyper(
        k=args.k,
        lam=args.lam,
        negatives=args.negatives,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        sigma=args.sigma,
        bounded_attention=not args.unbounded_attention,
        seed=derive_seed(args.seed, "abae"),
    )


def cmd_train_abae(args) -> None:
    run = Run("train-abae", args)
    E = load_embeddings(run, args.embeddings)
    sentences = encode_against(load_corpus(run, args.corpus), E, args.vocab, run)
    hyper = _hyper(args)
    anchors = None
    if args.anchors:
        try:
            prior = cat.predictions_from_jsonl(run.input(args.anchors))
            anchors = ensembles.build_anchors(prior, E, sigma=args.sigma)
            anchors = anchors.align([s.id for s in sentences])
        except (ensembles.EnsembleError, corpus.CorpusError) as exc:
            raise ValidationError(f"{args.anchors}: {exc}") from exc
    run.stage("load")
    result = ensembles.anchored_train(sentences, E, hyper, anchors)
    run.stage("train")
    run.write("model.abae", abae.save_model(result.params, hyper))
    rows = [[loss, c["J"], c["U"], c["K"]] for loss, c in zip(result.loss_history, result.component_history)]
    run.write("loss.csv", _float_csv(["epoch", "loss", "J", "U", "K"], rows))
    run.config["skipped_sentences"] = [sentences[i].id for i in result.skipped]
    run.finish()
    print(f"trained ABAE k={hyper.k} on {len(sentences) - len(result.skipped)} sentences; final loss {result.loss_history[-1]:.4f}")


def _load_model(run: Run, path):
    try:
        return abae.load_model(run.input(path))
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def cmd_predict_abae(args) -> None:
    run = Run("predict-abae", args)
    params, hyper = _load_model(run, args.model)
    E = load_embeddings(run, args.embeddings)
    if E.dim != params.d:
        raise ValidationError(f"model dimension {params.d} does not match embeddings dimension {E.dim}")
    sentences = encode_against(load_corpus(run, args.corpus), E)
    mapping = None
    if args.mapping:
        mapping = evaluation.load_mapping(run.input(args.mapping).decode("utf-8"))
        evaluation.check_mapping(mapping, params.k)
    elif args.auto_mapping:
        mapping = evaluation.auto_mapping(params.T, E)
        run.write("mapping.auto.tsv", evaluation.dump_mapping(mapping).encode())
    aspects = abae.predict(sentences, params, E, hyper.bounded_attention)
    cats = evaluation.apply_mapping(aspects, mapping) if mapping else [None] * len(aspects)
    lines = []
    for s, a, c in zip(sentences, aspects, cats):
        rec = {"id": s.id, "aspect": a}
        if mapping:
            rec["category"] = c.value if c is not None else None
        lines.append(json.dumps(rec, sort_keys=True))
    run.write("predictions.jsonl", ("\n".join(lines) + "\n").encode())
    run.finish()
    print(f"predicted {len(sentences)} sentences ({sum(a is None for a in aspects)} without in-vocabulary words)")


def _read_seed_words(run: Run, path) -> dict | None:
    if not path:
        return None
    raw = json.loads(run.input(path))
    return {corpus.GoldCategory.parse(k): tuple(v) for k, v in raw.items()}


def cmd_run_cat(args) -> None:
    run = Run("run-cat", args)
    E = load_embeddings(run, args.embeddings)
    sentences = encode_against(load_corpus(run, args.corpus), E)
    seed_words = _read_seed_words(run, args.seed_words)
    try:
        model = cat.build_cat_model(sentences, E, seed_words, top_n=args.top_n, gamma=args.gamma)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"cannot build CAt model: {exc}") from exc
    preds = cat.predict_all(sentences, model, E)
    run.write("predictions.jsonl", cat.predictions_to_jsonl(preds))
    run.config["placeholder_word"] = model.placeholder_word
    run.finish()
    print(f"labelled {len(preds)} sentences; placeholder label word {model.placeholder_word!r}")


def _read_categories(run: Run, path, field_names=("category", "label")) -> dict[str, corpus.GoldCategory | None]:
    out = {}
    for lineno, line in enumerate(run.input(path).decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        name = next((rec[f] for f in field_names if f in rec), "__missing__")
        if "id" not in rec or name == "__missing__":
            raise ValidationError(f"{path} line {lineno}: expected 'id' and one of {field_names}")
        out[str(rec["id"])] = None if name in (None, cat.NONE_LABEL) else corpus.GoldCategory.parse(name)
    return out


def _rule_config(args) -> ensembles.RuleConfig:
    if args.preset:
        base = ensembles.PRESETS[args.preset]
    else:
        base = ensembles.RuleConfig()
    mode = ensembles.CandidateMode(args.candidates) if args.candidates else base.candidate_mode
    if args.scope is None:
        scope = base.disambiguation_scope
    else:
        scope = frozenset(corpus.GoldCategory.parse(x) for x in args.scope.split(",") if x.strip())
    fallback = ensembles.Fallback(args.fallback) if args.fallback else base.fallback
    return ensembles.RuleConfig(mode, scope, fallback)


def cmd_ensemble_rule(args) -> None:
    run = Run("ensemble-rule", args)
    E = load_embeddings(run, args.embeddings)
    sentences = encode_against(load_corpus(run, args.corpus), E)
    cat_preds = _read_categories(run, args.cat, ("label", "category"))
    abae_preds = _read_categories(run, args.abae, ("category",))
    config = _rule_config(args)
    run.config["rule_config"] = {
        "candidate_mode": config.candidate_mode.value,
        "disambiguation_scope": [c.value for c in config.scope_in_order],
        "fallback": config.fallback.value,
    }
    preds = ensembles.rule_ensemble(cat_preds, abae_preds, sentences, E, config)
    run.write("ensemble.jsonl", ensembles.ensemble_to_jsonl(preds))
    run.finish()
    counts = {}
    for p in preds:
        counts[p.provenance.value] = counts.get(p.provenance.value, 0) + 1
    print("ensemble provenance: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))


def cmd_evaluate(args) -> None:
    run = Run("evaluate", args)
    sentences = load_corpus(run, args.corpus)
    gold = {s.id: s.gold for s in sentences if s.gold is not None}
    if not gold:
        raise ValidationError(f"{args.corpus}: no single-aspect gold labels to evaluate against")
    names = args.name or []
    if names and len(names) != len(args.pred):
        raise ValidationError("--name must be given once per --pred")
    mapping = evaluation.load_mapping(run.input(args.mapping).decode()) if args.mapping else None
    reports = {}
    for i, path in enumerate(args.pred):
        if mapping is not None:
            recs = [json.loads(x) for x in run.input(path).decode().split("\n") if x.strip()]
            mapped = evaluation.apply_mapping([r.get("aspect") for r in recs], mapping)
            pred = {str(r["id"]): c for r, c in zip(recs, mapped)}
        else:
            pred = _read_categories(run, path)
        missing = [sid for sid in gold if sid not in pred]
        if missing:
            raise ValidationError(f"{path}: no prediction for {len(missing)} gold sentences (e.g. {missing[:5]})")
        ids = list(gold)
        reports[names[i] if names else Path(path).stem] = evaluation.score(
            [pred[sid] for sid in ids], [gold[sid] for sid in ids]
        )
    text = []
    for name, rep in reports.items():
        text.append(evaluation.format_report(rep, title=name))
    if len(reports) > 1:
        text.append(evaluation.format_comparison(reports))
    run.write("report.txt", "\n".join(text).encode())
    payload = {name: json.loads(rep.to_json()) for name, rep in reports.items()}
    run.write("report.json", (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    run.finish()
    print("\n".join(text), end="")


def cmd_top_words(args) -> None:
    run = Run("top-words", args)
    params, _ = _load_model(run, args.model)
    E = load_embeddings(run, args.embeddings)
    try:
        words = abae.top_words(params.T, E, args.n)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    text = "".join(f"{i}\t{' '.join(ws)}\n" for i, ws in enumerate(words))
    run.write("top_words.tsv", text.encode())
    run.finish()
    print(text, end="")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--seed", type=int, default=0, help="top-level seed (split per stage)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="anchored-absa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {}

    p = sub.add_parser("ingest", help="parse SemEval XML / JSONL into a corpus + vocabulary")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=["semeval", "jsonl"], default="jsonl")
    p.add_argument("--single-aspect", action="store_true", help="drop sentences with several categories")
    p.add_argument("--stopwords", help="one word per line (default: bundled English list)")
    p.add_argument("--min-count", type=int, default=10)
    p.set_defaults(func=cmd_ingest)
    cmds["ingest"] = p

    p = sub.add_parser("synth", help="write a synthetic 3-topic corpus")
    p.add_argument("--n-sentences", type=int, default=5000)
    p.set_defaults(func=cmd_synth)
    cmds["synth"] = p

    p = sub.add_parser("train-embeddings", help="skip-gram negative-sampling embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_train_embeddings)
    cmds["train-embeddings"] = p

    p = sub.add_parser("train-abae", help="train ABAE, optionally anchored on prior labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--vocab", help="ingest vocabulary; checked against the embeddings")
    p.add_argument("--anchors", help="prior predictions JSONL {id, label}")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--k", type=int, default=14)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--unbounded-attention", action="store_true", help="use raw bilinear attention logits")
    p.set_defaults(func=cmd_train_abae)
    cmds["train-abae"] = p

    p = sub.add_parser("predict-abae", help="aspect ids (and mapped categories) per sentence")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mapping", help="aspect_id<TAB>Category file")
    g.add_argument("--auto-mapping", action="store_true", help="map aspects to the nearest seed word")
    p.set_defaults(func=cmd_predict_abae)
    cmds["predict-abae"] = p

    p = sub.add_parser("run-cat", help="label sentences with the CAt prior")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--top-n", type=int, default=200)
    p.add_argument("--gamma", type=float, help="RBF width (default 1/dim)")
    p.add_argument("--seed-words", help='JSON {"Food": ["food"], ...}')
    p.set_defaults(func=cmd_run_cat)
    cmds["run-cat"] = p

    p = sub.add_parser("ensemble-rule", help="rule-based CAt + ABAE ensemble")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--cat", required=True, help="run-cat predictions.jsonl")
    p.add_argument("--abae", required=True, help="predict-abae predictions.jsonl (with categories)")
    p.add_argument("--preset", choices=sorted(ensembles.PRESETS))
    p.add_argument("--candidates", choices=[m.value for m in ensembles.CandidateMode])
    p.add_argument("--scope", help="comma-separated subset of food,staff,ambience; empty disables")
    p.add_argument("--fallback", choices=[f.value for f in ensembles.Fallback])
    p.set_defaults(func=cmd_ensemble_rule)
    cmds["ensemble-rule"] = p

    p = sub.add_parser("evaluate", help="P/R/F1 against gold categories")
    p.add_argument("--corpus", required=True, help="corpus with gold categories")
    p.add_argument("--pred", required=True, action="append")
    p.add_argument("--name", action="append")
    p.add_argument("--mapping", help="map 'aspect' ids instead of reading 'category'")
    p.set_defaults(func=cmd_evaluate)
    cmds["evaluate"] = p

    p = sub.add_parser("top-words", help="nearest vocabulary words per aspect")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("-n", type=int, default=10)
    p.set_defaults(func=cmd_top_words)
    cmds["top-words"] = p

    for p in cmds.values():
        _common(p)
    return parser, cmds


def parse_args(argv) -> argparse.Namespace:
    parser, cmds = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(read_input(args.config))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON: {exc.msg}") from exc
        sub = cmds[args.command]
        section = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        section.update(cfg.get(args.command, {}))
        known = {a.dest for a in sub._actions}
        unknown = sorted(k.replace("-", "_") for k in section if k.replace("-", "_") not in known)
        if unknown:
            raise ValidationError(f"{args.config}: unknown keys for {args.command}: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
        args = parser.parse_args(argv)
    return args


def _validate(args) -> None:
    if getattr(args, "sigma", 0) is not None and getattr(args, "sigma", 0) < 0:
        raise ValidationError("--sigma must be non-negative")
    for name in ("inputs",):
        for path in getattr(args, name, []) or []:
            read_input(path)
    for name in ("corpus", "embeddings", "model", "vocab", "anchors", "mapping", "cat", "abae", "stopwords", "seed_words"):
        path = getattr(args, name, None)
        if path:
            read_input(path)
    for path in getattr(args, "pred", None) or []:
        read_input(path)


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        _validate(args)
        args.func(args)
    except abae.TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (RuntimeError, MemoryError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
