"""Command-line entry point: augment, train, eval, export-embeddings.

Exit codes are a stable contract: 0 success, 1 usage or config error,
2 data error, 3 training divergence, 4 evaluation-input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from .cda import load_lexicon
from .data import Corpus, generate_synthetic_corpus, ingest_nli_jsonl
from .encoder import EncoderConfig, EncoderModel, build_vocab, encode_texts
from .errors import (BadTau, ConfigError, DebiasKitError, DimMismatch,
                     DivergedLoss, EmptyCorpus, EmptyInput, EmptySet,
                     MalformedItemFile, MalformedLexicon, MalformedLine,
                     MissingGender, OutOfRange)
from .metrics import (ClassifiedExample, MetricReport, bias_nli_scores,
                      crows_driver, crows_ss, seat_statistic, stereoset_driver,
                      stereoset_scores, tpr_gaps, winobias_tpr)
from .objective import ObjectiveConfig
from .trainer import (FineTuneConfig, TrainConfig, load_checkpoint,
                      save_checkpoint, train, train_probe)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_EVAL = 4

_DATA_ERRORS = (MalformedLine, MalformedLexicon, EmptyCorpus)
_EVAL_ERRORS = (MalformedItemFile, EmptyInput, EmptySet, DimMismatch,
                MissingGender, BadTau, OutOfRange)

EXPECTED_PROFESSION_COUNT = 28


@dataclass
class RunConfig:
    """Flat training-run configuration; unknown keys are rejected."""

    alpha: float = 0.05
    lambda_: float = 0.1
    tau: float = 0.05
    align_variant: str = "AL1"
    use_cl: bool = True
    use_al: bool = True
    use_mlm: bool = True
    exclude_all_duplicates: bool = False
    lr: float = 5e-5
    batch_size: int = 32
    grad_accum: int = 1
    epochs: int = 2
    seeds: list = field(default_factory=lambda: [0])
    mask_prob: float = 0.15
    maxlen: int = 32
    layers: int = 2
    heads: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 256
    dropout: float = 0.1
    tie_mlm: bool = True
    warmup_steps: int = 0
    eval_every: int = 0
    train_data: str | None = None
    label_filter: list = field(default_factory=lambda: ["entailment"])
    gender_filter: bool = True
    lexicon: str | None = None
    synthetic_pairs: int = 0
    synthetic_bias: float = 1.0
    synthetic_seed: int = 0
    output_dir: str = "runs"

    _JSON_KEYS = {"lambda": "lambda_"}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            attr = cls._JSON_KEYS.get(key, key)
            if attr not in known or attr.startswith("_"):
                raise ConfigError(f"unknown config key: {key!r}")
            kwargs[attr] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        return out

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(alpha=self.alpha, lambda_=self.lambda_, tau=self.tau,
                               align_variant=self.align_variant, use_cl=self.use_cl,
                               use_al=self.use_al, use_mlm=self.use_mlm,
                               exclude_all_duplicates=self.exclude_all_duplicates)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, heads=self.heads,
                             hidden_dim=self.hidden_dim, ffn_dim=self.ffn_dim,
                             maxlen=self.maxlen, dropout=self.dropout,
                             tie_mlm=self.tie_mlm)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size,
                           grad_accum=self.grad_accum, epochs=self.epochs,
                           seed=seed, maxlen=self.maxlen, mask_prob=self.mask_prob,
                           warmup_steps=self.warmup_steps, eval_every=self.eval_every,
                           objective=self.objective_config())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def cmd_augment(args) -> int:
    lex = load_lexicon(args.lexicon)
    label_filter = set(args.label_filter.split(",")) if args.label_filter else None
    corpus = ingest_nli_jsonl(args.input, label_filter, lex,
                              gender_filter=args.gender_filter)
    if args.output:
        corpus.dump_jsonl(args.output)
    stats = {
        "read": corpus.total_read,
        "kept": corpus.kept,
        "changed_premise": sum(1 for q in corpus.quads if not q.premise_unchanged),
        "changed_hypothesis": sum(1 for q in corpus.quads if not q.hypothesis_unchanged),
    }
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    config = RunConfig.from_dict(raw)
    for text in args.set or []:
        key, value = _parse_override(text)
        merged = config.to_dict()
        if key not in merged:
            raise ConfigError(f"unknown config key: {key!r}")
        merged[key] = value
        config = RunConfig.from_dict(merged)
    for name in args.ablate or []:
        if name == "no-mlm":
            config.use_mlm = False
        elif name == "no-cl":
            config.use_cl = False
        elif name == "no-al":
            config.use_al = False
        else:
            raise ConfigError(f"unknown ablation {name!r}; use no-mlm, no-cl, or no-al")
    if args.seeds:
        config.seeds = [int(s) for s in args.seeds.split(",")]
    return config


def _load_train_corpus(config: RunConfig) -> Corpus:
    lex = load_lexicon(config.lexicon)
    if config.train_data:
        label_filter = set(config.label_filter) if config.label_filter else None
        return ingest_nli_jsonl(config.train_data, label_filter, lex,
                                gender_filter=config.gender_filter)
    if config.synthetic_pairs > 0:
        corpus, _ = generate_synthetic_corpus(config.synthetic_seed,
                                              config.synthetic_pairs,
                                              config.synthetic_bias, lex)
        return corpus
    raise ConfigError("config needs either train_data or synthetic_pairs > 0")


def cmd_train(args) -> int:
    config = _load_run_config(args)
    corpus = _load_train_corpus(config)
    vocab = build_vocab(corpus.texts())
    resolved = config.to_dict()
    for seed in config.seeds:
        out_dir = os.path.join(config.output_dir, f"seed-{seed}")
        os.makedirs(out_dir, exist_ok=True)
        model = EncoderModel(vocab, config.encoder_config(), seed=seed)
        model, trace, _ = train(model, corpus, config.train_config(seed),
                                checkpoint_dir=out_dir)
        with open(os.path.join(out_dir, "trace.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(trace.to_jsonl())
        final = os.path.join(out_dir, "final.mbl")
        save_checkpoint(model, final, extra_config=resolved)
        print(f"seed {seed}: {len(trace.steps)} steps, "
              f"final total loss {trace.steps[-1].total:.6f}, checkpoint {final}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_jsonl(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedItemFile(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    if not records:
        raise MalformedItemFile(f"{path}: empty item file")
    return records


def _read_classified_csv(path):
    """First row: 'classes' then the label set; second row: column header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or rows[0][:1] != ["classes"] or rows[1] != ["gender", "true", "pred"]:
        raise MalformedItemFile(f"{path}: expected a classes row, a gender,true,pred "
                                "header, and at least one data row")
    classes = [c for c in rows[0][1:] if c]
    if not classes:
        raise MalformedItemFile(f"{path}: empty class list")
    if len(classes) != EXPECTED_PROFESSION_COUNT:
        print(f"warning: {len(classes)} classes declared "
              f"(the reference task has {EXPECTED_PROFESSION_COUNT})", file=sys.stderr)
    examples = []
    for lineno, row in enumerate(rows[2:], start=3):
        if not row:
            continue
        if len(row) != 3:
            raise MalformedItemFile(f"{path}:{lineno}: expected gender,true,pred")
        gender, true, pred = row
        if gender not in ("M", "F"):
            raise MalformedItemFile(f"{path}:{lineno}: gender must be M or F")
        if true not in classes or pred not in classes:
            raise MalformedItemFile(f"{path}:{lineno}: label outside the declared classes")
        examples.append(ClassifiedExample(gender=gender, true=true, pred=pred))
    return examples, classes


def _read_distributions_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["p_entail", "p_neutral", "p_contradict"]:
        raise MalformedItemFile(f"{path}: expected header p_entail,p_neutral,p_contradict")
    try:
        dists = np.array([[float(v) for v in row] for row in rows[1:] if row],
                         dtype=np.float64)
    except ValueError as exc:
        raise MalformedItemFile(f"{path}: non-numeric probability ({exc})") from exc
    if dists.size == 0:
        raise MalformedItemFile(f"{path}: no distributions")
    return dists


def _eval_model_metric(args, report: MetricReport):
    for ckpt_path in args.checkpoint:
        model = load_checkpoint(ckpt_path)
        if args.metric == "stereoset":
            result = stereoset_driver(model, _read_jsonl(args.items))
            if not result.items:
                raise EmptyInput("every item was skipped as out-of-vocabulary")
            scores = stereoset_scores(result.items)
            report.add("stereoset_lm", scores.lm)
            report.add("stereoset_ss", scores.ss)
            report.add("stereoset_icat", scores.icat)
        elif args.metric == "crows":
            result = crows_driver(model, _read_jsonl(args.items))
            if not result.items:
                raise EmptyInput("every pair was skipped")
            report.add("crows_ss", crows_ss(result.items).ss)
        elif args.metric == "seat":
            with open(args.items, encoding="utf-8") as fh:
                spec = json.load(fh)
            groups = {}
            for key in ("targets_x", "targets_y", "attributes_a", "attributes_b"):
                if key not in spec or not spec[key]:
                    raise MalformedItemFile(f"{args.items}: missing or empty {key!r}")
                groups[key] = encode_texts(model, spec[key], repr_mode=args.repr)
            result = seat_statistic(groups["targets_x"], groups["targets_y"],
                                    groups["attributes_a"], groups["attributes_b"])
            report.add("seat_statistic", result.statistic)
            report.add("seat_effect_size", result.effect_size)
        elif args.metric == "probe":
            records = _read_jsonl(args.items)
            texts, labels, genders = [], [], []
            for rec in records:
                if "text" not in rec or "label" not in rec:
                    raise MalformedItemFile(f"{args.items}: records need text and label")
                texts.append(rec["text"])
                labels.append(rec["label"])
                genders.append(rec.get("gender"))
            classes = sorted(set(labels))
            label_ids = np.array([classes.index(l) for l in labels])
            embeddings = encode_texts(model, texts, repr_mode=args.repr)
            n = len(texts)
            split = max(1, int(n * 0.8))
            probe = train_probe(embeddings[:split], label_ids[:split], len(classes),
                                lr=args.probe_lr, steps=args.probe_steps)
            preds = probe.predict(embeddings[split:])
            truth = label_ids[split:]
            report.add("probe_accuracy", float((preds == truth).mean()))
            if all(g in ("M", "F") for g in genders[split:]) and truth.size:
                examples = [ClassifiedExample(gender=genders[split + i],
                                              true=classes[truth[i]],
                                              pred=classes[preds[i]])
                            for i in range(len(truth))]
                result = tpr_gaps(examples, classes=classes)
                report.add("probe_tpr_gap", result.gap_overall)
                report.add("probe_tpr_rms", result.rms)


def _eval_file_metric(args, report: MetricReport):
    for path in args.inputs:
        if args.metric == "tpr":
            examples, classes = _read_classified_csv(path)
            result = tpr_gaps(examples, classes=classes)
            report.add("tpr_gap", result.gap_overall)
            report.add("tpr_rms", result.rms)
        elif args.metric == "biasnli":
            dists = _read_distributions_csv(path)
            result = bias_nli_scores(dists, args.tau)
            report.add("biasnli_nn", result.nn)
            report.add("biasnli_fn", result.fn)
            for tau, frac in sorted(result.thresholds.items()):
                report.add(f"biasnli_t:{tau:g}", frac)
        elif args.metric == "winobias":
            with open(path, encoding="utf-8") as fh:
                spec = json.load(fh)
            for type_name in ("type1", "type2"):
                if type_name not in spec or not {"pro", "anti"} <= set(spec[type_name]):
                    raise MalformedItemFile(f"{path}: needs {type_name}.pro and .anti")
                gap = winobias_tpr(float(spec[type_name]["pro"]),
                                   float(spec[type_name]["anti"]))
                report.add(f"winobias_tpr{type_name[-1]}", gap)


_MODEL_METRICS = ("stereoset", "crows", "seat", "probe")
_FILE_METRICS = ("tpr", "biasnli", "winobias")


def cmd_eval(args) -> int:
    report = MetricReport()
    if args.metric in _MODEL_METRICS:
        if not args.checkpoint:
            raise ConfigError(f"metric {args.metric!r} needs --checkpoint")
        if not args.items:
            raise ConfigError(f"metric {args.metric!r} needs --items")
        _eval_model_metric(args, report)
    elif args.metric in _FILE_METRICS:
        if not args.inputs:
            raise ConfigError(f"metric {args.metric!r} needs --inputs")
        _eval_file_metric(args, report)
    else:
        raise ConfigError(f"unknown metric {args.metric!r}; choose from "
                          f"{_MODEL_METRICS + _FILE_METRICS}")
    resolved = {"metric": args.metric,
                "checkpoints": list(args.checkpoint or []),
                "inputs": list(args.inputs or []),
                "items": args.items,
                "repr": args.repr,
                "tau": list(args.tau)}
    text = report.to_json(resolved_config=resolved)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# export embeddings
# ---------------------------------------------------------------------------

def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.concepts, encoding="utf-8") as fh:
        concepts = [line.strip() for line in fh if line.strip()]
    with open(args.templates, encoding="utf-8") as fh:
        templates = [line.rstrip("\n") for line in fh if line.strip()]
    if not templates:
        raise MalformedItemFile(f"{args.templates}: empty template list")
    if not concepts:
        raise MalformedItemFile(f"{args.concepts}: empty concept list")
    for t in templates:
        if "{}" not in t:
            raise MalformedItemFile(f"template {t!r} has no {{}} placeholder")
    rows = []
    for concept in concepts:
        vectors = encode_texts(model, [t.format(concept) for t in templates],
                               repr_mode=args.repr)
        rows.append([concept] + [repr(v) for v in vectors.mean(axis=0)])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="debiaskit",
                     description="Train gender-debiased toy encoders and audit them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_aug = sub.add_parser("augment", help="counterfactually augment an NLI jsonl file")
    p_aug.add_argument("input")
    p_aug.add_argument("--output", default=None)
    p_aug.add_argument("--lexicon", default=None)
    p_aug.add_argument("--label-filter", default="entailment", dest="label_filter",
                       help="comma-separated labels to keep; empty keeps all")
    p_aug.add_argument("--gender-filter", action="store_true", dest="gender_filter")
    p_aug.set_defaults(func=cmd_augment, error_code=EXIT_DATA)

    p_train = sub.add_parser("train", help="run training for each configured seed")
    p_train.add_argument("--config", default=None, help="JSON run-config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config key (repeatable; flags win)")
    p_train.add_argument("--seeds", default=None, help="comma-separated seed sweep")
    p_train.add_argument("--ablate", action="append",
                         help="drop a component: no-mlm, no-cl, or no-al")
    p_train.set_defaults(func=cmd_train, error_code=EXIT_DATA)

    p_eval = sub.add_parser("eval", help="compute a metric report")
    p_eval.add_argument("--metric", required=True)
    p_eval.add_argument("--checkpoint", nargs="*", default=[])
    p_eval.add_argument("--items", default=None, help="item file for model metrics")
    p_eval.add_argument("--inputs", nargs="*", default=[],
                        help="prediction files for file-based metrics (one per seed)")
    p_eval.add_argument("--tau", nargs="*", type=float, default=[0.5, 0.7])
    p_eval.add_argument("--repr", choices=("pooled", "cls"), default="pooled")
    p_eval.add_argument("--probe-steps", type=int, default=300, dest="probe_steps")
    p_eval.add_argument("--probe-lr", type=float, default=1.0, dest="probe_lr")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval, error_code=EXIT_EVAL)

    p_exp = sub.add_parser("export-embeddings",
                           help="write averaged concept embeddings to CSV")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--concepts", required=True, help="one concept per line")
    p_exp.add_argument("--templates", required=True,
                       help="one template per line, each containing {}")
    p_exp.add_argument("--repr", choices=("pooled", "cls"), default="pooled")
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export, error_code=EXIT_EVAL)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _EVAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except DebiasKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return args.error_code
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return args.error_code


if __name__ == "__main__":
    sys.exit(main())
