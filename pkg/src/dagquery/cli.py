"""Command-line front end: generate, train, eval, analyze.

Every subcommand takes the same layered configuration (defaults, then a
``key=value`` config file, then ``DAGQUERY_*`` environment variables, then
flags) and echoes the resolved config into its output directory.  Exit
codes: 0 success, 1 user error (bad flags, missing files, malformed
inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

from dagquery import checkpoint as ckpt
from dagquery import gqe as gqe_mod
from dagquery import transformer as tf
from dagquery.config import (
    ENV_PREFIX,
    RunConfig,
    config_hash,
    env_overrides,
    read_config_file,
    resolve_config,
    write_resolved_config,
)
from dagquery.datagen import generate_dataset, load_dataset
from dagquery.evaluation import (
    attention_nonrelative_fraction,
    evaluate_split,
    make_encoder_scorer,
    make_gqe_scorer,
    make_oracle_scorer,
    run_ablation,
    write_report,
)
from dagquery.kg import TripleFileError


class UserError(Exception):
    """A problem the user can fix: bad paths, bad flags, bad data."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are user errors: exit 1, not 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


_EPILOG = (
    "Configuration precedence: defaults < --config file < environment < flags.\n"
    f"Environment overrides use the {ENV_PREFIX} prefix, e.g. {ENV_PREFIX}EPOCHS=10."
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    for field in dataclasses.fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        if isinstance(field.default, bool):
            parser.add_argument(
                flag, dest=field.name, action="store_true", default=argparse.SUPPRESS,
                help=f"enable {field.name} (default {field.default})",
            )
        else:
            kind = type(field.default)
            extra = {}
            if field.name == "model":
                extra["choices"] = ("biqe", "gqe-mp")
            if field.name == "eval_split":
                extra["choices"] = ("train", "dev", "test")
            parser.add_argument(
                flag, dest=field.name, type=kind, default=argparse.SUPPRESS,
                metavar=field.name.upper(), help=f"default {field.default!r}", **extra,
            )


def build_parser() -> _Parser:
    parser = _Parser(
        prog="dagquery",
        description="Answer conjunctive queries over incomplete knowledge graphs.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, doc in (
        ("generate", "build a dataset directory from a triples file"),
        ("train", "train a model on a generated dataset"),
        ("eval", "rank held-out queries with filtered metrics"),
        ("analyze", "attention statistics and the restricted-attention comparison"),
    ):
        child = sub.add_parser(
            name, help=doc, epilog=_EPILOG,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_config_flags(child)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    flag_values = {
        k: v for k, v in vars(args).items() if k not in ("command", "config")
    }
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        file_values = read_config_file(path)
    try:
        return resolve_config(file_values, env_overrides(), flag_values)
    except (ValueError, TypeError) as exc:
        raise UserError(str(exc)) from exc


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(config, name):
            raise UserError(f"--{name.replace('_', '-')} is required for this command")


def _load_bundle(config: RunConfig):
    path = Path(config.data)
    if not path.is_dir():
        raise UserError(f"dataset directory not found: {path}")
    return load_dataset(path)


def cmd_generate(config: RunConfig) -> int:
    _require(config, "data", "out")
    triples = Path(config.data)
    if not triples.is_file():
        raise UserError(f"triples file not found: {triples}")
    manifest = generate_dataset(
        triples,
        config.out,
        seed=config.seed,
        path_limit=config.path_limit,
        max_branches=config.max_branches,
        min_branch_depth=config.min_branch_depth,
        min_depth=config.min_depth,
        max_depth=config.max_depth,
        fractions=(config.split_train, config.split_dev, config.split_test),
    )
    write_resolved_config(config, config.out)
    for split, counts in manifest["counts"].items():
        print(
            f"{split}: {counts['triples']} triples, {counts['paths']} paths, "
            f"{counts['dags']} dag queries"
        )
    print(f"dataset hash {manifest['dataset_hash'][:16]} -> {config.out}")
    return 0


def _pairs(examples):
    return [ex.pair for ex in examples]


def cmd_train(config: RunConfig) -> int:
    _require(config, "data", "out")
    bundle = _load_bundle(config)
    write_resolved_config(config, config.out)
    train_examples = _pairs(bundle.split_examples("train"))
    dev_examples = _pairs(bundle.split_examples("dev"))
    if not train_examples:
        raise UserError("train split is empty")
    if config.model == "biqe":
        model_config = tf.ModelConfig(
            vocab_size=bundle.vocab.size,
            num_entities=bundle.vocab.num_entities,
            num_layers=config.layers,
            num_heads=config.heads,
            hidden=config.hidden,
            ffn_hidden=config.ffn_hidden,
            max_positions=config.max_len,
            dropout=config.dropout,
            dtype=config.dtype,
            init_seed=config.seed,
        )
        params = tf.init_params(model_config)
        result = tf.train(
            params,
            train_examples,
            bundle.vocab,
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            seed=config.seed,
            max_len=config.max_len,
            dev_examples=dev_examples or None,
            out_dir=config.out,
        )
    else:
        gqe_config = gqe_mod.GqeConfig(
            num_entities=bundle.vocab.num_entities,
            num_relations=bundle.vocab.num_relations,
            dim=config.hidden,
            dtype=config.dtype,
            init_seed=config.seed,
        )
        params = gqe_mod.init_gqe(gqe_config)
        result = gqe_mod.train_gqe(
            params,
            train_examples,
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            seed=config.seed,
            dev_examples=dev_examples or None,
            out_dir=config.out,
        )
    print(
        f"trained {config.model} for {result.epochs_run} epochs; "
        f"final train loss {result.final_train_loss:.4f}"
    )
    print(f"checkpoint -> {Path(config.out) / 'checkpoint.bin'}")
    return 0


def _checkpoint_kind(path: Path) -> str:
    meta, _ = ckpt.load_arrays(path)
    kind = meta.get("kind")
    if kind not in (tf.CHECKPOINT_KIND, gqe_mod.CHECKPOINT_KIND):
        raise UserError(f"unrecognized checkpoint kind {kind!r} in {path}")
    return kind


def _provenance(config: RunConfig, bundle, extra: dict | None = None) -> dict:
    out = {
        "config_hash": config_hash(config),
        "dataset_hash": bundle.manifest["dataset_hash"],
        "seed": config.seed,
        "split": config.eval_split,
    }
    if extra:
        out.update(extra)
    return out


def cmd_eval(config: RunConfig) -> int:
    _require(config, "data", "out")
    bundle = _load_bundle(config)
    write_resolved_config(config, config.out)
    split = config.eval_split
    mode = "no_future" if config.ablation else "bidirectional"

    if config.oracle:
        scorer = make_oracle_scorer(bundle.vocab.num_entities, bundle.filters)
        label = "oracle"
    else:
        _require(config, "checkpoint")
        path = Path(config.checkpoint)
        if not path.is_file():
            raise UserError(f"checkpoint not found: {path}")
        kind = _checkpoint_kind(path)
        if kind == tf.CHECKPOINT_KIND:
            params = tf.load_checkpoint(path)
            scorer = make_encoder_scorer(
                params, bundle.vocab, max_len=params.config.max_positions, mode=mode
            )
            label = f"biqe[{mode}]"
        else:
            if config.ablation:
                raise UserError(
                    "--ablation applies to the encoder; the baseline has no attention"
                )
            params = gqe_mod.load_gqe_checkpoint(path)
            scorer = make_gqe_scorer(params)
            label = "gqe-mp"

    out = Path(config.out)
    for kind_name, filename in (("dags", "report-dags.json"), ("paths", "report-paths.json")):
        examples = bundle.examples[split][kind_name]
        report = evaluate_split(
            scorer,
            examples,
            bundle.filters,
            provenance=_provenance(
                config, bundle,
                {"scorer": label, "queries": kind_name, "checkpoint": config.checkpoint or None},
            ),
        )
        write_report(out / filename, report)
        print(f"[{kind_name} | {label} | {split}]")
        print(report.to_table())
    return 0


def cmd_analyze(config: RunConfig) -> int:
    _require(config, "data", "out", "checkpoint")
    bundle = _load_bundle(config)
    path = Path(config.checkpoint)
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    if _checkpoint_kind(path) != tf.CHECKPOINT_KIND:
        raise UserError("model exposes no attention")
    params = tf.load_checkpoint(path)
    write_resolved_config(config, config.out)
    out = Path(config.out)
    split = config.eval_split

    examples = bundle.examples[split]["dags"] or bundle.examples[split]["paths"]
    stats = attention_nonrelative_fraction(
        params, examples, bundle.vocab, max_len=params.config.max_positions
    )
    with (out / "attention.json").open("w", encoding="utf-8") as fh:
        json.dump(
            {**stats.to_dict(), "provenance": _provenance(config, bundle)},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    print(f"non-relative attention fraction: {stats.fraction:.4f} "
          f"({stats.num_queries} queries)")

    paths = bundle.examples[split]["paths"]
    ablation = run_ablation(
        params, paths, bundle.filters, bundle.vocab,
        max_len=params.config.max_positions,
        provenance=_provenance(config, bundle),
    )
    with (out / "ablation.json").open("w", encoding="utf-8") as fh:
        json.dump(ablation.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(ablation.to_table())
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (1)
        return int(exc.code or 0)
    try:
        config = _resolve(args)
        return _COMMANDS[args.command](config)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, TripleFileError, ckpt.CheckpointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # genuine bugs: show the traceback, exit 2
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
