"""
Command-line entry point: `finematch <command> [flags]`.

Every command accepts `--config FILE` (flat key=value, keys are `RunConfig`
field names), `--set KEY=VALUE` overrides, and `--seed`. Reports go to
standard output, logs to standard error. Exit status is 0 on success, 1 for
invalid input or configuration, and 2 for numerical failures.
"""

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import structlog
from structlog.typing import FilteringBoundLogger

from finematch.config.settings import RunConfig, load_config
from finematch.core.autodiff import NonFiniteError
from finematch.core.components import DetectionBox, relation_candidates
from finematch.core.models import Checkpoint, InferenceWeights
from finematch.service.gradcheck import pipeline_grad_check
from finematch.service.inference import (
    DEFAULT_KS,
    dump_similarity,
    eval_binary,
    eval_dataset,
    score_pair,
    sweep,
)
from finematch.service.synth import (
    DEFAULT_GLOBAL_OFFSET,
    synth_binary_triples,
    synth_pairs,
)
from finematch.service.training import TrainingError, train
from finematch.storage.checkpoint import read_checkpoint
from finematch.storage.records import (
    read_record,
    read_records,
    read_triples,
    write_binary,
    write_records,
)
from finematch.storage.tables import (
    SWEEP_COLUMNS,
    format_float,
    format_report,
    write_matrix,
    write_report,
    write_rows,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2

BINARY_DIRNAME = "binary"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _numbers(kind: type):
    def parse(text: str) -> list:
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}")

    return parse


def _assignments(values: Sequence[str] | None) -> dict[str, str]:
    result = {}

    for value in values or []:
        key, separator, content = value.partition("=")
        if not separator or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {value!r}")
        result[key.strip()] = content.strip()

    return result


def _config(args: argparse.Namespace, **named: Any) -> RunConfig:
    overrides = {**_assignments(args.set), **named, "seed": args.seed}
    return load_config(args.config, overrides)


def _weights(args: argparse.Namespace, checkpoint: Checkpoint) -> InferenceWeights:
    """
    Inference weights: the checkpoint's, then the config file, then flags.
    """
    overrides = {
        **_assignments(args.set),
        "alpha1": args.alpha1,
        "alpha2": args.alpha2,
        "beta1": args.beta1,
    }
    config = load_config(
        args.config, overrides, base=checkpoint.config.model_dump(mode="json")
    )
    return InferenceWeights.from_config(config)


def synth_data(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    config = _config(
        args, dim=args.dim, n_entities=args.entities, m_relations=args.relations
    )

    if config.dim is None:
        raise UsageError("synth-data needs --dim (or dim in the config file)")

    shape = dict(
        dim=config.dim,
        n_entities=config.n_entities,
        m_relations=config.m_relations,
        noise_sigma=args.noise,
        seed=config.seed,
        global_noise_sigma=args.global_noise,
        global_offset=args.global_offset,
    )

    dataset = synth_pairs(args.pairs, log=log, **shape)
    write_records(dataset, args.output)

    if args.triples:
        items = synth_binary_triples(args.triples, **shape)
        write_binary(
            items,
            args.output / BINARY_DIRNAME,
            dim=config.dim,
            n_entities=config.n_entities,
            m_relations=config.m_relations,
        )

    log.bind(output=str(args.output), pairs=args.pairs, triples=args.triples).info(
        "synth.written"
    )
    print(f"wrote {args.pairs} pairs to {args.output}")

    return EXIT_OK


def train_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    config = _config(
        args,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr0=args.lr0,
        temperature=args.temperature,
        clip_grad_norm=args.clip_grad_norm,
    )
    dataset = read_records(args.data, log=log)
    validation = read_records(args.validation, log=log) if args.validation else None

    checkpoint = train(
        dataset, config, log, output_dir=args.output, validation=validation
    )

    print(f"epoch {checkpoint.epoch} loss {format_float(checkpoint.loss)}")

    return EXIT_OK


def eval_retrieval_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    weights = _weights(args, checkpoint)
    dataset = read_records(args.data, log=log)

    report = eval_dataset(dataset, checkpoint, weights, ks=args.ks, log=log)
    print(format_report(report))

    if args.csv is not None:
        write_report(report, args.csv)

    return EXIT_OK


def eval_binary_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    weights = _weights(args, checkpoint)
    items = read_triples(args.data)

    accuracy = eval_binary(items, checkpoint, weights, log=log)
    print(f"accuracy {format_float(accuracy)} ({len(items)} items)")

    return EXIT_OK


def score_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    weights = _weights(args, checkpoint)

    scored = score_pair(
        read_record(args.data, args.image_id, "image"),
        read_record(args.data, args.text_id, "text"),
        checkpoint,
        weights,
    )
    print(scored.model_dump_json())

    return EXIT_OK


def dump_similarity_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    checkpoint = read_checkpoint(args.checkpoint)

    matrix = dump_similarity(
        read_record(args.data, args.image_id, "image"),
        read_record(args.data, args.text_id, "text"),
        checkpoint,
        channel=args.channel,
    )

    if args.output is not None:
        write_matrix(matrix, args.output)
    else:
        for row in matrix:
            print(",".join(format_float(float(v)) for v in row))

    return EXIT_OK


def relation_candidates_command(
    args: argparse.Namespace, log: FilteringBoundLogger
) -> int:
    with open(args.boxes, encoding="utf-8") as handle:
        boxes = [DetectionBox(**box) for box in json.load(handle)]

    for candidate in relation_candidates(boxes, args.m):
        print(candidate.model_dump_json())

    return EXIT_OK


def grad_check_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    config = _config(args)

    result = pipeline_grad_check(
        dim=args.dim,
        batch=args.batch,
        seed=config.seed,
        n_entities=args.entities,
        m_relations=args.relations,
        heads=args.heads,
        entries=args.entries,
        config=config,
        log=log,
    )

    print(f"max_rel_err {result.max_rel_err:.3e}")

    return EXIT_OK if result.passed else EXIT_NUMERIC


def sweep_command(args: argparse.Namespace, log: FilteringBoundLogger) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    dataset = read_records(args.data, log=log)
    images, owner = dataset.unique_images()

    rows = sweep(
        images,
        dataset.texts,
        checkpoint,
        args.alpha1,
        args.alpha2,
        args.beta1,
        ground_truth=owner,
        log=log,
    )

    if args.output is not None:
        write_rows(args.output, SWEEP_COLUMNS, rows)
    else:
        print(",".join(SWEEP_COLUMNS))
        for row in rows:
            print(",".join(format_float(float(v)) for v in row))

    return EXIT_OK


def _add_weight_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha1", type=float, default=None)
    parser.add_argument("--alpha2", type=float, default=None)
    parser.add_argument("--beta1", type=float, default=None)


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key=value file")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override one configuration field (repeatable)",
    )
    common.add_argument("--seed", type=int, default=None)

    parser = Parser(prog="finematch", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--quiet", action="store_true", help="Only log warnings")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("synth-data", parents=[common])
    command.add_argument("--pairs", type=int, required=True)
    command.add_argument("--dim", type=int, default=None)
    command.add_argument("--entities", type=int, default=None)
    command.add_argument("--relations", type=int, default=None)
    command.add_argument("--noise", type=float, default=0.1)
    command.add_argument("--global-noise", type=float, default=0.0)
    command.add_argument("--global-offset", type=float, default=DEFAULT_GLOBAL_OFFSET)
    command.add_argument("--triples", type=int, default=0)
    command.add_argument("-o", "--output", type=Path, required=True)
    command.set_defaults(handler=synth_data)

    command = commands.add_parser("train", parents=[common])
    command.add_argument("--data", type=Path, required=True)
    command.add_argument("--validation", type=Path, default=None)
    command.add_argument("-o", "--output", type=Path, required=True)
    command.add_argument("--epochs", type=int, default=None)
    command.add_argument("--batch-size", type=int, default=None)
    command.add_argument("--lr0", type=float, default=None)
    command.add_argument("--temperature", type=float, default=None)
    command.add_argument("--clip-grad-norm", type=float, default=None)
    command.set_defaults(handler=train_command)

    command = commands.add_parser("eval-retrieval", parents=[common])
    command.add_argument("--checkpoint", type=Path, required=True)
    command.add_argument("--data", type=Path, required=True)
    command.add_argument("--ks", type=_numbers(int), default=list(DEFAULT_KS))
    command.add_argument("--csv", type=Path, default=None)
    _add_weight_flags(command)
    command.set_defaults(handler=eval_retrieval_command)

    command = commands.add_parser("eval-binary", parents=[common])
    command.add_argument("--checkpoint", type=Path, required=True)
    command.add_argument("--data", type=Path, required=True)
    _add_weight_flags(command)
    command.set_defaults(handler=eval_binary_command)

    command = commands.add_parser("score", parents=[common])
    command.add_argument("--checkpoint", type=Path, required=True)
    command.add_argument("--data", type=Path, required=True)
    command.add_argument("--image-id", required=True)
    command.add_argument("--text-id", required=True)
    _add_weight_flags(command)
    command.set_defaults(handler=score_command)

    command = commands.add_parser("dump-similarity", parents=[common])
    command.add_argument("--checkpoint", type=Path, required=True)
    command.add_argument("--data", type=Path, required=True)
    command.add_argument("--image-id", required=True)
    command.add_argument("--text-id", required=True)
    command.add_argument("--channel", choices=("entity", "relation"), default="entity")
    command.add_argument("-o", "--output", type=Path, default=None)
    command.set_defaults(handler=dump_similarity_command)

    command = commands.add_parser("relation-candidates", parents=[common])
    command.add_argument("--boxes", type=Path, required=True, help="JSON list of boxes")
    command.add_argument("-m", type=int, default=10)
    command.set_defaults(handler=relation_candidates_command)

    command = commands.add_parser("grad-check", parents=[common])
    command.add_argument("--dim", type=int, default=16)
    command.add_argument("--batch", type=int, default=3)
    command.add_argument("--entities", type=int, default=3)
    command.add_argument("--relations", type=int, default=3)
    command.add_argument("--heads", type=int, default=2)
    command.add_argument("--entries", type=int, default=None)
    command.set_defaults(handler=grad_check_command)

    command = commands.add_parser("sweep", parents=[common])
    command.add_argument("--checkpoint", type=Path, required=True)
    command.add_argument("--data", type=Path, required=True)
    command.add_argument("--alpha1", type=_numbers(float), default=[0.0, 0.05, 0.1, 0.2])
    command.add_argument("--alpha2", type=_numbers(float), default=[0.0, 0.033, 0.1])
    command.add_argument("--beta1", type=_numbers(float), default=[0.0, 0.1, 0.33, 0.5])
    command.add_argument("-o", "--output", type=Path, default=None)
    command.set_defaults(handler=sweep_command)

    return parser


def _configure_logging(quiet: bool) -> None:
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(30 if quiet else 20),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()

    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID

    _configure_logging(args.quiet)
    log = structlog.get_logger().bind(command=args.command)

    try:
        return args.handler(args, log)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteError, TrainingError) as e:
        log.bind(error=str(e)).error("cli.numeric_failure")
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        log.bind(error=str(e), kind=type(e).__name__).error("cli.invalid_input")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
