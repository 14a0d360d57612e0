"""Command-line pipeline: gen, fixtures, encode, decode, train, predict, eval, gradcheck.

Every stage reads and writes line-delimited JSON, so stages compose via files
(``-`` means stdin/stdout). Options resolve as flags > config file > defaults.
The config file is JSON with optional ``scorer``, ``decode`` and ``synth``
sections; its path comes from ``--config`` or the MIRROR_IE_CONFIG variable.

Exit codes: 0 success, 1 usage, 2 data error, 3 budget exceeded or divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterator, Sequence

import torch

from . import __version__
from .data import (
    TaskInstance,
    dumps_instance,
    gold_to_tuples,
    instance_from_json,
    instance_to_json,
    linearize,
    read_records,
    replace_gold,
    tuples_to_gold,
)
from .decoding import DecodeConfig, decode_verbose
from .errors import BudgetExceeded, DivergenceDetected, MirrorError, ParseError, PositionOutOfRange
from .evaluation import corpus_micro_f1, tuple_label
from .graph import AdjacencyTensor, MultiSlotTuple, encode
from .scorer import BiaffineScorer, ScorerConfig, grad_check, load_checkpoint, save_checkpoint
from .synth import OverlapPolicy, SynthSpec, TaskShape, fixture_suite, generate
from .training import PredictStats, predict_tuples, train

log = logging.getLogger("mirror_ie")

CONFIG_ENV = "MIRROR_IE_CONFIG"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- io helpers


@contextlib.contextmanager
def _open_out(path: str) -> Iterator:
    if path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _read_lines(path: str) -> Iterator[tuple[int, dict]]:
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    try:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: {exc.msg}", line=lineno) from exc
    finally:
        if fh is not sys.stdin:
            fh.close()


def _read_instances(path: str) -> list[TaskInstance]:
    if path != "-":
        try:
            return list(read_records(path))
        except ParseError as exc:
            raise ParseError(f"{path}: {exc.message}", line=exc.line, field=exc.field) from exc
    out = []
    for lineno, obj in _read_lines(path):
        try:
            out.append(instance_from_json(obj))
        except ParseError as exc:
            raise ParseError(exc.message, line=lineno, field=exc.field) from exc
    return out


def _write_json(path: str, obj) -> None:
    with _open_out(path) as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sorted(tuples) -> list[MultiSlotTuple]:
    return sorted(tuples, key=lambda t: (t.chain(), t.key()))


# ---------------------------------------------------------------- config resolution


def _load_config_file(args) -> dict:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    unknown = set(obj) - {"scorer", "decode", "synth"}
    if unknown:
        raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}")
    return obj


def _resolve(cls, section: dict, args, prefix: str = ""):
    """Defaults, overlaid by the config file section, overlaid by explicit flags."""
    values = {}
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} options in config: {sorted(unknown)}")
    values.update(section)
    for name in names:
        flag = getattr(args, prefix + name, None)
        if flag is not None:
            values[name] = flag
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _log_config(args, **resolved) -> None:
    skip = {"func", "file_config"}
    flat = {k: v for k, v in vars(args).items() if k not in skip and not k.startswith(("sc_", "dc_", "sy_"))}
    for name, cfg in resolved.items():
        flat[name] = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(cfg).items()}
    log.info("resolved config: %s", json.dumps(flat, sort_keys=True, default=str))


def _add_scorer_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scorer (defaults follow the reference training setup)")
    for f in fields(ScorerConfig):
        kind = {bool: None, int: int, float: float, str: str}.get(type(f.default), str)
        dest = "sc_" + f.name
        flag = "--" + f.name.replace("_", "-")
        if kind is None:
            g.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=dest, type=kind, default=None, metavar=f.name.upper())


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoder")
    g.add_argument("--max-chain-length", dest="dc_max_chain_length", type=int, default=None)
    g.add_argument("--max-chains", dest="dc_max_chains", type=int, default=None)
    g.add_argument("--slot-arity-hint", dest="dc_slot_arity_hint", type=int, default=None)


# ---------------------------------------------------------------- subcommands


def cmd_fixtures(args) -> int:
    with _open_out(args.output) as fh:
        for inst in fixture_suite():
            fh.write(dumps_instance(inst) + "\n")
    return EXIT_OK


def cmd_gen(args) -> int:
    spec = _resolve(SynthSpec, args.file_config.get("synth", {}), args, "sy_")
    _log_config(args, synth=spec)
    with _open_out(args.output) as fh:
        for inst in generate(spec, args.n):
            fh.write(dumps_instance(inst) + "\n")
    return EXIT_OK


def cmd_encode(args) -> int:
    instances = _read_instances(args.input)
    with _open_out(args.output) as fh:
        for inst in instances:
            stream = linearize(inst, max_length=args.max_length)
            adj = encode(gold_to_tuples(inst, stream), len(stream))
            row = {
                "id": inst.id,
                "length": len(stream),
                "anchors": list(stream.label_anchor_positions),
                "edges": adj.to_sparse(),
                "instance": instance_to_json(inst),
            }
            fh.write(json.dumps(row, separators=(",", ":"), ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _resolve(DecodeConfig, args.file_config.get("decode", {}), args, "dc_")
    _log_config(args, decode=cfg)
    totals: dict[str, int] = {}
    per_instance = []
    with _open_out(args.output) as fh:
        for lineno, row in _read_lines(args.input):
            try:
                inst = instance_from_json(row["instance"])
                adj = AdjacencyTensor.from_sparse(int(row["length"]), row["edges"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{args.input}: malformed tensor record ({exc})", line=lineno) from exc
            except ParseError as exc:
                raise ParseError(exc.message, line=lineno, field=exc.field) from exc
            stream = linearize(inst, max_length=max(args.max_length, adj.length))
            if len(stream) != adj.length:
                raise ParseError(f"tensor length {adj.length} != stream length {len(stream)}", line=lineno)
            result = decode_verbose(adj, cfg, row.get("anchors", stream.label_anchor_positions))
            gold = tuples_to_gold(_sorted(result.tuples), stream)
            fh.write(dumps_instance(replace_gold(inst, gold)) + "\n")
            diag = result.diagnostics()
            per_instance.append({"id": inst.id, **diag})
            for k, v in diag.items():
                totals[k] = totals.get(k, 0) + v
    sidecar = args.diagnostics or (None if args.output == "-" else args.output + ".diagnostics.json")
    if sidecar:
        _write_json(sidecar, {"totals": totals, "instances": per_instance})
    log.info("decode totals: %s", json.dumps(totals, sort_keys=True))
    return EXIT_OK


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def cmd_train(args) -> int:
    cfg = _resolve(ScorerConfig, args.file_config.get("scorer", {}), args, "sc_")
    dcfg = _resolve(DecodeConfig, args.file_config.get("decode", {}), args, "dc_")
    _log_config(args, scorer=cfg, decode=dcfg)
    _seed_everything(cfg.seed)
    train_set = _read_instances(args.train)
    dev_set = _read_instances(args.dev) if args.dev else []
    result = train(train_set, cfg, dev_set, dcfg)
    report = result.report.to_dict()
    for row in report["epochs"]:
        log.info("epoch %d wall %.1fs", row["epoch"], row.pop("wall_time"))
    save_checkpoint(args.output, result.model, result.vocab, {"report": report})
    report_path = args.report or args.output + ".report.json"
    _write_json(report_path, report)
    log.info("best dev F1 %s at epoch %s", report["best_dev_f1"], report["best_epoch"])
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dcfg = _resolve(DecodeConfig, args.file_config.get("decode", {}), args, "dc_")
    _log_config(args, scorer=ck.config, decode=dcfg)
    stats = PredictStats()
    dropped = 0
    with _open_out(args.output) as fh:
        for inst in _read_instances(args.input):
            stream = linearize(inst, max_length=ck.config.max_length)
            gold = []
            for t in _sorted(predict_tuples(ck.model, ck.vocab, stream, dcfg, stats)):
                try:
                    gold += tuples_to_gold([t], stream)
                except PositionOutOfRange:
                    dropped += 1  # a span reaching outside the text block
            fh.write(dumps_instance(replace_gold(inst, gold)) + "\n")
    log.info(
        "predict: %d over budget, %d malformed chains, %d tuples outside the text",
        stats.budget_exceeded,
        stats.malformed,
        dropped,
    )
    return EXIT_OK


def _table(rows: Sequence[tuple]) -> str:
    header = ("label", "precision", "recall", "f1")
    body = [header] + [(name, f"{p * 100:.2f}", f"{r * 100:.2f}", f"{f * 100:.2f}") for name, p, r, f in rows]
    widths = [max(len(row[i]) for row in body) for i in range(4)]
    lines = [
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
        for row in body
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    gold_insts = _read_instances(args.gold)
    pred_insts = {inst.id: inst for inst in _read_instances(args.pred)}
    gold_docs, pred_docs, names = {}, {}, {}
    for inst in gold_insts:
        stream = linearize(inst, max_length=args.max_length)
        names[inst.id] = {p: lab.text for p, lab in zip(stream.label_anchor_positions, inst.labels)}
        gold_docs[inst.id] = gold_to_tuples(inst, stream)
        pred = pred_insts.get(inst.id)
        pred_docs[inst.id] = gold_to_tuples(pred, stream) if pred is not None else []
    missing = sorted(set(pred_insts) - set(gold_docs))
    if missing:
        log.warning("%d predicted ids have no gold record, e.g. %s", len(missing), missing[0])
    report = corpus_micro_f1(pred_docs, gold_docs, label_of=lambda doc, t: tuple_label(t, names[doc]))
    rows = [(k, *v) for k, v in sorted(report.per_label.items())]
    rows.append(("ALL (micro)", report.precision, report.recall, report.f1))
    sys.stdout.write(_table(rows))
    if args.output:
        _write_json(args.output, {"documents": len(gold_docs), **report.to_dict()})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = ScorerConfig(d_h=args.d_h, d_b=args.d_b, dropout=0.0)
    worst_all = 0.0
    rows = []
    for seed in range(args.seeds):
        torch.manual_seed(seed)
        model = BiaffineScorer(args.vocab_size, cfg)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)
        ids = torch.randint(1, args.vocab_size, (2, args.length), generator=g)
        gold = torch.rand(2, 3, args.length, args.length, generator=g) < 0.15
        err = grad_check(model, ids, ids != 0, gold)
        rows.append({"seed": seed, "max_relative_error": err})
        worst_all = max(worst_all, err)
        sys.stdout.write(f"seed {seed}: max relative error {err:.3e}\n")
    passed = worst_all < args.tolerance
    sys.stdout.write(f"{'PASS' if passed else 'FAIL'} worst {worst_all:.3e} (tolerance {args.tolerance:g})\n")
    if args.output:
        _write_json(args.output, {"points": rows, "worst": worst_all, "passed": passed})
    return EXIT_OK if passed else EXIT_DATA


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mirror-ie", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("fixtures", help="write the hand-built fixture records")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_fixtures)

    s = sub.add_parser("gen", help="generate synthetic records")
    s.add_argument("-n", type=int, default=100, help="number of instances")
    s.add_argument("-o", "--output", default="-")
    s.add_argument("--seed", dest="sy_seed", type=int)
    s.add_argument("--shape", dest="sy_task_shape", choices=[t.value for t in TaskShape])
    s.add_argument("--policy", dest="sy_overlap_policy", choices=[o.value for o in OverlapPolicy])
    s.add_argument("--vocab-size", dest="sy_vocab_size", type=int)
    s.add_argument("--text-length", dest="sy_text_length", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--labels", dest="sy_labels_per_instance", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--tuples", dest="sy_tuples_per_instance", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--arity", dest="sy_arity", type=int)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("encode", help="records -> gold adjacency tensors")
    s.add_argument("-i", "--input", default="-")
    s.add_argument("-o", "--output", default="-")
    s.add_argument("--max-length", type=int, default=512)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="adjacency tensors -> records with decoded tuples")
    s.add_argument("-i", "--input", default="-")
    s.add_argument("-o", "--output", default="-")
    s.add_argument("--diagnostics", help="diagnostics sidecar (default: OUTPUT.diagnostics.json)")
    s.add_argument("--max-length", type=int, default=512)
    _add_decode_flags(s)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("train", help="train the scorer; writes a checkpoint and a report")
    s.add_argument("--train", required=True, help="training records")
    s.add_argument("--dev", help="dev records for early stopping")
    s.add_argument("-o", "--output", required=True, help="checkpoint path (.npz)")
    s.add_argument("--report", help="report path (default: OUTPUT.report.json)")
    _add_scorer_flags(s)
    _add_decode_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="records -> records with predicted tuples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-i", "--input", default="-")
    s.add_argument("-o", "--output", default="-")
    _add_decode_flags(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score predicted records against gold records")
    s.add_argument("--gold", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("-o", "--output", help="machine-readable report (JSON)")
    s.add_argument("--max-length", type=int, default=512)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the scorer gradients")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--d-h", type=int, default=16)
    s.add_argument("--d-b", type=int, default=8)
    s.add_argument("--vocab-size", type=int, default=20)
    s.add_argument("--length", type=int, default=6)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _configure_logging(args) -> None:
    level = logging.WARNING if args.quiet else logging.INFO if args.verbose < 1 else logging.DEBUG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("mirror_ie")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args)
    try:
        args.file_config = _load_config_file(args)
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (BudgetExceeded, DivergenceDetected) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_BUDGET
    except MirrorError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s: %s", exc.filename or "", exc.strerror or exc)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
