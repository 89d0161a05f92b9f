"""Command-line interface: train, generate, eval and ablate.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines (``#``
starts a comment); flags given on the command line override file values,
and ``HSCJN_SEED`` in the environment overrides the seed from the file.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from .corpus import (
    EOU,
    MODES,
    EmptyCorpusError,
    Vocabulary,
    build_vocabulary,
    encode_example,
    filter_dialogues,
    make_examples,
    parse_corpus,
    read_lines,
    write_lines,
)
from .decode import generate
from .metrics import eval_report, write_frequency_table
from .train import CheckpointError, NonFiniteLossError, TrainConfig, evaluate_split, fit, load_checkpoint, new_state

logger = logging.getLogger("hscjn")

ABLATION_RUNS = (
    ("HSCJN", dict()),
    ("HSCJN(w/o ME)", dict(wo_me=True)),
    ("HSCJN(w/o PN)", dict(wo_pn=True)),
    ("HRED", dict(wo_me=True, wo_pn=True)),
)

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")


# ---------------------------------------------------------------------------
# parser


def _add_train_options(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("training")
    g.add_argument("--alpha", type=float, default=S, help="weight of the word-set prediction loss (default 1.0)")
    g.add_argument("--beta", type=float, default=S, help="weight of the entropy regulariser (default 0.13)")
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=S, help="Adam step size")
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--dropout", type=float, default=S, help="drop probability (0.75 = literal high-dropout reading)")
    g.add_argument("--epochs", type=int, default=S)
    g.add_argument("--patience", type=int, default=S, help="early-stopping patience, 0 disables")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--vocab-cap", type=int, default=S)
    g.add_argument("--max-dialogue-tokens", type=int, default=S)
    g.add_argument("--mode", choices=MODES, default=S)
    g.add_argument("--wo-me", action="store_true", default=S, help="drop the entropy regulariser (beta = 0)")
    g.add_argument("--wo-pn", action="store_true", default=S, help="drop the prediction head loss (alpha = 0)")
    g.add_argument("--paper-scale", action="store_true", default=S, help="300/500/1000/500 dimensions")
    g.add_argument("--wp-negatives", action="store_true", default=S, help="also penalise words outside the set")
    g.add_argument("--clip-norm", type=float, default=S)
    g.add_argument("--init-std", type=float, default=S)
    g.add_argument("--no-shuffle", dest="shuffle", action="store_false", default=S)
    g.add_argument("--embed-dim", type=int, default=S)
    g.add_argument("--word-enc-dim", type=int, default=S)
    g.add_argument("--utt-enc-dim", type=int, default=S)
    g.add_argument("--dec-dim", type=int, default=S)
    g.add_argument("--head-hidden-dim", type=int, default=S)
    g.add_argument("--attention", choices=("additive", "scalar_wc"), default=S)
    g.add_argument("--bidirectional", action="store_true", default=S)


def _add_decode_options(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("decoding")
    g.add_argument("--beam-width", type=int, default=S)
    g.add_argument("--max-len", type=int, default=S)
    g.add_argument("--length-norm", action="store_true", default=S, help="rank hypotheses by mean log-prob")


def build_parser() -> CliParser:
    S = argparse.SUPPRESS
    parser = CliParser(prog="hscjn", description="HRED + word-set prediction dialogue model")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config")
    p.add_argument("--train", dest="train_path", default=S, help="training corpus (__eou__-separated lines)")
    p.add_argument("--valid", dest="valid_path", default=S, help="validation corpus for early stopping")
    p.add_argument("--out", dest="out_dir", default=S, help="output directory (default: run)")
    p.add_argument("--resume", default=S, help="continue from this checkpoint")
    _add_train_options(p)
    _add_decode_options(p)

    p = sub.add_parser("generate", help="decode responses for context lines")
    p.add_argument("--config")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--input", dest="input_path", default=S, help="one context per line, turns split by __eou__")
    p.add_argument("--output", dest="output_path", default=S)
    p.add_argument("--turns", type=int, default=S, help="turns to generate (default: 2 in two_turn_target mode)")
    _add_decode_options(p)

    p = sub.add_parser("eval", help="score responses, or decode a test corpus and score it")
    p.add_argument("--config")
    p.add_argument("--responses", default=S)
    p.add_argument("--references", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--test", dest="test_path", default=S)
    p.add_argument("--report", default=S, help="write the report JSON here")
    p.add_argument("--responses-out", default=S, help="where decoded responses go (with --checkpoint)")
    p.add_argument("--freq-table", default=S, help="write the top-word frequency table here")
    p.add_argument("--top-k", type=int, default=S)
    p.add_argument("--sentence-bleu", action="store_true", default=S)
    p.add_argument("--label", default=S)
    _add_decode_options(p)

    p = sub.add_parser("ablate", help="train and evaluate the four ablation variants")
    p.add_argument("--config")
    p.add_argument("--train", dest="train_path", default=S)
    p.add_argument("--valid", dest="valid_path", default=S)
    p.add_argument("--test", dest="test_path", default=S, help="evaluation corpus (default: validation corpus)")
    p.add_argument("--out", dest="out_dir", default=S)
    p.add_argument("--sentence-bleu", action="store_true", default=S)
    _add_train_options(p)
    _add_decode_options(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        word = raw.strip().lower()
        if word in TRUE_WORDS:
            val = True
        elif word in FALSE_WORDS:
            val = False
        else:
            raise UsageError(f"expected a boolean for {action.dest}, got {raw!r}")
        return val
    val = action.type(raw) if action.type else raw
    if action.choices is not None and val not in action.choices:
        raise UsageError(f"{action.dest} must be one of {sorted(action.choices)}, got {raw!r}")
    return val


def read_config(path: str | os.PathLike, sub: argparse.ArgumentParser) -> dict:
    """Parse ``key=value`` lines into typed option values for ``sub``."""
    by_dest = {a.dest: a for a in sub._actions if a.option_strings}
    for a in sub._actions:
        for opt in a.option_strings:
            by_dest.setdefault(opt.lstrip("-").replace("-", "_"), a)
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key in ("shuffle", "no_shuffle"):
                on = _convert(by_dest["shuffle"], value)
                out["shuffle"] = on if key == "shuffle" else not on
                continue
            action = by_dest.get(key)
            if action is None or action.dest in ("help", "config"):
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[action.dest] = _convert(action, value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve_options(parser: argparse.ArgumentParser, argv: Sequence[str]) -> dict:
    """Defaults < config file < HSCJN_SEED < explicit flags."""
    ns = parser.parse_args(argv)
    opts = {}
    if getattr(ns, "config", None):
        opts.update(read_config(ns.config, _subparser(parser, ns.command)))
    env_seed = os.environ.get("HSCJN_SEED")
    if env_seed:
        try:
            opts["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"HSCJN_SEED must be an integer, got {env_seed!r}") from None
    opts.update({k: v for k, v in vars(ns).items() if k != "config"})
    return opts


def train_config(opts: dict, base: TrainConfig | None = None) -> TrainConfig:
    d = base.to_dict() if base is not None else {}
    names = {f.name for f in fields(TrainConfig)}
    d.update({k: v for k, v in opts.items() if k in names})
    return TrainConfig.from_dict(d)


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_path", "").replace("_", "-") for k in missing))


# ---------------------------------------------------------------------------
# data


def load_examples(path, cfg: TrainConfig, vocab: Vocabulary | None = None):
    """Parse, length-filter, build vocabulary if needed, and encode examples."""
    ds, dropped = parse_corpus(path)
    ds, removed = filter_dialogues(ds, cfg.max_dialogue_tokens)
    if not ds:
        raise EmptyCorpusError(f"{path}: no dialogues left after filtering")
    if vocab is None:
        vocab = build_vocabulary(ds, cfg.vocab_cap)
    exs = [encode_example(e, vocab) for e in make_examples(ds, cfg.mode)]
    logger.info("%s: %d dialogues (%d malformed, %d too long), %d examples", path, len(ds), dropped, removed, len(exs))
    return exs, vocab


# ---------------------------------------------------------------------------
# commands


def cmd_train(opts: dict) -> int:
    _require(opts, "train_path")
    out = Path(opts.get("out_dir", "run"))
    out.mkdir(parents=True, exist_ok=True)
    if opts.get("resume"):
        state = load_checkpoint(opts["resume"])
        # only the epoch budget may change on resume
        if "epochs" in opts:
            state.config.epochs = int(opts["epochs"])
        cfg, vocab = state.config, state.vocab
        train_ex, _ = load_examples(opts["train_path"], cfg, vocab)
    else:
        cfg = train_config(opts)
        train_ex, vocab = load_examples(opts["train_path"], cfg)
        state = new_state(cfg, vocab)
    valid_ex = load_examples(opts["valid_path"], cfg, vocab)[0] if opts.get("valid_path") else None
    vocab.dump(out / "vocab.tsv")
    with open(out / "train_log.jsonl", "a", encoding="utf-8") as log_fh:
        fit(state, train_ex, valid_ex, log_fh=log_fh, checkpoint_path=out / "model.ckpt")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "steps": state.step, "epochs": state.epoch}))
    return 0


def _decode_settings(opts: dict, cfg: TrainConfig) -> tuple[int, int, bool]:
    return (
        int(opts.get("beam_width", cfg.beam_width)),
        int(opts.get("max_len", cfg.max_len)),
        bool(opts.get("length_norm", cfg.length_norm)),
    )


def cmd_generate(opts: dict) -> int:
    _require(opts, "checkpoint", "input_path", "output_path")
    state = load_checkpoint(opts["checkpoint"])
    cfg, vocab = state.config, state.vocab
    width, max_len, norm = _decode_settings(opts, cfg)
    if width < 1 or max_len < 1:
        raise UsageError("--beam-width and --max-len must be >= 1")
    n_turns = int(opts.get("turns", 2 if cfg.mode == "two_turn_target" else 1))
    outputs = []
    for context in read_lines(opts["input_path"]):
        ctx = [vocab.encode(u) or [EOU] for u in context]
        turns = generate(state.model, ctx, n_turns, width, max_len, norm)
        outputs.append([vocab.decode(t) for t in turns])
    write_lines(opts["output_path"], outputs)
    return 0


def cmd_eval(opts: dict) -> int:
    top_k = int(opts.get("top_k", 10))
    sentence = bool(opts.get("sentence_bleu", False))
    label = opts.get("label", "")
    if opts.get("checkpoint"):
        _require(opts, "test_path")
        state = load_checkpoint(opts["checkpoint"])
        width, max_len, norm = _decode_settings(opts, state.config)
        exs, _ = load_examples(opts["test_path"], state.config, state.vocab)
        report, _ = evaluate_split(
            state.model, exs, state.vocab, width, max_len, norm, sentence, label, opts.get("responses_out")
        )
    else:
        _require(opts, "responses", "references")
        report = eval_report(opts["responses"], opts["references"], top_k, sentence, label)
    if opts.get("report"):
        Path(opts["report"]).write_text(report.to_json() + "\n", encoding="utf-8")
    if opts.get("freq_table"):
        write_frequency_table(opts["freq_table"], report.top_words)
    print(report.summary_row())
    print(report.to_json())
    return 0


def cmd_ablate(opts: dict) -> int:
    _require(opts, "train_path")
    out = Path(opts.get("out_dir", "ablation"))
    out.mkdir(parents=True, exist_ok=True)
    base = train_config({k: v for k, v in opts.items() if k not in ("wo_me", "wo_pn")})
    train_ex, vocab = load_examples(opts["train_path"], base)
    valid_ex = load_examples(opts["valid_path"], base, vocab)[0] if opts.get("valid_path") else None
    test_path = opts.get("test_path") or opts.get("valid_path")
    test_ex = load_examples(test_path, base, vocab)[0] if test_path else train_ex
    width, max_len, norm = _decode_settings(opts, base)
    reports = []
    for label, flags in ABLATION_RUNS:
        cfg = train_config(flags, base)
        run_dir = out / _slug(label)
        run_dir.mkdir(exist_ok=True)
        state = new_state(cfg, vocab)
        with open(run_dir / "train_log.jsonl", "w", encoding="utf-8") as log_fh:
            fit(state, train_ex, valid_ex, log_fh=log_fh, checkpoint_path=run_dir / "model.ckpt")
        report, _ = evaluate_split(
            state.model,
            test_ex,
            vocab,
            width,
            max_len,
            norm,
            bool(opts.get("sentence_bleu", False)),
            label,
            run_dir / "responses.txt",
        )
        (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        reports.append(report)
        print(report.summary_row(), flush=True)
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
    return 0


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "eval": cmd_eval, "ablate": cmd_ablate}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        opts = resolve_options(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as err:
        print(f"hscjn: error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"hscjn: error: cannot read config: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[opts["command"]](opts)
    except UsageError as err:
        print(f"hscjn: error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, CheckpointError, EmptyCorpusError, NonFiniteLossError) as err:
        print(f"hscjn: error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
