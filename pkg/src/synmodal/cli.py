"""Command-line entry point: ``synmodal <command> [options]``.

Every command writes ``run_manifest.json`` next to its outputs and removes
whatever it had written if it fails. Configuration comes from a TOML file
with ``[train]`` and ``[encoder]`` tables; command-line flags and
``--set section.field=value`` override it.

Environment overrides: ``SYNMODAL_OUT_DIR`` (default output directory) and
``SYNMODAL_THREADS`` (BLAS thread count).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import subprocess
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .assembly import load_corpus, record_triple, write_corpus
from .encoder import EncoderConfig, atomic_write_text
from .evaluation import EmbeddingModel, evaluate_clones, evaluate_search, synthetic_corpus
from .syntax import dumps_ast, parse
from .tokenizer import Vocab, train_bpe
from .training import TrainConfig, init_state, make_schedule, prepare_batch, resume, run, step_seed

MANIFEST = "run_manifest.json"


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


# -- outputs ----------------------------------------------------------------------


class Outputs:
    """Tracks files a command writes so a failed run leaves nothing behind.

    New files are deleted on failure; files that already existed are cut back
    to their original size (the loss log is append-only) and otherwise kept.
    """

    def __init__(self, directory: Path):
        self.directory = directory
        self.created_dir = not directory.exists()
        self.paths: list[Path] = []
        self._before: dict[Path, int | None] = {}

    def path(self, name: str | Path) -> Path:
        p = Path(name)
        p = p if p.is_absolute() else self.directory / p
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self._before:
            self._before[p] = p.stat().st_size if p.is_file() else None
            self.paths.append(p)
        return p

    def cleanup(self) -> None:
        if self.created_dir and self.directory.exists():
            shutil.rmtree(self.directory, ignore_errors=True)
            return
        for p, size in self._before.items():
            if size is None:
                if p.is_file():
                    p.unlink()
            elif p.is_file() and p.stat().st_size > size:
                with open(p, "r+b") as fh:
                    fh.truncate(size)


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def write_manifest(outputs: Outputs, command: str, config: dict, seed: int | None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "git": _git_stamp(),
        "outputs": sorted(str(p) for p in outputs.paths),
    }
    atomic_write_text(outputs.path(MANIFEST), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- configuration --------------------------------------------------------------------


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    label = f"{section}.{name}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{label}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{label}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{label}: expected a number, got {value!r}")
    if not isinstance(value, str):
        raise ConfigError(f"{label}: expected a string, got {value!r}")
    return value


_ENCODER_DEFAULTS = {f.name: f.default for f in fields(EncoderConfig) if f.name != "vocab_size"}
_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
_SECTIONS = {"train": _TRAIN_DEFAULTS, "encoder": _ENCODER_DEFAULTS}


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> dict[str, dict]:
    """Read the TOML file and apply ``section.field=value`` overrides, type-checked."""
    raw: dict[str, dict] = {"train": {}, "encoder": {}}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for key, value in doc.items():
            if key not in _SECTIONS or not isinstance(value, dict):
                raise ConfigError(f"{key}: unknown config section (expected [train] or [encoder])")
            raw[key].update(value)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown config section (expected train or encoder)")
        raw[section][name] = value
    out: dict[str, dict] = {}
    for section, defaults in _SECTIONS.items():
        values = {}
        for name, value in raw[section].items():
            if name not in defaults:
                raise ConfigError(f"{section}.{name}: unknown field")
            values[name] = _coerce(section, name, value, defaults[name])
        out[section] = values
    return out


def _build_configs(cfg: dict[str, dict], vocab_size: int) -> tuple[TrainConfig, EncoderConfig]:
    try:
        train_cfg = TrainConfig(**cfg["train"])
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    enc = dict(cfg["encoder"])
    enc.setdefault("max_positions", train_cfg.budgets.max_length)
    try:
        enc_cfg = EncoderConfig(vocab_size=vocab_size, **enc)
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from None
    return train_cfg, enc_cfg


def _apply_flags(cfg: dict[str, dict], args: argparse.Namespace, names: Sequence[str]) -> None:
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            cfg["train"][name] = _coerce("train", name, value, _TRAIN_DEFAULTS[name])


def _out_dir(args: argparse.Namespace) -> Path:
    chosen = args.out_dir or os.environ.get("SYNMODAL_OUT_DIR") or "."
    return Path(chosen)


# -- commands ----------------------------------------------------------------------------


def cmd_parse(args: argparse.Namespace, outputs: Outputs) -> int:
    source = Path(args.input).read_text(encoding="utf-8")
    text = dumps_ast(parse(source)) + "\n"
    if args.out:
        atomic_write_text(outputs.path(args.out), text)
        write_manifest(outputs, "parse", {"input": str(args.input)}, None)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train_bpe(args: argparse.Namespace, outputs: Outputs) -> int:
    records = load_corpus(args.corpus)
    vocab = train_bpe([t for r in records for t in r.surface_text()], args.vocab_size)
    atomic_write_text(outputs.path(args.out), vocab.to_text())
    write_manifest(outputs, "train-bpe", {"corpus": str(args.corpus), "vocab_size": args.vocab_size,
                                          "actual_size": len(vocab)}, args.seed)
    return 0


def cmd_pretrain(args: argparse.Namespace, outputs: Outputs) -> int:
    cfg = load_config(args.config, args.set or ())
    _apply_flags(cfg, args, ("steps", "seed", "learning_rate", "batch_size", "mmlm", "ip", "tep", "mcl"))
    records = load_corpus(args.corpus)
    log_path = outputs.path("log.jsonl")
    if args.resume:
        if args.vocab:
            raise ConfigError("--vocab cannot be combined with --resume (the checkpoint carries its vocabulary)")
        from .training import load_state

        stored = load_state(args.resume).train_config.to_dict()
        stored.update(cfg["train"])
        cfg["train"] = stored
        train_cfg, _ = _build_configs(cfg, 1)
        outputs.path("checkpoint.json")
        state = resume(args.resume, records, train_cfg, out_dir=outputs.directory, log_path=log_path)
    else:
        if not args.vocab:
            raise ConfigError("--vocab is required unless --resume is given")
        vocab = Vocab.load(args.vocab)
        train_cfg, enc_cfg = _build_configs(cfg, len(vocab))
        state = init_state(vocab, train_cfg, enc_cfg)
        outputs.path("checkpoint.json")
        if train_cfg.checkpoint_every:
            for k in range(train_cfg.checkpoint_every, train_cfg.steps + 1, train_cfg.checkpoint_every):
                outputs.path(f"checkpoint-{k:06d}.json")
        log_path.write_text("")
        state = run(state, [record_triple(r, vocab) for r in records], out_dir=outputs.directory, log_path=log_path)
    snapshot = {"train": state.train_config.to_dict(), "encoder": state.encoder_config.to_dict(),
                "corpus": str(args.corpus), "active_objectives": list(state.train_config.active),
                "final_step": state.step}
    write_manifest(outputs, "pretrain", snapshot, state.train_config.seed)
    return 0


def _emit_report(report, outputs: Outputs, args: argparse.Namespace, command: str) -> int:
    text = report.to_json() + "\n"
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(outputs.path(args.out), text)
    write_manifest(outputs, command, {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                                      "similarity": args.similarity}, None)
    return 0


def cmd_eval_search(args: argparse.Namespace, outputs: Outputs) -> int:
    model = EmbeddingModel.from_checkpoint(args.checkpoint)
    return _emit_report(evaluate_search(load_corpus(args.corpus), model, args.similarity), outputs, args, "eval-search")


def cmd_eval_clone(args: argparse.Namespace, outputs: Outputs) -> int:
    model = EmbeddingModel.from_checkpoint(args.checkpoint)
    return _emit_report(evaluate_clones(load_corpus(args.corpus), model, args.similarity), outputs, args, "eval-clone")


def cmd_inspect_batch(args: argparse.Namespace, outputs: Outputs) -> int:
    cfg = load_config(args.config, args.set or ())
    _apply_flags(cfg, args, ("seed", "batch_size"))
    vocab = Vocab.load(args.vocab)
    train_cfg, enc_cfg = _build_configs(cfg, len(vocab))
    records = load_corpus(args.corpus)
    triples = [record_triple(r, vocab) for r in records]
    epoch, indices = make_schedule(triples, train_cfg).batch(args.step)
    plan = prepare_batch([triples[i] for i in indices], train_cfg, len(vocab), epoch, step_seed(train_cfg, args.step))
    examples = []
    for k, idx in enumerate(indices):
        item: dict[str, Any] = {"corpus_index": idx}
        if plan.packed:
            p = plan.packed[k]
            item["ids"] = list(p.ids)
            item["segments"] = list(p.segments)
            item["identifier_labels"] = {"positions": list(p.pl_positions), "labels": [int(x) for x in p.identifier_labels]}
        if plan.mask_plans:
            m = plan.mask_plans[k]
            item["mask"] = {"positions": list(m.positions), "replacements": list(m.replacements),
                            "written_ids": list(m.written_ids), "labels": list(m.labels)}
        if plan.tep_plans:
            t = plan.tep_plans[k]
            item["tep"] = {"pairs": [list(pr) for pr in t.pairs], "labels": list(t.labels)}
        examples.append(item)
    dump: dict[str, Any] = {"step": args.step, "epoch": epoch, "active_objectives": list(train_cfg.active),
                            "examples": examples}
    if plan.contrastive is not None:
        cb = plan.contrastive
        dump["contrastive"] = {
            "schemes": cb.schemes,
            "anchors": [list(a.ids) for a in cb.anchors],
            "positives": [list(p.ids) for p in cb.positives],
            "negatives": [[f"{side}:{j}" for side, j in cb.negatives(i)] for i in range(cb.size)],
        }
    text = json.dumps(dump, indent=1) + "\n"
    if args.out:
        atomic_write_text(outputs.path(args.out), text)
        write_manifest(outputs, "inspect-batch", {"train": train_cfg.to_dict(), "step": args.step}, train_cfg.seed)
    else:
        sys.stdout.write(text)
    return 0


def cmd_make_corpus(args: argparse.Namespace, outputs: Outputs) -> int:
    rows = synthetic_corpus(args.n, args.seed, args.clones)
    if args.unpaired:
        for r in rows[len(rows) - args.unpaired :]:
            r.pop("comment")
    path = outputs.path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(rows, path)
    write_manifest(outputs, "make-corpus", {"n": args.n, "clones": args.clones, "unpaired": args.unpaired}, args.seed)
    return 0


# -- argument parsing ---------------------------------------------------------------------------


def _bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes", "on"):
        return True
    if value.lower() in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synmodal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--out-dir", help="directory for outputs and run_manifest.json (default: $SYNMODAL_OUT_DIR or .)")
        return p

    p = command("parse", cmd_parse, "parse a mini-language file and print its AST as JSON")
    p.add_argument("--in", dest="input", required=True, help="source file")
    p.add_argument("--out", help="write the AST JSON here instead of stdout")

    p = command("train-bpe", cmd_train_bpe, "learn a BPE vocabulary from a corpus")
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--vocab-size", type=int, default=1000, help="target vocabulary size (default 1000)")
    p.add_argument("--out", default="vocab.txt", help="vocabulary file (default vocab.txt in --out-dir)")
    p.add_argument("--seed", type=int, default=0, help="recorded in the manifest; training is seed-free")

    p = command("pretrain", cmd_pretrain, "pre-train the encoder and write checkpoints plus a JSONL loss log")
    p.add_argument("--config", help="TOML file with [train] and [encoder] tables")
    p.add_argument("--corpus", required=True, help="training corpus JSONL")
    p.add_argument("--vocab", help="vocabulary file from train-bpe")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one config field")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    for name in ("mmlm", "ip", "tep", "mcl"):
        p.add_argument(f"--{name}", type=_bool, metavar="BOOL", help=f"enable or disable the {name.upper()} objective")

    for name, handler, text in (
        ("eval-search", cmd_eval_search, "zero-shot code search: MRR of comments against code"),
        ("eval-clone", cmd_eval_clone, "clone retrieval: MAP@R over cluster ids"),
    ):
        p = command(name, handler, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True, help="evaluation corpus JSONL")
        p.add_argument("--similarity", choices=("dot", "cosine"), default="dot")
        p.add_argument("--out", help="also write the MetricReport JSON here")

    p = command("inspect-batch", cmd_inspect_batch, "dump the plans of one training batch as JSON")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--step", type=int, default=0, help="training step whose batch to show")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", help="write the dump here instead of stdout")

    p = command("make-corpus", cmd_make_corpus, "write a synthetic templated corpus with cluster ids")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clones", type=int, default=1, help="records per cluster")
    p.add_argument("--unpaired", type=int, default=0, help="drop the comment from this many trailing records")
    p.add_argument("--out", default="corpus.jsonl")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    outputs = Outputs(_out_dir(args))
    try:
        return args.handler(args, outputs)
    except (ValueError, OSError, KeyError) as exc:
        outputs.cleanup()
        print(f"synmodal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        outputs.cleanup()
        raise


if __name__ == "__main__":
    sys.exit(main())
