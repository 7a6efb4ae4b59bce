"""Command-line entry point: ``multifuse <command> ...``.

Run configs are INI files with ``[data]``, ``[vision]``, ``[text]``,
``[fusion]`` and ``[train]`` sections; ``--set section.key=value`` overrides
single entries.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import audio, chat
from .checkpoint import load_model, save_model
from .encoders import EncoderConfig
from .fusion import FusionKind
from .gradsuite import run_suite
from .harness import (
    RunConfig, TrainConfig, evaluate_model, format_table, load_dataset, run_experiment, split_train_val,
    synth_dataset, save_dataset, train,
)


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _section(cp: configparser.ConfigParser, name: str, base):
    """Overlay an INI section onto a dataclass instance, rejecting unknown keys."""
    if not cp.has_section(name):
        return base
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for key, value in cp.items(name):
        if key not in known:
            raise SystemExit(f"config: unknown key [{name}] {key}")
        updates[key] = _coerce(value, known[key])
    return replace(base, **updates)


def read_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path:
        if not cp.read(path):
            raise SystemExit(f"config: cannot read {path}")
    for item in overrides:
        key, _, value = item.partition("=")
        section, _, option = key.partition(".")
        if not option or not _:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)
    return cp


def load_data(cp: configparser.ConfigParser):
    data = cp["data"] if cp.has_section("data") else {}
    if data.get("dir"):
        return load_dataset(data["dir"], data.get("kind", "mel"))
    return synth_dataset(
        int(data.get("n", 200)),
        float(data.get("snr_text", 2.0)),
        float(data.get("snr_audio", 2.0)),
        seed=int(data.get("seed", 0)),
        side=int(data.get("side", 64)),
        max_len=int(data.get("max_len", 32)),
    )


def build_run_config(cp: configparser.ConfigParser, ds, reference_lr: bool = False) -> RunConfig:
    vision = _section(cp, "vision", EncoderConfig(side=ds.side))
    text = _section(cp, "text", EncoderConfig(patch=0, max_positions=ds.max_len, vocab_size=ds.vocab_size))
    if text.vocab_size < ds.vocab_size:
        raise SystemExit(f"config: text vocab_size {text.vocab_size} < data vocabulary {ds.vocab_size}")
    tcfg = _section(cp, "train", TrainConfig())
    if reference_lr:
        tcfg = replace(tcfg, lr=TrainConfig.REFERENCE_LR)
    fusion = cp["fusion"] if cp.has_section("fusion") else {}
    return RunConfig(vision, text, tcfg, int(fusion.get("gmu_dim", 128)), int(fusion.get("hidden", 512)))


# ---------------------------------------------------------------- commands

def cmd_features(args) -> int:
    out = audio.extract_directory(args.input, args.out, kind=args.kind, side=args.side)
    print(f"wrote {len(out)} feature images to {args.out}")
    return 0


def cmd_parse_chat(args) -> int:
    vocab = None
    if args.vocab:
        vocab = json.loads(Path(args.vocab).read_text())
    vocab = chat.tokenize_directory(args.input, args.out, speakers=tuple(args.speakers),
                                    max_len=args.max_len, vocab=vocab)
    print(f"wrote {args.out} ({len(vocab)} vocabulary entries)")
    return 0


def cmd_synth(args) -> int:
    ds = synth_dataset(args.n, args.snr_text, args.snr_audio, seed=args.seed, side=args.side, max_len=args.max_len)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} synthetic samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cp = read_config(args.config, args.set)
    ds = load_data(cp)
    cfg = build_run_config(cp, ds, args.paper_fidelity)
    tr, va = split_train_val(ds, cfg.train.val_fraction, cfg.train.seed)
    model = cfg.build_model(args.kind, cfg.train.seed)
    best, history = train(model, tr, va, cfg.train)
    metrics = evaluate_model(best, va)
    save_model(best, args.out)
    Path(args.out).with_suffix(".history.json").write_text(json.dumps(history.as_dict(), indent=1))
    print(f"{args.kind}: {len(history.epochs)} epochs, best epoch {history.best_epoch}, "
          f"val accuracy {metrics.accuracy:.4f}; checkpoint {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cp = read_config(args.config, args.set)
    ds = load_data(cp)
    cfg = build_run_config(cp, ds, args.paper_fidelity)
    kinds = list(FusionKind) if args.kinds == ["all"] else [FusionKind.parse(k) for k in args.kinds]
    report = run_experiment(cfg, ds, kinds)
    Path(args.out).write_text(json.dumps(report, indent=1))
    table = format_table(report)
    Path(args.out).with_suffix(".txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.checkpoint)
    ds = load_dataset(args.data, args.feature_kind)
    m = evaluate_model(model, ds)
    print(json.dumps({**m.as_dict(), "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
                      "undefined": list(m.undefined)}, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    groups = ("op", "encoder", "fusion") if args.all else ("op",)
    results = run_suite(range(args.seeds), tol=args.tol, groups=groups)
    failed = 0
    by_case: dict[tuple[str, str], list] = {}
    for r in results:
        by_case.setdefault((r.group, r.name), []).append(r.report)
    for (group, name), reports in by_case.items():
        bad = sum(not rep.passed for rep in reports)
        failed += bad
        worst = max(rep.max_rel_error for rep in reports)
        print(f"{'ok  ' if not bad else 'FAIL'} {group:8s} {name:18s} seeds={len(reports)} worst={worst:.2e}")
    print(f"{len(results) - failed}/{len(results)} checks passed at tol {args.tol:g}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multifuse", description="Multimodal fusion of speech feature images and transcripts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("features", help="WAV directory -> 3-channel feature images")
    f.add_argument("--input", required=True)
    f.add_argument("--kind", choices=("mel", "mfcc"), default="mel")
    f.add_argument("--side", type=int, default=224)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    c = sub.add_parser("parse-chat", help="CHAT directory -> tokens.jsonl")
    c.add_argument("--input", required=True)
    c.add_argument("--speakers", nargs="+", default=["PAR"])
    c.add_argument("--max-len", type=int, default=128)
    c.add_argument("--vocab", help="existing vocab.json to reuse")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_parse_chat)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--snr-text", type=float, default=2.0)
    s.add_argument("--snr-audio", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train", cmd_train, "train one fusion model"),
                              ("experiment", cmd_experiment, "repeated runs per fusion kind")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config")
        t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        t.add_argument("--paper-fidelity", action="store_true", help="use the reference learning rate 1e-5")
        if name == "train":
            t.add_argument("--kind", choices=[k.value for k in FusionKind], required=True)
            t.add_argument("--out", default="model.ckpt")
        else:
            t.add_argument("--kinds", nargs="+", default=["all"])
            t.add_argument("--out", default="report.json")
        t.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on a data directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--feature-kind", default="mel")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--all", action="store_true", help="include encoders and end-to-end fusion models")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (chat.ChatParseError, ValueError, FileNotFoundError) as exc:
        print(f"multifuse {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
