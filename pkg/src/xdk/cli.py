"""Command-line workflow: synth-corpus, pretrain, adapt, eval, sweep, bundles, report.

Exit codes: 0 success, 1 user error (bad flags, missing files, incompatible
artifacts), 2 internal error. All outputs land under the command's --out
directory. XDK_DETERMINISTIC=1 plus a fixed --seed makes every command
reproduce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, export_bundle, import_bundle, inject, mask_for_mode
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SpeakerSpec, filter_split, generate_synthetic_corpus, load_corpus,
                   save_corpus)
from .decoding import evaluate_utterances
from .errors import XdkError
from .metrics import delta, gamma, read_report_wer, write_report
from .model import ModelConfig, TransducerModel
from .train import TrainConfig, deterministic_mode, sweep, train

ADAPT_MODES = ("adapters", "finetune-enc", "finetune-layer1", "finetune-layers1-3")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None, help="training steps (default 1000)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--batch-size", type=int, default=None, help="utterances per step (default 8)")
    p.add_argument("--eval-every", type=int, default=None, help="dev-eval period (default 200)")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None,
                   help="optimizer (default adam)")
    p.add_argument("--clip-norm", type=float, default=None,
                   help="global gradient-norm clip (default 5.0)")
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults; precedence: flags > config > defaults")


TRAIN_DEFAULTS = {"steps": 1000, "lr": 1e-3, "batch_size": 8, "eval_every": 200,
                  "optimizer": "adam", "clip_norm": 5.0}


def _merged(args, config: dict, key: str, defaults: dict):
    value = getattr(args, key)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return defaults[key]


def _load_config_file(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    return json.loads(Path(args.config).read_text(encoding="utf-8"))


def _train_config(args, mask, seed: int) -> TrainConfig:
    config = _load_config_file(args)
    g = lambda key: _merged(args, config, key, TRAIN_DEFAULTS)
    return TrainConfig(mask=mask, learning_rate=g("lr"), max_steps=g("steps"),
                       batch_size=g("batch_size"), eval_every=g("eval_every"),
                       optimizer=g("optimizer"), clip_norm=g("clip_norm"), seed=seed)


def _filtered_corpus(args):
    corpus = load_corpus(args.manifest)
    if getattr(args, "speakers", None):
        wanted = set(args.speakers.split(","))
        corpus = [u for u in corpus if u.speaker_id in wanted]
    if not corpus:
        raise XdkError("no utterances selected from the manifest")
    return corpus


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    n_perturbed = args.perturbed
    if n_perturbed > args.speakers:
        raise XdkError("--perturbed cannot exceed --speakers")
    specs = [SpeakerSpec.from_seed(seed=1000 + i,
                                   severity_knob=args.severity if i >= args.speakers - n_perturbed else 0.0,
                                   feat_dim=args.feat_dim)
             for i in range(args.speakers)]
    corpus = generate_synthetic_corpus(
        num_speakers=args.speakers, utt_per_speaker=args.utts_per_speaker,
        vocab=args.vocab, token_pattern_len=args.pattern_len,
        noise_std=args.noise_std, speaker_specs=specs, seed=args.seed,
        feat_dim=args.feat_dim, min_tokens=args.min_tokens, max_tokens=args.max_tokens)
    out = Path(args.out)
    manifest = save_corpus(corpus, out)
    rows = [f"spk{i:02d}\t{spec.severity_knob:g}\t{spec.seed}" for i, spec in enumerate(specs)]
    (out / "speakers.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(corpus)} utterances to {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    corpus = _filtered_corpus(args)
    feat_dim = corpus[0].features.frames.shape[1]
    model_config = ModelConfig(
        encoder_kind=args.encoder, num_encoder_layers=args.layers,
        d_model=args.d_model, num_heads=args.heads, d_pred=args.d_pred,
        d_joint=args.d_joint, vocab_size=args.vocab,
        input_dim=4 * feat_dim, max_positions=args.max_positions)
    model = TransducerModel(model_config, seed=args.seed)
    mask = mask_for_mode(model, "finetune-enc")
    all_groups = tuple(sorted(model.store.groups()))
    from .adapters import TrainableMask

    cfg = _train_config(args, TrainableMask(all_groups), args.seed)
    out = Path(args.out)
    _echo_config(out, {"model": model_config.to_dict(), "train": cfg.__dict__ | {
        "mask": list(cfg.mask.groups)}, "command": "pretrain"})
    record = train(model, corpus, cfg, out)
    ckpt = out / "base.ckpt"
    save_checkpoint(model, ckpt)
    print(f"best dev WER {record.best_dev_wer:.3f} at step {record.best_step}; "
          f"checkpoint {ckpt}")
    return 0


def cmd_adapt(args) -> int:
    corpus = _filtered_corpus(args)
    model = load_checkpoint(args.base)
    if args.mode == "adapters":
        layers = None
        if args.adapter_layers:
            layers = tuple(int(i) for i in args.adapter_layers.split(","))
        inject(model, AdapterConfig(d_b=args.d_b, layers=layers), seed=args.seed)
    mask = mask_for_mode(model, args.mode)
    cfg = _train_config(args, mask, args.seed)
    out = Path(args.out)
    _echo_config(out, {"base": str(args.base), "mode": args.mode, "d_b": args.d_b,
                       "train": cfg.__dict__ | {"mask": list(cfg.mask.groups)},
                       "command": "adapt"})
    record = train(model, corpus, cfg, out)
    save_checkpoint(model, out / "adapted.ckpt")
    if args.mode == "adapters":
        (out / "adapter.xdab").write_bytes(export_bundle(model))
    print(f"best dev WER {record.best_dev_wer:.3f} at step {record.best_step}; "
          f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    corpus = _filtered_corpus(args)
    utts = filter_split(corpus, args.split)
    if not utts:
        raise XdkError(f"no utterances in split {args.split!r}")
    model = load_checkpoint(args.model)
    if args.bundle:
        import_bundle(model, Path(args.bundle).read_bytes())
    report = evaluate_utterances(model, utts, args.max_symbols)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.txt", out / "report.json")
    print(f"{args.split} WER {report.wer:.3f} over {len(utts)} utterances; "
          f"report in {out}")
    return 0


def cmd_sweep(args) -> int:
    corpus = _filtered_corpus(args)
    base_blob = Path(args.base).read_bytes()
    lrs = [float(x) for x in args.lrs.split(",")]
    d_bs = [int(x) for x in args.d_bs.split(",")] if args.d_bs else [8]
    adapter_layers = None
    if args.adapter_layers:
        adapter_layers = tuple(int(i) for i in args.adapter_layers.split(","))
    cfg = _train_config(args, mask_for_mode(load_checkpoint(args.base), "finetune-enc"),
                        args.seed)
    out = Path(args.out)
    _echo_config(out, {"mode": args.mode, "learning_rates": lrs, "d_b": d_bs,
                       "command": "sweep"})
    jobs = 1 if deterministic_mode() else args.jobs
    cells = sweep({"learning_rates": lrs, "d_b": d_bs}, corpus, base_blob, args.mode,
                  cfg, jobs=jobs, out_root=out / "cells",
                  adapter_layers=adapter_layers, adapter_seed=args.seed)
    include_timing = not deterministic_mode()
    (out / "sweep.json").write_text(json.dumps(
        [c.to_dict(include_timing) for c in cells], indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"{'lr':>10} {'d_b':>5} {'best_dev_wer':>14} {'best_step':>10}")
    for c in cells:
        if c.record is None:
            print(f"{c.learning_rate:>10g} {str(c.d_b):>5} {'diverged':>14}")
        else:
            print(f"{c.learning_rate:>10g} {str(c.d_b):>5} "
                  f"{c.record.best_dev_wer:>14.3f} {c.record.best_step:>10}")
    return 0


def cmd_export_bundle(args) -> int:
    model = load_checkpoint(args.model)
    Path(args.out).write_bytes(export_bundle(model))
    print(f"wrote {args.out}")
    return 0


def cmd_import_bundle(args) -> int:
    model = load_checkpoint(args.base)
    import_bundle(model, Path(args.bundle).read_bytes())
    save_checkpoint(model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    wer_un = read_report_wer(args.unadapted)
    wer_ad = read_report_wer(args.adapted)
    wer_ft = read_report_wer(args.finetuned)
    g_ad = gamma(wer_un, wer_ad)
    g_ft = gamma(wer_un, wer_ft)
    d = delta(wer_ad, wer_ft)
    print("metric source: aggregate WERs (not per-speaker medians)")
    print(f"WER unadapted  {wer_un:8.3f}")
    print(f"WER adapters   {wer_ad:8.3f}  gamma {g_ad:+.4f}")
    print(f"WER fine-tuned {wer_ft:8.3f}  gamma {g_ft:+.4f}")
    print(f"adapter performance drop delta {d:+.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "wer_unadapted": wer_un, "wer_adapted": wer_ad, "wer_finetuned": wer_ft,
            "gamma_adapters": g_ad, "gamma_finetune": g_ft, "delta": d,
            "aggregation": "gamma_of_aggregate_wers"}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdk", description="Residual-adapter adaptation workbench for "
                                "neural transducers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate the synthetic speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--perturbed", type=int, default=0,
                   help="how many trailing speakers get the severity perturbation")
    p.add_argument("--severity", type=float, default=0.8)
    p.add_argument("--utts-per-speaker", type=int, default=30)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--feat-dim", type=int, default=128)
    p.add_argument("--pattern-len", type=int, default=8)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--min-tokens", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("pretrain", help="train a base model from scratch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", choices=("lstm", "transformer"), default="lstm")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-pred", type=int, default=32)
    p.add_argument("--d-joint", type=int, default=32)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--max-positions", type=int, default=256)
    p.add_argument("--speakers", default=None, help="comma-separated speaker filter")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a base model to selected speakers")
    p.add_argument("--base", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ADAPT_MODES, required=True)
    p.add_argument("--d-b", type=int, default=8, help="adapter bottleneck width")
    p.add_argument("--adapter-layers", default=None,
                   help="comma-separated encoder layer indices (default: all)")
    p.add_argument("--speakers", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="decode a split and write a WER report")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", default=None, help="adapter bundle to load on top")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--speakers", default=None)
    p.add_argument("--max-symbols", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid search over learning rates and d_b")
    p.add_argument("--base", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ADAPT_MODES, required=True)
    p.add_argument("--lrs", required=True, help="comma-separated learning rates")
    p.add_argument("--d-bs", default=None, help="comma-separated bottleneck widths")
    p.add_argument("--adapter-layers", default=None)
    p.add_argument("--speakers", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-bundle", help="extract adapters from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_bundle)

    p = sub.add_parser("import-bundle", help="apply a bundle to a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_bundle)

    p = sub.add_parser("report", help="compare unadapted / adapters / fine-tune WERs")
    p.add_argument("--unadapted", required=True)
    p.add_argument("--adapted", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (XdkError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - internal failure boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
