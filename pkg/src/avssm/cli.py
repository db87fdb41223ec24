"""``avssm`` command line: gen-data, train, eval, gradcheck, bench, inspect.

Every command prints a short human summary plus one JSON record per line
(prefixed by nothing, parseable with ``json.loads``) so scripts never need to
scrape prose. Exit status is 0 iff the command's contract was met.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from . import bench, configfile, container, gradcheck, network, synth, trainer
from .losses import format_report

log = logging.getLogger("avssm")


class CliError(Exception):
    """A user-facing failure: printed as ``error: ...`` with exit status 1."""


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _load_dataset(path) -> synth.SynthDataset:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"dataset not found: {p}")
    return synth.load(p)


def _train_config(args) -> trainer.TrainConfig:
    base = trainer.PRESETS[args.preset]
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise CliError(f"config not found: {p}")
        values = configfile.parse_kv(p.read_text())
    if args.seed is not None:
        values["seed"] = args.seed
    return configfile.from_mapping(trainer.TrainConfig, values, base=base)


def cmd_gen_data(args) -> int:
    if args.seed is None:
        raise CliError("--seed is required: datasets are only reproducible from an explicit seed")
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise CliError(f"config not found: {p}")
        values = configfile.parse_kv(p.read_text())
    values["seed"] = args.seed
    config = configfile.from_mapping(synth.SynthConfig, values, base=synth.PRESETS[args.preset])
    ds = synth.generate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth.export(ds, out)
    summary = ds.summary()
    print(f"wrote {out}: {summary['sequences']} sequences, {summary['frames']} frames")
    _emit(dict(summary, kind="dataset_summary", path=str(out), seed=args.seed))
    return 0


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    resume = trainer.Checkpoint.load(args.resume) if args.resume else None
    config = resume.config if resume is not None else _train_config(args)
    t0 = time.perf_counter()

    def progress(rec):
        _emit(dict(rec, kind="epoch"))

    ckpt, _ = trainer.train(config, ds, out_dir=args.out, resume=resume,
                            stop_after_steps=args.stop_after_steps, progress=progress)
    val = trainer.held_out(ds, config)
    final = trainer.evaluate(ckpt, val)
    record = dict(final, kind="train_final", step=ckpt.step, seconds=round(time.perf_counter() - t0, 3))
    if ckpt.swa.n_models:
        record["macro_f1_swa"] = trainer.evaluate(ckpt, val, use_swa=True)["macro_f1"]
    _emit(record)
    print(f"macro_f1 = {final['macro_f1']:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    ds = _load_dataset(args.data)
    if args.split == "heldout":
        ds = trainer.held_out(ds, ckpt.config)
    elif args.split == "train":
        ds = trainer.training_split(ds, ckpt.config)
    if args.zero_audio:
        ds = ds.with_audio_zeroed()
    rec = trainer.evaluate(ckpt, ds, use_swa=args.swa, threshold=args.threshold)
    rec.update(kind="eval", split=args.split, zero_audio=bool(args.zero_audio))
    print(format_report(rec))
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=args.seed, eps=args.eps)
    failed = [r for r in results if not r.passed(args.tolerance)]
    for r in results:
        status = "PASS" if r.passed(args.tolerance) else "FAIL"
        print(f"{status} {r.name} max_rel_error={r.max_rel_error:.3e} coords={r.coords}")
    for r in results:
        _emit(dict(r.as_record(args.tolerance), kind="gradcheck"))
    worst = max(results, key=lambda r: r.max_rel_error)
    _emit({"kind": "gradcheck_summary", "checks": len(results), "failed": len(failed),
           "worst": worst.name, "worst_rel_error": worst.max_rel_error, "tolerance": args.tolerance,
           "seconds": round(time.perf_counter() - t0, 3)})
    for r in failed:
        print(f"error: {r.name} exceeds tolerance {args.tolerance:g} "
              f"(max relative error {r.max_rel_error:.3e})", file=sys.stderr)
    return 1 if failed else 0


def _lengths(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None


def cmd_bench(args) -> int:
    rows = bench.run(args.lengths, baseline=args.baseline, repeats=args.repeats, seed=args.seed,
                     chunk=args.chunk)
    print(f"{'T':>8} {'agssm_s':>10} {'ratio':>6} {'attn_s':>10} {'ratio':>6}")

    def fmt(v, spec):
        return format(v, spec) if isinstance(v, float) else str(v if v is not None else "-")

    for r in rows:
        print(f"{r['T']:>8} {fmt(r['agssm_s'], '10.5f'):>10} {fmt(r['agssm_ratio'], '6.2f'):>6} "
              f"{fmt(r.get('attention_s'), '10.5f'):>10} {fmt(r.get('attention_ratio'), '6.2f'):>6}")
    for r in rows:
        _emit(dict(r, kind="bench"))
    return 0


def cmd_inspect(args) -> int:
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    groups = network.param_groups(ckpt.params)
    total = sum(groups.values())
    print(f"format_version = {trainer.CHECKPOINT_VERSION}")
    print(f"step = {ckpt.step}")
    print(f"swa_n_models = {ckpt.swa.n_models}")
    for k in sorted(groups):
        print(f"params[{k}] = {groups[k]}")
    print(f"params_total = {total}")
    _emit({"kind": "inspect", "format_version": trainer.CHECKPOINT_VERSION, "step": ckpt.step,
           "swa_n_models": ckpt.swa.n_models, "param_counts": groups, "param_total": total,
           "config": asdict(ckpt.config), "dims": ckpt.dims})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avssm", description="Audio-guided SSM action-unit detector toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="key = value file of SynthConfig fields (applied over --preset)")
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="default")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value file of TrainConfig fields (applied over --preset)")
    p.add_argument("--preset", choices=sorted(trainer.PRESETS), default="desk")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--resume", help="checkpoint to continue from (its config wins)")
    p.add_argument("--stop-after-steps", type=int, help="stop once the optimizer reaches this step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.add_argument("--swa", action="store_true", help="evaluate the SWA average")
    p.add_argument("--zero-audio", action="store_true", help="replace the audio stream with zeros")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="AG-SSM vs attention scaling benchmark")
    p.add_argument("--lengths", type=_lengths, default=list(bench.DEFAULT_LENGTHS))
    p.add_argument("--baseline", choices=("attention", "none"), default="attention")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, configfile.ConfigError, container.FormatError, ValueError, OSError,
            trainer.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
