"""Command-line interface: ``rwsaunet <command> ...``.

Exit codes: 0 ok, 2 config error, 3 input error, 4 weights error, 5 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dsp import AudioError, read_wav, write_wav
from .model import ConfigError, build_model
from .objectives import MetricReport, TrainingAborted
from .toy import load_dataset
from .training import restore, train
from .weights import WeightsError, WeightStore, content_hash

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_WEIGHTS, EXIT_VERIFY = 0, 2, 3, 4, 5


class InputError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: str
    seed: int
    weights_hash: str = ""
    started: str = ""
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_config(path):
    rc = config_mod.load(path) if path else config_mod.defaults()
    return rc.validate()


def _manifest(args, rc, weights_hash=""):
    return RunManifest(args.command, list(sys.argv), rc.dumps(), rc["train.seed"], weights_hash, args._started)


# --------------------------------------------------------------------------
# commands


def cmd_count_params(args):
    rc = _load_config(args.config)
    model = build_model(rc.model, rc["train.seed"])
    per, total = model.count_params()
    width = max(len(k) for k in per)
    for name, n in per.items():
        print(f"{name:<{width}}  {n:>10,}")
    print(f"{'total':<{width}}  {total:>10,}  ({total / 1e6:.3f}M)")
    print(f"tied attention units: {model.tied_units()}  aliased parameters: {len(model.ties)}")
    return EXIT_OK


def cmd_count_flops(args):
    rc = _load_config(args.config)
    if not args.seconds > 0:
        raise InputError(f"--seconds must be positive, got {args.seconds}")
    model = build_model(rc.model, rc["train.seed"])
    try:
        report = model.flops(args.seconds)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(report.table())
    return EXIT_OK


def _load_weights(model, path):
    store = WeightStore.load(path)
    store.apply(model)
    return content_hash(Path(path).read_bytes())


def cmd_enhance(args):
    rc = _load_config(args.config)
    model = build_model(rc.model, rc["train.seed"])
    try:
        audio = read_wav(args.inp)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    digest = _load_weights(model, args.weights)
    out, *_ = model.enhance(audio)
    write_wav(args.out, out)
    m = _manifest(args, rc, digest)
    m.finished = _now()
    m.extra = {"input": str(args.inp), "output": str(args.out), "samples": len(out)}
    m.write(str(args.out) + ".manifest.json")
    print(f"wrote {args.out} ({len(out)} samples)")
    return EXIT_OK


def _fit(samples, length):
    return samples[:length] if len(samples) >= length else np.pad(samples, (0, length - len(samples)))


def cmd_train_toy(args):
    rc = _load_config(args.config)
    if args.steps < 0:
        raise InputError("--steps must be nonnegative")
    try:
        data = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if not data:
        raise InputError(f"no *_clean.wav / *_noisy.wav pairs in {args.data}")
    seg = rc["train.segment"]
    pairs = [(_fit(n.samples, seg), _fit(c.samples, seg)) for _, c, n in data]
    model = build_model(rc.model, rc["train.seed"])
    try:
        res = train(model, pairs, args.steps, rc.loss_weights, lr=rc["train.lr"], eval_every=rc["train.eval_every"],
                    batch=min(rc["train.batch"], len(pairs)))
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    restore(model, res.best_state)
    digest = WeightStore.from_model(model).save(args.out)
    Path(str(args.out) + ".loss.csv").write_text(res.csv(), encoding="utf-8")
    m = _manifest(args, rc, digest)
    m.finished = _now()
    m.extra = {"data": str(args.data), "steps": args.steps, "pairs": len(pairs), "best_step": res.best_step,
               "best_si_sdr": res.best_si_sdr, "noisy_si_sdr": res.noisy_si_sdr,
               "initial_loss": res.initial_loss, "final_loss": res.final_loss}
    m.write(str(args.out) + ".manifest.json")
    print(f"initial loss {res.initial_loss:.4f}  final loss {res.final_loss:.4f}  "
          f"best SI-SDR {res.best_si_sdr:.2f} dB at step {res.best_step} (noisy {res.noisy_si_sdr:.2f} dB)")
    return EXIT_OK


def _wav_set(path):
    p = Path(path)
    if p.is_dir():
        return {f.name: f for f in sorted(p.glob("*.wav"))}
    if p.is_file():
        return {p.name: p}
    raise InputError(f"{path}: no such file or directory")


def cmd_metrics(args):
    refs, ests = _wav_set(args.ref), _wav_set(args.est)
    if len(refs) == 1 and len(ests) == 1:
        pairs = [(next(iter(refs.values())), next(iter(ests.values())))]
    else:
        missing = sorted(set(refs) ^ set(ests))
        for name in missing:
            print(f"unmatched: {name}", file=sys.stderr)
        pairs = [(refs[k], ests[k]) for k in sorted(set(refs) & set(ests))]
    report, failed = MetricReport(), bool(len(refs) > 1 and set(refs) != set(ests))
    for ref_path, est_path in pairs:
        try:
            ref, est = read_wav(ref_path), read_wav(est_path)
            if len(ref) != len(est):
                raise InputError(f"length mismatch {len(ref)} vs {len(est)}")
            report.add(str(est_path), ref, est)
        except (InputError, AudioError, ValueError) as exc:
            print(f"skipped {est_path}: {exc}", file=sys.stderr)
            failed = True
    text = report.serialize()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_INPUT if failed or not report.rows else EXIT_OK


def cmd_verify(args):
    from .verify import run_suite
    rc = _load_config(args.config)
    results = run_suite(rc.model, rc["train.seed"], full_length=not args.quick)
    for r in results:
        print(f"{r.status.upper():4}  {r.name}  {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="rwsaunet", description="RWSA-MambaUNet speech enhancement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("count-params", help="per-module and total unique parameter counts")
    s.add_argument("--config")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("count-flops", help="analytic FLOPs for one clip of the given duration")
    s.add_argument("--config")
    s.add_argument("--seconds", type=float, default=1.0)
    s.set_defaults(func=cmd_count_flops)

    s = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV file")
    s.add_argument("--config")
    s.add_argument("--weights", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("train-toy", help="train on paired *_clean.wav / *_noisy.wav files")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("metrics", help="SSNR and SI-SDR of estimates against references")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("verify", help="run the invariant suite")
    s.add_argument("--config")
    s.add_argument("--quick", action="store_true", help="short input for the shape ladder")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._started = _now()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, AudioError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except WeightsError as exc:
        print(f"weights error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS


if __name__ == "__main__":
    sys.exit(main())
