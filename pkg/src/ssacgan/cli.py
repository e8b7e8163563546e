"""Command-line entry point: ``ssacgan {synth,split,train,eval,infer}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
``SSACGAN_THREADS`` caps BLAS threads (default 1, bit-reproducible).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ck
from .data import (DEFAULT_RATIOS, VolumeFormatError, load_volume, normalize_volume, save_json,
                   save_volume, split_dataset)
from .evaluate import (DIRECTIONS, MetricsReport, emit_report, evaluate_direction,
                       noise_sweep)
from .experiment import (SPLIT_FILE, DataError, ExperimentConfig, build_test_set, build_training_data,
                         load_manifest, resolve_split, synthesize_dataset)
from .optim import Rng
from .phantom import PhantomSpec
from .trainer import (FINAL_CHECKPOINT, LOSS_LOG, REGIMES, ConfigMismatchError, DivergenceError,
                      TrainConfig, load_checkpoint, read_log, resume_state, run_training)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

logger = logging.getLogger("ssacgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def kernel_threads() -> int:
    raw = os.environ.get("SSACGAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SSACGAN_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("SSACGAN_THREADS must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssacgan", description="Semi-supervised adversarial CycleGAN experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic two-modality phantom dataset")
    s.add_argument("--spec", type=Path, help="phantom spec JSON (defaults used when omitted)")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--subjects", type=int, required=True, help="number of subjects")

    s = sub.add_parser("split", help="write a subject-level split manifest")
    s.add_argument("--data", type=Path, required=True, help="dataset directory (with manifest.json)")
    s.add_argument("--seed", type=int, required=True, help="shuffle seed")
    s.add_argument("--ratios", type=float, nargs=5, metavar="R",
                   help="unpaired_x unpaired_y paired validation test (default 0.3 0.3 0.1 0.1 0.2)")
    s.add_argument("--out", type=Path, help=f"output file (default <data>/{SPLIT_FILE})")

    s = sub.add_parser("train", help="train one model per seed")
    s.add_argument("--config", type=Path, required=True, help="experiment config JSON")
    s.add_argument("--regime", choices=REGIMES, help="training regime (overrides config)")
    s.add_argument("--seed", type=int, nargs="+", help="run seed(s); required")
    s.add_argument("--out", type=Path, required=True, help="output directory; one <regime>-seed<s> per seed")
    s.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel worker processes")
    s.add_argument("--data", type=Path, help="dataset directory (overrides config)")
    s.add_argument("--epochs", type=int, help="total epochs")
    s.add_argument("--lr-constant-epochs", type=int, help="epochs before linear decay starts")
    s.add_argument("--lambda", dest="lam", type=float, help="cycle-consistency weight")
    s.add_argument("--alpha", type=float, help="paired-adversarial weight")
    s.add_argument("--ngf", type=int, help="generator base width")
    s.add_argument("--ndf", type=int, help="discriminator base width")
    s.add_argument("--max-shift", type=int, help="augmentation shift in pixels")
    s.add_argument("--checkpoint-every", type=int, help="write a checkpoint every N epochs")
    s.add_argument("--resume", type=Path, help="checkpoint to resume from (single seed)")
    s.add_argument("--allow-config-mismatch", action="store_true",
                   help="resume even when the checkpoint's config hash differs")

    s = sub.add_parser("eval", help="evaluate checkpoints and emit reports")
    s.add_argument("--checkpoints", type=Path, required=True, help=f"directory searched for {FINAL_CHECKPOINT}")
    s.add_argument("--data", type=Path, required=True, help="dataset directory")
    s.add_argument("--split", type=Path, help=f"split manifest (default <data>/{SPLIT_FILE} or split seed 0)")
    s.add_argument("--config", type=Path, help="experiment config JSON (data/eval sections)")
    s.add_argument("--noise-sweep", action="store_true", help="also run the Gaussian noise sweep")
    s.add_argument("--sigmas", type=float, nargs="+", help="noise grid (default 0.025 0.05 0.1 0.2 0.4)")
    s.add_argument("--out", type=Path, help="report directory (default <checkpoints>/report)")

    s = sub.add_parser("infer", help="translate one volume file with a trained generator")
    s.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    s.add_argument("--input", type=Path, required=True, help="input SSAV volume")
    s.add_argument("--direction", choices=DIRECTIONS, required=True, help="x2y uses G, y2x uses F")
    s.add_argument("--output", type=Path, required=True, help="output SSAV volume")
    return p


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.subjects < 1:
        raise UsageError("--subjects must be >= 1")
    try:
        spec = PhantomSpec.from_dict(json.loads(args.spec.read_text())) if args.spec else PhantomSpec()
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"invalid phantom spec: {exc}") from exc
    manifest = synthesize_dataset(spec, args.subjects, args.out)
    print(f"wrote {2 * len(manifest['subjects'])} volumes to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.data)
    ratios = tuple(args.ratios) if args.ratios else DEFAULT_RATIOS
    split = split_dataset(manifest["subjects"], Rng(args.seed), ratios)
    out = args.out or args.data / SPLIT_FILE
    save_json(split.to_json(), out)
    print(f"split {split.sizes()} -> {out}")
    return EXIT_OK


def _train_config(args, exp: ExperimentConfig) -> TrainConfig:
    doc = exp.train.to_dict()
    if args.regime:
        doc["regime"] = args.regime
    for flag, key in (("epochs", "epochs"), ("lr_constant_epochs", "lr_constant_epochs"),
                      ("max_shift", "max_shift"), ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            doc[key] = getattr(args, flag)
    if args.lam is not None:
        doc["weights"]["lam"] = args.lam
    if args.alpha is not None:
        doc["weights"]["alpha"] = args.alpha
    for flag in ("ngf", "ndf"):
        if getattr(args, flag) is not None:
            doc["arch"][flag] = getattr(args, flag)
    return TrainConfig.from_dict(doc)


def _train_one(exp_doc: dict, seed: int, out_root: str, resume: Optional[str],
               allow_mismatch: bool, threads: int) -> str:
    from threadpoolctl import threadpool_limits

    exp = ExperimentConfig.from_dict(exp_doc)
    cfg = TrainConfig.from_dict({**exp.train.to_dict(), "seed": seed})
    exp.train = cfg
    run_dir = Path(out_root) / f"{cfg.regime}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    split = resolve_split(exp.data, exp.data.dir)
    save_json(split.to_json(), run_dir / SPLIT_FILE)
    save_json(exp.to_dict(), run_dir / "config.json")
    data = build_training_data(exp.data, exp.data.dir, split)
    state, prior = None, ()
    if resume:
        state = resume_state(resume, cfg, allow_mismatch)
        log = Path(resume).parent / LOSS_LOG
        prior = read_log(log) if log.is_file() else ()
    with threadpool_limits(limits=threads):
        run_training(cfg, data, run_dir, state=state, prior_rows=prior)
    return str(run_dir)


def cmd_train(args) -> int:
    if not args.seed:
        raise UsageError("--seed is required (seeds make runs reproducible)")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.resume and len(args.seed) != 1:
        raise UsageError("--resume takes exactly one --seed")
    try:
        exp = ExperimentConfig.load(args.config)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if args.data is not None:
        exp.data.dir = str(args.data)
    if exp.data.dir is None:
        raise UsageError("no dataset directory: set data.dir in the config or pass --data")
    try:
        exp.train = _train_config(args, exp)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc
    load_manifest(exp.data.dir)

    threads = kernel_threads()
    job = partial(_train_one, exp.to_dict(), out_root=str(args.out),
                  resume=str(args.resume) if args.resume else None,
                  allow_mismatch=args.allow_config_mismatch, threads=threads)
    if args.jobs == 1 or len(args.seed) == 1:
        dirs = [job(seed) for seed in args.seed]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(job, args.seed))
    for d in dirs:
        print(f"trained {d}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.split is not None:
        exp.data.split = str(args.split)
    sigmas = tuple(args.sigmas) if args.sigmas else exp.eval.sigmas
    paths = sorted(args.checkpoints.rglob(FINAL_CHECKPOINT))
    if not paths:
        raise DataError(f"no {FINAL_CHECKPOINT} found under {args.checkpoints}")
    split = resolve_split(exp.data, args.data)
    test_set = build_test_set(exp.data, args.data, split.test)

    reports = {}
    sweeps = {}
    failed = []
    for path in paths:
        try:
            state = load_checkpoint(path)
        except (ck.CheckpointError, OSError) as exc:
            print(f"error: cannot load checkpoint {path}: {exc}", file=sys.stderr)
            failed.append(path)
            continue
        for direction in DIRECTIONS:
            translate = partial(state.bundle.translate, direction=direction)
            m = evaluate_direction(translate, test_set, direction)
            key = (state.regime, direction)
            reports.setdefault(key, MetricsReport(*key)).add(state.seed, *m)
        if args.noise_sweep:
            direction = exp.eval.sweep_direction
            translate = partial(state.bundle.translate, direction=direction)
            grid = [0.0] + [s for s in sigmas if s > 0]
            # shared noise seeds give every run the same corrupted inputs
            result = noise_sweep(translate, test_set, grid, exp.eval.noise_seeds, direction)
            sweeps[state.regime] = sweeps[state.regime].merge(result) if state.regime in sweeps else result
    if not reports:
        raise DataError("no checkpoint could be evaluated")
    out = args.out or args.checkpoints / "report"
    written = emit_report(list(reports.values()), out, sweeps if args.noise_sweep else None)
    for p in written:
        print(f"wrote {p}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    vol = normalize_volume(load_volume(args.input))
    out = state.bundle.translate(vol.voxels, args.direction)
    save_volume(vol.with_voxels(out), args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=kernel_threads()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigMismatchError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VolumeFormatError, ck.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
