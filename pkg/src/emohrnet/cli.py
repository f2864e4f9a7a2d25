"""``emohrnet`` command line: preprocess, augment-preview, train, eval, gradcheck.

Exit codes: 0 success, 1 failed check, 2 input/config error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import data as datamod
from . import gradcheck, plotting, tensorio, training
from . import rng as rngmod
from .audio import fit_frames, load_wav, mel_spectrogram
from .augment import augment
from .model import param_manifest

log = logging.getLogger("emohrnet")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


def _engine_config(args) -> cfgmod.EngineConfig:
    cfg = cfgmod.load(args.config, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _manifest(cfg: cfgmod.EngineConfig) -> datamod.Manifest:
    if not cfg.data.manifest:
        raise InputError("data.manifest is not set")
    m = datamod.read_manifest(cfg.data.manifest, cfg.data.schema)
    if not m.rows:
        raise InputError(f"manifest {cfg.data.manifest} is empty")
    return m


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache_name(path: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "__", path) + ".mel"


# --------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    cfg = _engine_config(args)
    manifest = _manifest(cfg)
    out = _out_dir(args)
    base = cfg.data.base_dir()
    frames, total, total_sq, n_vals = [], 0.0, 0.0, 0
    lo, hi = np.inf, -np.inf
    for row in manifest.rows:
        wave = load_wav(datamod.resolve_path(row, base))
        mel = mel_spectrogram(wave, cfg.dsp, row.source_id)
        header = {"format": "mel", "path": row.path, "source_id": row.source_id, "class_id": row.class_id, "dsp": cfg.dsp.to_dict()}
        tensorio.save(out / _cache_name(row.path), header, {"mel": mel.values})
        v = mel.values
        frames.append(v.shape[1])
        total += float(v.sum())
        total_sq += float((v * v).sum())
        n_vals += v.size
        lo, hi = min(lo, float(v.min())), max(hi, float(v.max()))
    mean = total / n_vals
    std = max(total_sq / n_vals - mean * mean, 0.0) ** 0.5
    print(f"cached {len(frames)} spectrograms in {out}")
    print(f"shape {cfg.dsp.n_mels} x [{min(frames)}..{max(frames)}] frames")
    print(f"values mean {mean:.6g} std {std:.6g} min {lo:.6g} max {hi:.6g}")
    return EXIT_OK


def load_cached(path) -> tuple[dict, np.ndarray]:
    header, tensors = tensorio.load(path)
    return header, tensors["mel"]


def cmd_augment_preview(args) -> int:
    cfg = _engine_config(args)
    if not args.sample:
        raise InputError("--sample is required")
    wave = load_wav(args.sample)
    original = fit_frames(mel_spectrogram(wave, cfg.dsp).values, cfg.data.n_frames_target)
    seed = cfg.train.seed
    augmented = augment(original, cfg.augment, rngmod.make_rng(seed, rngmod.stream_id(rngmod.PREVIEW)))
    diff = np.abs(augmented - original)
    out = _out_dir(args)
    plotting.write_pgm(out / "original.pgm", original)
    plotting.write_pgm(out / "augmented.pgm", augmented)
    plotting.write_pgm(out / "difference.pgm", diff)
    plotting.plot_preview(original, augmented, out / "preview.png")
    changed = int(np.count_nonzero(diff))
    print(f"wrote original/augmented/difference.pgm and preview.png to {out}; {changed} cells changed")
    return EXIT_OK


def _load_set(manifest, split, cfg) -> datamod.SpectrogramSet:
    rows = manifest.split(split)
    if not rows:
        raise InputError(f"split {split!r} is empty")
    return datamod.load_split(rows, cfg.data.base_dir(), cfg.dsp, cfg.data.n_frames_target)


def cmd_train(args) -> int:
    cfg = _engine_config(args)
    extra = {"dsp": cfg.dsp.to_dict(), "data": cfg.data.to_dict()}
    resume = best = None
    if args.resume:
        resume = training.load_checkpoint(args.resume)
        best_path = Path(args.resume).with_name("best.ckpt")
        if best_path.exists():
            best = training.load_checkpoint(best_path)
    manifest = _manifest(cfg)
    manifest.check_ready()
    train_set = _load_set(manifest, "train", cfg)
    val_set = _load_set(manifest, "val", cfg)

    model = training.new_model(cfg.model, cfg.train.seed)
    out = _out_dir(args)

    def progress(epoch, loss, metric):
        val = "-" if metric is None else f"{metric:.4f}"
        print(f"epoch {epoch:4d}  loss {loss:.6f}  val_ua {val}", flush=True)

    result = training.train(
        model, train_set, val_set, cfg.train, cfg.augment, extra_configs=extra, resume=resume, best=best, on_epoch=progress
    )
    training.save_checkpoint(result.best, out / "best.ckpt")
    training.save_checkpoint(result.last, out / "last.ckpt")
    training.write_history_csv(result.history, out / "history.csv")
    (out / "resolved-config.json").write_text(cfg.dumps())
    plotting.plot_history(result.history, out / "history.png")
    print(f"best epoch {result.best.epoch} val_ua {result.best.validation_metric}; outputs in {out}")
    return EXIT_OK


def confusion_table(report: training.EvalReport, labels) -> str:
    width = max(8, max(len(s) for s in labels) + 1)
    lines = [f"unweighted_accuracy {report.unweighted_accuracy!r}", f"overall_accuracy {report.overall_accuracy!r}"]
    lines.append("true\\pred".ljust(width) + "".join(s[:width - 1].rjust(width) for s in labels))
    for lab, row in zip(labels, report.confusion):
        lines.append(lab.ljust(width) + "".join(str(int(v)).rjust(width) for v in row))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    ckpt = training.load_checkpoint(args.checkpoint)
    if args.config or args.set:
        cfg = _engine_config(args)
    else:
        cfg = cfgmod.from_dict({k: v for k, v in ckpt.configs.items() if k in cfgmod.SECTIONS})
    model = ckpt.model()
    schema = datamod.get_schema(cfg.data.schema)
    if len(schema) != model.config.n_classes:
        raise InputError(f"checkpoint has {model.config.n_classes} classes but schema {schema.name!r} has {len(schema)}")
    manifest = _manifest(cfg)
    dataset = _load_set(manifest, args.split, cfg)
    report = training.evaluate(model, dataset, cfg.train.batch_size)
    payload = report.to_dict(schema.labels) | {"split": args.split, "checkpoint": str(args.checkpoint), "n_samples": len(dataset)}
    text = confusion_table(report, schema.labels)
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out / "confusion.txt").write_text(text + "\n")
        rows = ["true," + ",".join(schema.labels)]
        rows += [lab + "," + ",".join(str(int(v)) for v in r) for lab, r in zip(schema.labels, report.confusion)]
        (out / "confusion.csv").write_text("\n".join(rows) + "\n")
        plotting.plot_confusion(report.confusion, schema.labels, out / "confusion.png", f"{args.split}: UA {report.unweighted_accuracy:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    desk = gradcheck.DESK
    if args.config or args.set:
        m = _engine_config(args).model
        desk = dataclasses.replace(
            m, in_mels=gradcheck.DESK.in_mels, in_frames=gradcheck.DESK.in_frames
        )
    if args.corrupt and args.corrupt not in gradcheck.OPS:
        raise InputError(f"--corrupt must name a registered op: {', '.join(gradcheck.OPS)}")
    ctx = ad.corrupt_gradient(args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        results = gradcheck.run_all(seed, desk)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<22} max_rel_err {r.max_rel_error:.3e}  (tol {r.tolerance:g})")
    failed = sum(not r.passed for r in results)
    missing = set(gradcheck.OPS) - {r.name for r in results}
    if missing:
        print(f"FAIL  coverage: no check for {', '.join(sorted(missing))}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_CHECK if failed or missing else EXIT_OK


def cmd_params(args) -> int:
    cfg = _engine_config(args)
    total = 0
    for name, shape in param_manifest(cfg.model):
        n = int(np.prod(shape))
        total += n
        print(f"{name}\t{'x'.join(map(str, shape))}\t{n}")
    print(f"total\t\t{total}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    if not args.root:
        raise InputError("--root is required")
    m = datamod.build_manifest(args.root, args.schema, seed=0 if args.seed is None else args.seed,
                               speaker_disjoint=not args.mixed_speakers, merge_calm=args.merge_calm)
    out = Path(args.out or "manifest.tsv")
    if out.is_dir():
        out = out / "manifest.tsv"
    datamod.write_manifest(m, out)
    counts = {s: len(m.split(s)) for s in datamod.SPLITS}
    print(f"wrote {out}: {counts} ({m.skipped} files skipped)")
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine config JSON")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emohrnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="cache log-mel spectrograms for a manifest")
    ap = sub.add_parser("augment-preview", parents=[common], help="write original/augmented/difference images")
    ap.add_argument("--sample", help="WAV file to preview")
    tr = sub.add_parser("train", parents=[common], help="train and keep the best validation checkpoint")
    tr.add_argument("--resume", help="continue from a last.ckpt")
    tr.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest split")
    ev.add_argument("--checkpoint", help="checkpoint file")
    ev.add_argument("--split", default="test", choices=datamod.SPLITS)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--corrupt", metavar="OP", help="test hook: scale OP's backward by 1.5")
    sub.add_parser("params", parents=[common], help="print the parameter manifest")
    mf = sub.add_parser("manifest", parents=[common], help="build a manifest TSV from a corpus directory")
    mf.add_argument("--root", help="corpus directory")
    mf.add_argument("--schema", default="ravdess", choices=sorted(datamod.SCHEMAS))
    mf.add_argument("--mixed-speakers", action="store_true", help="allow a speaker in several splits")
    mf.add_argument("--merge-calm", action="store_true", help="RAVDESS: fold calm into neutral")
    return p


COMMANDS = {
    "preprocess": cmd_preprocess,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "manifest": cmd_manifest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "epochs", None) is not None:
        args.set = [*args.set, f"train.epochs={args.epochs}"]
    try:
        return COMMANDS[args.command](args)
    except training.NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, cfgmod.ConfigError, tensorio.ContainerError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
