"""Command-line entry point: ``textdiae <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PRESETS, build_config, load_toml
from .enhance import enhance_image, enhancer_from_checkpoint, train_enhancer
from .errors import (CheckpointError, ConfigError, DataError, DimensionError, MetricUndefinedError, NumericError,
                     ParseError, VocabularyError)
from .imageops import (TASKS, DegradationSpec, Image, degrade, degrade_noise, document_textures, read_image,
                       render_synthetic_word, write_image)
from .metrics import enhancement_report, recognition_report
from .pretrain import load_checkpoint, load_corpus, read_manifest, save_checkpoint, train
from .recognize import recognize, recognizer_from_checkpoint, train_recognizer
from .vit import ModelConfig

log = logging.getLogger("textdiae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_WORDS = ("cat", "dog", "fish", "bird", "tree", "moon", "star", "rain")
DEGRADE_SUFFIX = {"mask": "masked", "blur": "blur", "noise": "noise"}


def _ext(img: Image) -> str:
    return ".pgm" if img.channels == 1 else ".ppm"


def _read_vocab(spec: str | None) -> list[str]:
    if spec is None:
        return list(DEFAULT_WORDS)
    p = Path(spec)
    if p.is_file():
        words = [w.strip() for w in p.read_text(encoding="utf-8").splitlines() if w.strip()]
    else:
        words = [w.strip() for w in spec.split(",") if w.strip()]
    if not words:
        raise DataError(f"vocabulary {spec!r} is empty")
    return words


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    """Render ``n`` word images plus ``manifest.tsv``; ``--pairs`` also writes noisy copies."""
    words = _read_vocab(args.vocab)
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(words), size=args.n, replace=args.n > len(words)) if args.n else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    textures = document_textures(args.h, args.w, args.channels) if args.pairs else []
    lines, pair_lines = [], []
    for i, k in enumerate(picks):
        img, text = render_synthetic_word(words[int(k)], args.h, args.w, args.channels)
        name = f"img_{i:04d}{_ext(img)}"
        write_image(out / name, img)
        lines.append(f"{name}\t{text}\n")
        if args.pairs:
            bg = textures[i % len(textures)]
            noisy = degrade_noise(img, bg, (args.alpha, args.alpha), seed=args.seed * 100003 + i)
            nname = f"noisy_{i:04d}{_ext(img)}"
            write_image(out / nname, noisy)
            pair_lines.append(f"{nname}\t{name}\n")
    (out / "manifest.tsv").write_text("".join(lines), encoding="utf-8")
    if args.pairs:
        (out / "pairs.tsv").write_text("".join(pair_lines), encoding="utf-8")
    log.info("wrote %d images to %s", len(lines), out)
    return EXIT_OK


def _run_config(args, section: str, **overrides):
    """Preset or TOML config with command-line overrides applied to ``section``."""
    cfg = load_toml(args.config, default_preset=args.preset) if args.config else build_config(args.preset)
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **overrides))
    return cfg


def _echo_config(name: str, section) -> None:
    log.info("%s config: %s", name, json.dumps(dataclasses.asdict(section), sort_keys=True))


@contextlib.contextmanager
def _log_stream(path):
    if not path:
        yield None
        return
    with open(path, "w", encoding="utf-8") as fh:
        yield fh


def cmd_pretrain(args) -> int:
    cfg = _run_config(args, "pretrain")
    _echo_config("model", cfg.model)
    _echo_config("pretrain", cfg.pretrain)
    images = load_corpus(args.data)
    with _log_stream(args.log) as stream:
        ckpt = train(images, cfg.model, cfg.pretrain, out_path=args.out, log_stream=stream,
                     checkpoint_every=args.checkpoint_every)
    log.info("pretraining finished at step %d; checkpoint %s", ckpt.step, args.out)
    return EXIT_OK


def _labelled(manifest):
    root, rows = read_manifest(manifest, columns=2)
    paths = [(root / r[0], r[1]) for r in rows]
    _require_files([p for p, _ in paths])
    return [(read_image(p), label) for p, label in paths]


def _paired(manifest):
    root, rows = read_manifest(manifest, columns=2)
    paths = [(root / r[0], root / r[1]) for r in rows]
    _require_files([p for pair in paths for p in pair])
    return [(read_image(a), read_image(b)) for a, b in paths]


def _require_files(paths):
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise DataError("missing files:\n  " + "\n  ".join(missing))


def cmd_finetune(args) -> int:
    section = args.task
    extra = {}
    if args.freeze_encoder:
        extra["freeze_encoder"] = True
    if args.label_fraction is not None:
        extra["label_fraction"] = args.label_fraction
    cfg = _run_config(args, section, **extra)
    pretrained = None
    model_cfg = cfg.model
    if args.init:
        pretrained = load_checkpoint(args.init)
        if pretrained.kind != "pretrain":
            raise CheckpointError(f"{args.init} is a {pretrained.kind!r} checkpoint, expected 'pretrain'",
                                  field="kind")
        model_cfg = ModelConfig.from_dict(pretrained.model_config)
    tcfg = getattr(cfg, section)
    _echo_config("model", model_cfg)
    _echo_config(section, tcfg)
    with _log_stream(args.log) as stream:
        if section == "rec":
            _, ckpt = train_recognizer(_labelled(args.labels), model_cfg, tcfg, pretrained, stream)
        else:
            _, ckpt = train_enhancer(_paired(args.labels), model_cfg, tcfg, pretrained, stream)
    save_checkpoint(args.out, ckpt)
    log.info("fine-tuning finished at step %d; checkpoint %s", ckpt.step, args.out)
    return EXIT_OK


def _report_paths(report: str) -> tuple[Path, Path]:
    p = Path(report)
    if p.suffix.lower() == ".json":
        return p, p.with_suffix(".csv")
    return Path(f"{report}.json"), Path(f"{report}.csv")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    if ckpt.kind != args.task:
        raise CheckpointError(f"{args.model} is a {ckpt.kind!r} checkpoint, expected {args.task!r}", field="kind")
    if args.task == "rec":
        samples = _labelled(args.data)
        ids = [str(i) for i in range(len(samples))]
        model, _ = recognizer_from_checkpoint(ckpt)
        hyps = recognize(model, [s[0] for s in samples]) if samples else []
        report = recognition_report(list(zip(hyps, [s[1] for s in samples])), ids)
    else:
        pairs = _paired(args.data)
        ids = [str(i) for i in range(len(pairs))]
        model, _ = enhancer_from_checkpoint(ckpt)
        with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
            outputs = list(pool.map(lambda p: enhance_image(p[0], model, overlap=args.overlap), pairs))
        report = enhancement_report(outputs, [p[1] for p in pairs], ids, threshold=args.threshold)
    jpath, cpath = _report_paths(args.report)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    jpath.write_text(report.to_json() + "\n", encoding="utf-8")
    cpath.write_text(report.to_csv(), encoding="utf-8")
    log.info("evaluated %d samples; report %s", report.n, jpath)
    return EXIT_OK


def cmd_enhance(args) -> int:
    model, _ = enhancer_from_checkpoint(load_checkpoint(args.model))
    write_image(args.out, enhance_image(read_image(args.input), model, overlap=args.overlap))
    return EXIT_OK


def cmd_degrade(args) -> int:
    img = read_image(args.input)
    kinds = TASKS if args.kind == "all" else (args.kind,)
    out_dir = Path(args.out) if args.out else Path(args.input).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    backgrounds = [read_image(args.background)] if args.background else \
        document_textures(img.height, img.width, img.channels)
    k_range = (args.k, args.k) if args.k is not None else (1, 15)
    for kind in kinds:
        spec = DegradationSpec(kind, mask_ratio=args.ratio, blur_kernel_range=k_range, rng_seed=args.seed)
        out, mask = degrade(img, spec, args.patch, backgrounds)
        path = out_dir / f"{stem}.{DEGRADE_SUFFIX[kind]}{_ext(out)}"
        write_image(path, out)
        if mask is not None:
            log.info("masked %d of %d patches", int(np.count_nonzero(mask)), mask.size)
        log.info("wrote %s", path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _config_flags(p):
    p.add_argument("--config", help="TOML run config (strict keys)")
    p.add_argument("--preset", default="paper-htr", choices=PRESETS, help="base preset (default: %(default)s)")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="cap the number of optimiser steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="JSON-lines training log path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="textdiae", description="Degradation-invariant autoencoder toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic word corpus")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--vocab", help="word-list file or comma-separated words")
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", action="store_true", help="also write noisy copies and pairs.tsv")
    p.add_argument("--alpha", type=float, default=0.5, help="blend weight for --pairs noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="multi-task self-supervised pretraining")
    _config_flags(p)
    p.add_argument("--data", required=True, help="manifest of image paths")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--checkpoint-every", type=int, default=0, dest="checkpoint_every",
                   help="also save every N epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a recognition or enhancement head")
    p.add_argument("task", choices=("rec", "enh"))
    _config_flags(p)
    p.add_argument("--from", dest="init", help="pretraining checkpoint (omit to train from scratch)")
    p.add_argument("--freeze-encoder", action="store_true", dest="freeze_encoder")
    p.add_argument("--labels", required=True, help="labelled (rec) or paired (enh) manifest")
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--task", required=True, choices=("rec", "enh"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report path; writes .json and .csv")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("enhance", help="enhance a whole image with a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("degrade", help="preview pretext degradations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", default="all", choices=TASKS + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--k", type=int, help="fixed blur kernel size")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--background", help="noise background image (default: procedural textures)")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_degrade)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ParseError, CheckpointError, DimensionError, VocabularyError, MetricUndefinedError,
            OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
