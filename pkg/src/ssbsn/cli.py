"""Command line entry point: ``ssbsn train|denoise|verify|bench|attnmap|synth``.

Exit codes: 0 success, 1 internal or verification failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, data
from .config import ConfigError, RunConfig, load_config
from .metrics import psnr, ssim
from .network import SSBSN, load_checkpoint
from .pd import PDConfig, denoise_asymmetric, self_ensemble
from .training import TrainingDiverged, substream_seed, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads():
    n = os.environ.get("SSBSN_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _require_dir(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is not set in the config")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def _model_from(cfg: RunConfig) -> SSBSN:
    ckpt = cfg.paths.checkpoint_path
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    root = _require_dir(cfg.paths.dataset, "dataset")
    _require_dir(str(root / "noisy"), "dataset noisy folder")
    val = []
    if cfg.paths.val_dataset:
        val = data.load_eval_records(_require_dir(cfg.paths.val_dataset, "validation dataset"))
    dataset = data.load_noisy_dataset(root)
    model = SSBSN(cfg.network)
    try:
        cfg.train.validate(cfg.pd.s_train, model.grid_lcm)
    except ValueError as err:
        raise UsageError(str(err)) from None
    small = [r.id for r in dataset if min(r.noisy.shape[2:]) < cfg.train.patch_size]
    if small:
        raise UsageError(f"images smaller than patch_size {cfg.train.patch_size}: {small[:3]}")
    log = cfg.paths.log_path
    log.parent.mkdir(parents=True, exist_ok=True)
    if not resume and log.exists():
        log.unlink()
    try:
        result = train_loop(model, dataset, cfg.train, cfg.pd, val, log,
                            cfg.paths.checkpoint_dir, resume=resume)
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_FAIL
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.step} steps, final loss {last:.6f}")
    for epoch, p, s in result.validation[-1:]:
        print(f"epoch {epoch}: val PSNR {p:.3f} dB, SSIM {s:.4f}")
    return EXIT_OK


def _inputs(path: Path) -> list[tuple[Path, Optional[Path]]]:
    """(noisy, clean-or-None) pairs for a file, a folder of .ppm, or a dataset root."""
    if path.is_file():
        clean = path.parent.parent / "clean" / path.name
        return [(path, clean if path.parent.name == "noisy" and clean.is_file() else None)]
    if (path / "noisy").is_dir():
        pairs = []
        for noisy in sorted((path / "noisy").glob("*.ppm")):
            clean = path / "clean" / noisy.name
            pairs.append((noisy, clean if clean.is_file() else None))
        return pairs
    if path.is_dir():
        return [(p, None) for p in sorted(path.glob("*.ppm"))]
    raise UsageError(f"input not found: {path}")


def cmd_denoise(cfg: RunConfig, source: str, ensemble: bool = False,
                pd_test: Optional[int] = None) -> int:
    pairs = _inputs(Path(source))
    if not pairs:
        raise UsageError(f"no .ppm images under {source}")
    model = _model_from(cfg)
    pd_cfg = PDConfig(cfg.pd.s_train, pd_test or cfg.pd.s_test, cfg.pd.pad_mode)
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = []
    for noisy_path, clean_path in pairs:
        noisy = data.load_image(noisy_path).noisy
        if ensemble:
            out = self_ensemble(model, noisy, pd_cfg)
        else:
            out = denoise_asymmetric(model, noisy, pd_cfg, "test")
        out = np.clip(out, 0.0, 1.0)
        data.save_image(out, out_dir / noisy_path.name)
        line = f"{noisy_path.name}: written to {out_dir / noisy_path.name}"
        if clean_path is not None:
            clean = data.load_image(clean_path).noisy
            p, s = psnr(out, clean), ssim(out, clean)
            scores.append((psnr(noisy, clean), p, s))
            line += f"  PSNR {scores[-1][0]:.2f} -> {p:.2f} dB  SSIM {s:.4f}"
        print(line)
    if scores:
        a = np.mean(scores, axis=0)
        print(f"mean over {len(scores)}: noisy PSNR {a[0]:.2f} dB, denoised {a[1]:.2f} dB, SSIM {a[2]:.4f}")
    return EXIT_OK


def cmd_verify(full: bool = False) -> int:
    from .verify import format_matrix, full_suite, quick_suite

    checks = full_suite() if full else quick_suite()
    print(format_matrix(checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def cmd_bench(cfg: RunConfig, dynamic: bool = False) -> int:
    b = cfg.bench
    configs = [(h, w, c) for (h, w) in b.sizes for c in b.channels]
    summary = analysis.flop_ratio_report(configs, b.dhats)
    print(analysis.reports_table(summary))
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "flops.csv").write_text(analysis.reports_csv(summary.reports))
    print(f"csv written to {out_dir / 'flops.csv'}")
    if dynamic:
        from .layers import SSAttention

        bad = 0
        for r in summary.reports:
            try:
                counted = analysis.dynamic_flop_count(
                    SSAttention(r.channels, r.dhat), (1, r.channels, r.h, r.w)).total("attention")
                status = "ok" if counted == r.ss else "MISMATCH"
            except ValueError as err:
                counted, status = "-", f"not countable ({err})"
            bad += status != "ok"
            print(f"instrumented {r.h}x{r.w} C={r.channels} dhat={r.dhat}: {counted} {status}")
        return EXIT_FAIL if bad else EXIT_OK
    return EXIT_OK


def _pixel(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--pixel expects X,Y, got {text!r}") from None
    return x, y


def cmd_attnmap(cfg: RunConfig, layer: int, pixel: str, topk: int,
                image_path: Optional[str] = None) -> int:
    source = image_path or cfg.paths.image
    if not source or not Path(source).is_file():
        raise UsageError(f"attention image not found: {source or '(unset)'}")
    xy = _pixel(pixel)
    model = _model_from(cfg)
    image = data.load_image(source).noisy
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"attn_layer{layer}_{xy[0]}_{xy[1]}.ppm"
    try:
        overlay, _ = analysis.export_attention_overlay(model, image, layer, xy, topk, out)
    except analysis.NotAnSSBlock as err:
        raise UsageError(str(err)) from None
    except ValueError as err:
        raise UsageError(str(err)) from None
    print(overlay.sidecar(), end="")
    print(f"overlay written to {out} (+ {out.with_suffix('.txt').name})")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    d = cfg.data
    spec = data.NoiseSpec(d.noise, d.sigma, seed=substream_seed(cfg.seed, "noise"))
    if not cfg.paths.dataset:
        raise UsageError("dataset is not set in the config")
    base = substream_seed(cfg.seed, "synth")
    records = data.make_synthetic_records(d.count, d.size, spec, d.kind, base, d.period,
                                           blur=d.blur)
    data.write_dataset(cfg.paths.dataset, records)
    print(f"wrote {len(records)} images to {cfg.paths.dataset}")
    if cfg.paths.val_dataset and d.val_count:
        val = data.make_synthetic_records(d.val_count, d.size, spec, d.kind, base + 1_000_003,
                                          d.period, blur=d.blur)
        data.write_dataset(cfg.paths.val_dataset, val)
        print(f"wrote {len(val)} images to {cfg.paths.val_dataset}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssbsn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_dir/last.ssbsn")

    p = sub.add_parser("denoise", help="denoise an image, a folder or a dataset root")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--in", dest="source", required=True)
    p.add_argument("--ensemble", action="store_true", help="average the 8 dihedral passes")
    p.add_argument("--pd-test", type=int, default=None, help="test-phase stride (default 2)")

    p = sub.add_parser("verify", help="run invariant checks")
    p.add_argument("--full", action="store_true")

    p = sub.add_parser("bench", help="attention FLOP table and CSV")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--dynamic", action="store_true", help="also count with instrumented layers")

    p = sub.add_parser("attnmap", help="export an attention overlay")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--pixel", required=True, help="X,Y")
    p.add_argument("--topk", type=int, default=8)
    p.add_argument("--in", dest="source", default=None)

    p = sub.add_parser("synth", help="write a synthetic noisy/clean dataset")
    p.add_argument("-c", "--config", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads():
            if args.command == "verify":
                return cmd_verify(args.full)
            cfg = load_config(args.config)
            if args.command == "train":
                return cmd_train(cfg, args.resume)
            if args.command == "denoise":
                return cmd_denoise(cfg, args.source, args.ensemble, args.pd_test)
            if args.command == "bench":
                return cmd_bench(cfg, args.dynamic)
            if args.command == "attnmap":
                return cmd_attnmap(cfg, args.layer, args.pixel, args.topk, args.source)
            if args.command == "synth":
                return cmd_synth(cfg)
    except (UsageError, ConfigError, data.PPMError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
