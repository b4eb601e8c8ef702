"""Top-k attention overlays of a trained model on a tiled noisy image.

    python scripts/attention_demo.py runs/efficacy/m3.ssbsn --period 24 --out runs/attn
"""
import argparse
from pathlib import Path

import numpy as np

from ssbsn.analysis import export_attention_overlay, motif_repeats
from ssbsn.data import NoiseSpec, add_noise, synth_clean, write_ppm
from ssbsn.network import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--period", type=int, default=24)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--pixel", type=int, nargs=2, default=[29, 41], metavar=("X", "Y"))
    ap.add_argument("--topk", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/attn"))
    args = ap.parse_args()

    model, _ = load_checkpoint(args.checkpoint)
    clean = synth_clean("smooth-tiles", args.size, args.seed, args.period, 1 / 6)
    noisy = add_noise(clean, NoiseSpec(seed=args.seed), np.random.default_rng(args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    write_ppm(noisy, args.out / "input.ppm")
    for layer, block in enumerate(model.layers):
        if not hasattr(block, "attn"):
            continue
        overlay, _ = export_attention_overlay(model, noisy, layer, tuple(args.pixel), args.topk,
                                              args.out / f"layer{layer:02d}.ppm")
        print(f"layer {layer} (dhat {overlay.dhat}): {motif_repeats(overlay, args.period)} of "
              f"top-{args.topk} are motif repeats; "
              + ", ".join(f"({x},{y}) {w:.4f}" for (x, y), w in overlay.selected))


if __name__ == "__main__":
    main()
